#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "promptlab/tensor.hpp"
#include "promptlab/tokens.hpp"

namespace promptlab {

enum class Granularity { CharLike, WordLike };

const char* to_string(Granularity g);
Granularity parse_granularity(const std::string& s);

/// A synthetic language: a disjoint slice of the text-token space. Char-like
/// languages score one unit per token; word-like languages group
/// `tokens_per_unit` tokens into one unit.
struct ToyLanguageSpec {
  std::string name;
  Granularity granularity = Granularity::CharLike;
  int token_begin = 0;
  int token_end = 0;
  int tokens_per_unit = 1;

  bool contains(int token) const { return token >= token_begin && token < token_end; }
  friend bool operator==(const ToyLanguageSpec&, const ToyLanguageSpec&) = default;
};

/// Three languages over the text tokens of `tokens`: A (char-like), B
/// (word-like, 2 tokens per unit) and C (char-like), splitting
/// [0, first_special) into near-equal ranges.
std::vector<ToyLanguageSpec> standard_languages(const SpecialTokenMap& tokens);

/// Throws if ranges overlap or are empty.
void validate_languages(const std::vector<ToyLanguageSpec>& languages);

const ToyLanguageSpec* language_of(int token, const std::vector<ToyLanguageSpec>& languages);

/// Fixed token-to-frame projection shared by every dataset of a task family.
class Codebook {
 public:
  Codebook(int text_tokens, int d_feat, std::uint64_t seed);
  std::span<const double> row(int token) const;
  int d_feat() const { return static_cast<int>(table_.cols()); }
  int text_tokens() const { return static_cast<int>(table_.rows()); }

 private:
  Tensor table_;
};

inline constexpr int kFramesPerToken = 2;

/// Each token emits kFramesPerToken frames: its codebook row plus Gaussian
/// noise drawn from a generator seeded with `seed`.
Tensor synth_features(std::span<const int> tokens, const Codebook& codebook, double noise_std,
                      std::uint64_t seed);

struct Utterance {
  std::string id;
  std::vector<int> tokens;
  std::vector<std::string> token_langs;
  Tensor features;
};

struct GenerationConfig {
  std::string split = "train";
  std::vector<ToyLanguageSpec> languages;
  /// Target token share per language, same order as `languages`.
  std::vector<double> mix_ratio;
  double switch_prob = 0.2;
  int size = 100;
  int min_units = 3;
  int max_units = 8;
  double noise_std = 0.1;
  int d_feat = 16;
  /// Size of the text-token space the codebook covers.
  int text_tokens = 56;
  std::uint64_t codebook_seed = 1234;
  std::uint64_t seed = 0;
  /// Language whose LID token goes into the decoder prefix.
  std::string prefix_language;

  friend bool operator==(const GenerationConfig&, const GenerationConfig&) = default;
};

struct DatasetManifest {
  std::string split;
  std::uint64_t seed = 0;
  GenerationConfig config;
  std::vector<Utterance> utterances;

  const std::string& prefix_language() const { return config.prefix_language; }
  std::size_t token_count() const;
};

/// Deterministic per (config). Each utterance is a run of units; after every
/// unit, with probability switch_prob, the next unit's language is redrawn
/// from the mix (unit draws are weighted so the token share follows
/// mix_ratio).
DatasetManifest gen_dataset(const GenerationConfig& config);

/// Token-level share of each language in a manifest.
std::vector<double> realized_mix(const DatasetManifest& manifest);

/// Writes `dir/manifest.json` and one feature file per utterance under
/// `dir/features/`.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& manifest_json);

/// Feature file: u32 rows, u32 cols (little-endian), then rows*cols
/// little-endian doubles.
void write_features(const Tensor& features, const std::filesystem::path& path);
Tensor read_features(const std::filesystem::path& path);

}  // namespace promptlab
