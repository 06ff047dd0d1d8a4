#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "promptlab/dataset.hpp"

namespace promptlab {

/// One scoring unit: a single token of a char-like language or a group of
/// tokens_per_unit tokens of a word-like language. `language` is empty for
/// tokens outside every language range.
struct MerUnit {
  std::string language;
  std::vector<int> tokens;
  friend bool operator==(const MerUnit&, const MerUnit&) = default;
};

/// Reference side: runs are split by the per-token language tags.
std::vector<MerUnit> reference_units(std::span<const int> tokens, std::span<const std::string> token_langs,
                                     const std::vector<ToyLanguageSpec>& languages);
/// Hypothesis side: runs are split by the language whose id range holds each token.
std::vector<MerUnit> hypothesis_units(std::span<const int> tokens,
                                      const std::vector<ToyLanguageSpec>& languages);

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t total() const { return substitutions + deletions + insertions; }
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

/// One step of a Levenshtein alignment. `ref`/`hyp` are indices, or -1 for
/// the side a deletion or insertion skips.
struct AlignmentOp {
  enum Kind { Match, Substitution, Deletion, Insertion } kind;
  long ref = -1;
  long hyp = -1;
};

/// Unit-cost Levenshtein alignment from the full table. On ties the
/// backtrace prefers match/substitution, then deletion, then insertion.
std::vector<AlignmentOp> align_units(std::span<const MerUnit> ref, std::span<const MerUnit> hyp);
EditCounts count_edits(std::span<const AlignmentOp> ops);

struct LanguageErrors {
  EditCounts edits;
  std::size_t reference_units = 0;
};

struct MerReport {
  EditCounts edits;
  std::size_t reference_units = 0;
  /// Substitutions and deletions are charged to the reference unit's
  /// language, insertions to the inserted unit's language.
  std::map<std::string, LanguageErrors> per_language;

  double mer() const;
  /// Adds another report's counts (corpus-level pooling).
  MerReport& operator+=(const MerReport& other);
};

/// MER of one hypothesis against a reference utterance. Throws on an empty
/// reference.
MerReport mer(const Utterance& ref, std::span<const int> hyp, const std::vector<ToyLanguageSpec>& languages);

using Transcriber = std::function<std::vector<int>(const Utterance&)>;

/// Pooled MER over every utterance of a manifest.
MerReport corpus_mer(const DatasetManifest& manifest, const Transcriber& transcribe);

/// Greedy-decoding length cap used for evaluation.
std::size_t decode_budget(const Utterance& u);

}  // namespace promptlab
