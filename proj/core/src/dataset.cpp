#include "promptlab/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "binary_io.hpp"
#include "json_convert.hpp"

namespace promptlab {

const char* to_string(Granularity g) { return g == Granularity::CharLike ? "char" : "word"; }

Granularity parse_granularity(const std::string& s) {
  if (s == "char") return Granularity::CharLike;
  if (s == "word") return Granularity::WordLike;
  throw std::invalid_argument("unknown granularity: " + s + " (expected char or word)");
}

std::vector<ToyLanguageSpec> standard_languages(const SpecialTokenMap& tokens) {
  const int n = tokens.first_special;
  if (n < 6) throw std::invalid_argument("standard_languages: need at least 6 text tokens");
  const int a_end = n / 3 + (n % 3 > 0 ? 1 : 0);
  const int b_end = a_end + n / 3 + (n % 3 > 1 ? 1 : 0);
  return {
      {"A", Granularity::CharLike, 0, a_end, 1},
      {"B", Granularity::WordLike, a_end, b_end, 2},
      {"C", Granularity::CharLike, b_end, n, 1},
  };
}

void validate_languages(const std::vector<ToyLanguageSpec>& languages) {
  if (languages.empty()) throw std::invalid_argument("no languages configured");
  for (std::size_t i = 0; i < languages.size(); ++i) {
    const auto& a = languages[i];
    if (a.token_begin < 0 || a.token_begin >= a.token_end) {
      throw std::invalid_argument("language " + a.name + " has an empty token range");
    }
    if (a.tokens_per_unit < 1 || (a.granularity == Granularity::CharLike && a.tokens_per_unit != 1)) {
      throw std::invalid_argument("language " + a.name + " has an invalid tokens_per_unit");
    }
    for (std::size_t j = i + 1; j < languages.size(); ++j) {
      const auto& b = languages[j];
      if (a.name == b.name) throw std::invalid_argument("duplicate language " + a.name);
      if (a.token_begin < b.token_end && b.token_begin < a.token_end) {
        throw std::invalid_argument("token ranges of " + a.name + " and " + b.name + " overlap");
      }
    }
  }
}

const ToyLanguageSpec* language_of(int token, const std::vector<ToyLanguageSpec>& languages) {
  for (const auto& l : languages) {
    if (l.contains(token)) return &l;
  }
  return nullptr;
}

Codebook::Codebook(int text_tokens, int d_feat, std::uint64_t seed)
    : table_(Tensor::matrix(static_cast<std::size_t>(text_tokens), static_cast<std::size_t>(d_feat))) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : table_.values()) v = normal(rng);
}

std::span<const double> Codebook::row(int token) const {
  if (token < 0 || token >= text_tokens()) {
    throw std::out_of_range("codebook: token " + std::to_string(token) + " outside text vocabulary");
  }
  return table_.row(static_cast<std::size_t>(token));
}

Tensor synth_features(std::span<const int> tokens, const Codebook& codebook, double noise_std,
                      std::uint64_t seed) {
  if (tokens.empty()) throw std::invalid_argument("synth_features: empty token sequence");
  Tensor x = Tensor::matrix(tokens.size() * kFramesPerToken, static_cast<std::size_t>(codebook.d_feat()));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t frame = 0;
  for (int t : tokens) {
    const auto base = codebook.row(t);
    for (int k = 0; k < kFramesPerToken; ++k, ++frame) {
      auto dst = x.row(frame);
      for (std::size_t c = 0; c < dst.size(); ++c) {
        dst[c] = base[c] + (noise_std > 0.0 ? noise_std * noise(rng) : 0.0);
      }
    }
  }
  return x;
}

std::size_t DatasetManifest::token_count() const {
  std::size_t n = 0;
  for (const auto& u : utterances) n += u.tokens.size();
  return n;
}

DatasetManifest gen_dataset(const GenerationConfig& config) {
  validate_languages(config.languages);
  const std::size_t k = config.languages.size();
  if (config.mix_ratio.size() != k) {
    throw std::invalid_argument("mix_ratio needs one entry per language");
  }
  double ratio_sum = 0.0;
  for (double r : config.mix_ratio) {
    if (r < 0.0) throw std::invalid_argument("mix_ratio entries must be non-negative");
    ratio_sum += r;
  }
  if (std::abs(ratio_sum - 1.0) > 1e-9) throw std::invalid_argument("mix_ratio must sum to 1");
  if (config.size < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (config.min_units < 1 || config.max_units < config.min_units) {
    throw std::invalid_argument("unit count range must satisfy 1 <= min_units <= max_units");
  }
  if (config.switch_prob < 0.0 || config.switch_prob > 1.0) {
    throw std::invalid_argument("switch_prob must lie in [0, 1]");
  }
  for (const auto& l : config.languages) {
    if (l.token_end > config.text_tokens) {
      throw std::invalid_argument("language " + l.name + " exceeds the text-token space");
    }
  }

  // Unit draws weighted by ratio / tokens_per_unit so the token share tracks mix_ratio.
  std::vector<double> unit_weights(k);
  for (std::size_t i = 0; i < k; ++i) {
    unit_weights[i] = config.mix_ratio[i] / config.languages[i].tokens_per_unit;
  }

  DatasetManifest m;
  m.split = config.split;
  m.seed = config.seed;
  m.config = config;
  if (m.config.prefix_language.empty()) {
    const auto top = std::max_element(config.mix_ratio.begin(), config.mix_ratio.end());
    m.config.prefix_language = config.languages[static_cast<std::size_t>(top - config.mix_ratio.begin())].name;
  }

  const Codebook codebook(config.text_tokens, config.d_feat, config.codebook_seed);
  std::mt19937_64 rng(config.seed);
  std::discrete_distribution<std::size_t> pick_lang(unit_weights.begin(), unit_weights.end());
  std::uniform_int_distribution<int> pick_len(config.min_units, config.max_units);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  for (int i = 0; i < config.size; ++i) {
    Utterance u;
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%05d", config.split.c_str(), i);
    u.id = id;
    const int units = pick_len(rng);
    std::size_t lang = pick_lang(rng);
    for (int unit = 0; unit < units; ++unit) {
      const auto& spec = config.languages[lang];
      std::uniform_int_distribution<int> pick_token(spec.token_begin, spec.token_end - 1);
      for (int t = 0; t < spec.tokens_per_unit; ++t) {
        u.tokens.push_back(pick_token(rng));
        u.token_langs.push_back(spec.name);
      }
      if (unit + 1 < units && coin(rng) < config.switch_prob) lang = pick_lang(rng);
    }
    u.features = synth_features(u.tokens, codebook, config.noise_std,
                                detail::derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    m.utterances.push_back(std::move(u));
  }
  return m;
}

std::vector<double> realized_mix(const DatasetManifest& manifest) {
  const auto& langs = manifest.config.languages;
  std::vector<double> share(langs.size(), 0.0);
  std::size_t total = 0;
  for (const auto& u : manifest.utterances) {
    for (const auto& name : u.token_langs) {
      for (std::size_t i = 0; i < langs.size(); ++i) {
        if (langs[i].name == name) share[i] += 1.0;
      }
      ++total;
    }
  }
  for (auto& s : share) s /= static_cast<double>(std::max<std::size_t>(total, 1));
  return share;
}

void write_features(const Tensor& features, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(features.rows()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(features.cols()));
  for (double v : features.data()) detail::write_le<double>(os, v);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const auto rows = detail::read_le<std::uint32_t>(is);
  const auto cols = detail::read_le<std::uint32_t>(is);
  std::vector<double> values(static_cast<std::size_t>(rows) * cols);
  for (auto& v : values) v = detail::read_le<double>(is);
  return Tensor({rows, cols}, std::move(values));
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  nlohmann::json utts = nlohmann::json::array();
  for (const auto& u : manifest.utterances) {
    const std::string rel = "features/" + u.id + ".bin";
    write_features(u.features, dir / rel);
    utts.push_back({{"id", u.id}, {"tokens", u.tokens}, {"token_langs", u.token_langs}, {"feature_file", rel}});
  }
  nlohmann::json j = {{"split", manifest.split},
                      {"seed", manifest.seed},
                      {"config", manifest.config},
                      {"utterances", std::move(utts)}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_json) {
  std::ifstream is(manifest_json);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest_json.string());
  const auto j = nlohmann::json::parse(is);
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config").get<GenerationConfig>();
  const auto base = manifest_json.parent_path();
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.id = ju.at("id").get<std::string>();
    u.tokens = ju.at("tokens").get<std::vector<int>>();
    u.token_langs = ju.at("token_langs").get<std::vector<std::string>>();
    if (u.tokens.size() != u.token_langs.size()) {
      throw std::runtime_error("manifest utterance " + u.id + ": tokens and token_langs differ in length");
    }
    u.features = read_features(base / ju.at("feature_file").get<std::string>());
    m.utterances.push_back(std::move(u));
  }
  return m;
}

}  // namespace promptlab
