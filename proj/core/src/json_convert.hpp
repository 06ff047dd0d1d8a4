#pragma once

// JSON conversions for the configuration structs. Missing optional keys keep
// the struct defaults; malformed values raise FieldError carrying the dotted
// path of the offending field.

#include <json.hpp>
#include <stdexcept>
#include <string>

#include "promptlab/dataset.hpp"
#include "promptlab/model.hpp"
#include "promptlab/peft.hpp"
#include "promptlab/trainer.hpp"

namespace promptlab {

class FieldError : public std::invalid_argument {
 public:
  FieldError(std::string path, const std::string& why)
      : std::invalid_argument(why), path_(std::move(path)), why_(why) {}
  const std::string& path() const { return path_; }
  const std::string& why() const { return why_; }
  FieldError nested(const std::string& parent) const {
    return FieldError(path_.empty() ? parent : parent + "." + path_, why_);
  }

 private:
  std::string path_;
  std::string why_;
};

namespace detail {

template <typename T>
void field(const nlohmann::json& j, const char* key, T& out, bool required = false) {
  if (!j.is_object()) throw FieldError("", "expected an object");
  if (!j.contains(key)) {
    if (required) throw FieldError(key, "missing required field");
    return;
  }
  try {
    out = j.at(key).get<T>();
  } catch (const FieldError& e) {
    throw e.nested(key);
  } catch (const nlohmann::json::exception& e) {
    throw FieldError(key, e.what());
  } catch (const std::invalid_argument& e) {
    throw FieldError(key, e.what());
  }
}

}  // namespace detail

// ---- enums ----------------------------------------------------------------

inline void to_json(nlohmann::json& j, Method m) { j = to_string(m); }
inline void from_json(const nlohmann::json& j, Method& m) { m = parse_method(j.get<std::string>()); }
inline void to_json(nlohmann::json& j, PromptPosition p) { j = to_string(p); }
inline void from_json(const nlohmann::json& j, PromptPosition& p) {
  p = parse_position(j.get<std::string>());
}
inline void to_json(nlohmann::json& j, Projection p) { j = to_string(p); }
inline void from_json(const nlohmann::json& j, Projection& p) {
  p = parse_projection(j.get<std::string>());
}
inline void to_json(nlohmann::json& j, Granularity g) { j = to_string(g); }
inline void from_json(const nlohmann::json& j, Granularity& g) {
  g = parse_granularity(j.get<std::string>());
}

// ---- ModelConfig ------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"n_enc_blocks", c.n_enc_blocks},
       {"n_dec_blocks", c.n_dec_blocks},
       {"ffn_mult", c.ffn_mult},
       {"vocab_size", c.vocab_size},
       {"d_feat", c.d_feat},
       {"max_source_positions", c.max_source_positions},
       {"max_target_positions", c.max_target_positions},
       {"seed", c.seed},
       {"languages", c.languages}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  using detail::field;
  field(j, "d_model", c.d_model);
  field(j, "n_heads", c.n_heads);
  field(j, "n_enc_blocks", c.n_enc_blocks);
  field(j, "n_dec_blocks", c.n_dec_blocks);
  field(j, "ffn_mult", c.ffn_mult);
  field(j, "vocab_size", c.vocab_size);
  field(j, "d_feat", c.d_feat);
  field(j, "max_source_positions", c.max_source_positions);
  field(j, "max_target_positions", c.max_target_positions);
  field(j, "seed", c.seed);
  field(j, "languages", c.languages);
}

// ---- AdapterSpec ------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AdapterSpec& s) {
  j = {{"method", s.method},
       {"position", s.position},
       {"n_enc", s.n_enc},
       {"n_dec", s.n_dec},
       {"n_deep", s.n_deep},
       {"respt_bottleneck", s.respt_bottleneck},
       {"lpt_hidden", s.lpt_hidden},
       {"lpt_languages", s.lpt_languages},
       {"lora_rank", s.lora_rank},
       {"lora_alpha", s.lora_alpha},
       {"lora_targets", s.lora_targets},
       {"target_budget", s.target_budget},
       {"use_deep", s.use_deep},
       {"use_respt", s.use_respt},
       {"use_lpt", s.use_lpt},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, AdapterSpec& s) {
  using detail::field;
  field(j, "method", s.method, true);
  field(j, "position", s.position);
  field(j, "n_enc", s.n_enc);
  field(j, "n_dec", s.n_dec);
  field(j, "n_deep", s.n_deep);
  field(j, "respt_bottleneck", s.respt_bottleneck);
  field(j, "lpt_hidden", s.lpt_hidden);
  field(j, "lpt_languages", s.lpt_languages);
  field(j, "lora_rank", s.lora_rank);
  field(j, "lora_alpha", s.lora_alpha);
  field(j, "lora_targets", s.lora_targets);
  field(j, "target_budget", s.target_budget);
  field(j, "use_deep", s.use_deep);
  field(j, "use_respt", s.use_respt);
  field(j, "use_lpt", s.use_lpt);
  field(j, "seed", s.seed);
}

// ---- OptimizerConfig --------------------------------------------------------

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"max_steps", c.max_steps},
       {"stop_below_loss", c.stop_below_loss}};
  j["grad_clip_norm"] = c.grad_clip_norm ? nlohmann::json(*c.grad_clip_norm) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  using detail::field;
  field(j, "learning_rate", c.learning_rate);
  field(j, "beta1", c.beta1);
  field(j, "beta2", c.beta2);
  field(j, "eps", c.eps);
  field(j, "weight_decay", c.weight_decay);
  field(j, "epochs", c.epochs);
  field(j, "batch_size", c.batch_size);
  field(j, "seed", c.seed);
  field(j, "max_steps", c.max_steps);
  field(j, "stop_below_loss", c.stop_below_loss);
  if (j.contains("grad_clip_norm")) {
    if (j.at("grad_clip_norm").is_null()) {
      c.grad_clip_norm.reset();
    } else {
      double v = 0.0;
      field(j, "grad_clip_norm", v);
      c.grad_clip_norm = v;
    }
  }
}

// ---- datasets ---------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ToyLanguageSpec& l) {
  j = {{"name", l.name},
       {"granularity", l.granularity},
       {"token_begin", l.token_begin},
       {"token_end", l.token_end},
       {"tokens_per_unit", l.tokens_per_unit}};
}

inline void from_json(const nlohmann::json& j, ToyLanguageSpec& l) {
  using detail::field;
  field(j, "name", l.name, true);
  field(j, "granularity", l.granularity);
  field(j, "token_begin", l.token_begin, true);
  field(j, "token_end", l.token_end, true);
  field(j, "tokens_per_unit", l.tokens_per_unit);
}

inline void to_json(nlohmann::json& j, const GenerationConfig& c) {
  j = {{"split", c.split},
       {"languages", c.languages},
       {"mix_ratio", c.mix_ratio},
       {"switch_prob", c.switch_prob},
       {"size", c.size},
       {"min_units", c.min_units},
       {"max_units", c.max_units},
       {"noise_std", c.noise_std},
       {"d_feat", c.d_feat},
       {"text_tokens", c.text_tokens},
       {"codebook_seed", c.codebook_seed},
       {"seed", c.seed},
       {"prefix_language", c.prefix_language}};
}

inline void from_json(const nlohmann::json& j, GenerationConfig& c) {
  using detail::field;
  field(j, "split", c.split);
  field(j, "languages", c.languages);
  field(j, "mix_ratio", c.mix_ratio);
  field(j, "switch_prob", c.switch_prob);
  field(j, "size", c.size);
  field(j, "min_units", c.min_units);
  field(j, "max_units", c.max_units);
  field(j, "noise_std", c.noise_std);
  field(j, "d_feat", c.d_feat);
  field(j, "text_tokens", c.text_tokens);
  field(j, "codebook_seed", c.codebook_seed);
  field(j, "seed", c.seed);
  field(j, "prefix_language", c.prefix_language);
}

}  // namespace promptlab
