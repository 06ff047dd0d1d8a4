#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "promptlab/model.hpp"

namespace promptlab {

enum class Method { FFT, LoRA, VanillaSPT, DPT, ResPT, LPT, SPT4ASR, WholeModelSPT };
enum class PromptPosition { Encoder, Decoder, Entire };

const char* to_string(Method m);
const char* to_string(PromptPosition p);
Method parse_method(const std::string& s);
PromptPosition parse_position(const std::string& s);
Projection parse_projection(const std::string& s);

/// Declarative description of one tuning method. Fields that a method does
/// not use are ignored.
struct AdapterSpec {
  Method method = Method::VanillaSPT;
  PromptPosition position = PromptPosition::Entire;
  int n_enc = 128;
  int n_dec = 128;
  /// Deep prompt rows written at the output of every block of each prompted side.
  int n_deep = 64;
  /// Shared residual MLP bottleneck; 0 selects d_model / 2.
  int respt_bottleneck = 0;
  int lpt_hidden = 512;
  std::vector<std::string> lpt_languages = {"A", "B"};
  int lora_rank = 8;
  double lora_alpha = 16.0;
  std::set<Projection> lora_targets = {Projection::Q, Projection::V};
  /// Longest target sequence the decoder must accommodate alongside prompts.
  int target_budget = 130;
  /// Constituent switches, honored for SPT4ASR only.
  bool use_deep = true;
  bool use_respt = true;
  bool use_lpt = true;
  std::uint64_t seed = 0;

  friend bool operator==(const AdapterSpec&, const AdapterSpec&) = default;
};

/// Which mechanisms a spec switches on.
struct Mechanisms {
  bool encoder_prompts = false;
  bool decoder_prompts = false;
  bool deep = false;
  bool respt = false;
  bool lpt = false;
  bool lora = false;
  bool base_trainable = false;
};

Mechanisms resolve_mechanisms(const AdapterSpec& spec);

/// Effective prompt lengths after applying the position.
int encoder_prompt_length(const AdapterSpec& spec);
int decoder_prompt_length(const AdapterSpec& spec);
int respt_width(const AdapterSpec& spec, const ModelConfig& config);

/// Throws std::invalid_argument (or ContextLimitError for the decoder
/// context rule) when `spec` cannot be attached to a model with `config`.
void validate_spec(const AdapterSpec& spec, const ModelConfig& config);

/// Trainable-parameter breakdown. Component keys: base, prompts, deep,
/// respt_mlp, lpt_encoder, lora.
struct ParamAccount {
  std::map<std::string, std::size_t> components;
  std::size_t total = 0;
  std::size_t frozen_total = 0;

  friend bool operator==(const ParamAccount&, const ParamAccount&) = default;
};

/// Closed-form count from dimensions alone.
ParamAccount symbolic_account(const ModelConfig& config, const AdapterSpec& spec);
/// Count by enumerating the parameter layouts attach() would allocate.
/// Works for presets too large to instantiate.
ParamAccount layout_account(const ModelConfig& config, const AdapterSpec& spec);
/// Component a parameter name belongs to.
std::string account_component(const std::string& parameter_name);

/// Adapter parameter layout in allocation order.
std::vector<ParamSpec> adapter_parameter_layout(const ModelConfig& config, const AdapterSpec& spec);

/// Overwrites rows [offset, offset + rows.rows()) of `hidden` with `rows`.
/// Sequence length is unchanged; `rows` may not be empty.
Var overwrite_rows(Var hidden, std::size_t offset, Var rows);

/// x + fc2(gelu(fc1(x))), row-wise. Used for residual prompt reparameterization
/// and the language encoder.
Var residual_mlp(Var x, Var w1, Var b1, Var w2, Var b2);

/// (alpha / r) * (x A^T) B^T, the low-rank update added to a frozen projection.
Var lora_delta(Var x, Var a, Var b, double scale);

/// A model with an adapter wired into its forward pass. Owns the model.
class AttachedAdapter : public ForwardAdapter {
 public:
  AttachedAdapter(Model model, AdapterSpec spec);

  const AdapterSpec& spec() const { return spec_; }
  const Mechanisms& mechanisms() const { return mech_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  ParameterStore& bank() { return bank_; }
  const ParameterStore& bank() const { return bank_; }

  /// Every trainable parameter: adapter parameters, plus base parameters for
  /// FFT and whole-model SPT.
  std::vector<Parameter*> trainable_parameters();
  /// Every parameter, base first, then adapter.
  std::vector<Parameter*> all_parameters();

  // ForwardAdapter
  std::optional<Var> encoder_prompts(Graph& g) override;
  std::optional<Var> decoder_prompts(Graph& g) override;
  Var block_output(Graph& g, Side side, int block, Var hidden) override;
  std::optional<Var> projection_delta(Graph& g, const ProjectionSite& site, Var input) override;

  /// ResPT reparameterization MLP(P) + P through the shared MLP.
  Var respt_reparam(Graph& g, Var prompts);
  /// One row per configured language: LangEncoder(E[LID(lang)]).
  Var lpt_prompts(Graph& g);
  /// Rows of encoder output reserved for language prompts (deep prompts start after them).
  std::size_t lpt_rows() const;

  /// Convenience wrappers over the model with this adapter plugged in.
  Var forward_logits(Graph& g, const Tensor& features, const std::string& language,
                     std::span<const int> y);
  std::vector<int> transcribe(const Tensor& features, const std::string& language,
                              std::size_t max_new_tokens);

 private:
  Var prompt_matrix(Graph& g, ParameterStore::Handle h);

  Model model_;
  AdapterSpec spec_;
  Mechanisms mech_;
  ParameterStore bank_;

  std::optional<ParameterStore::Handle> p_enc_, p_dec_;
  std::vector<ParameterStore::Handle> deep_enc_, deep_dec_;
  struct MlpHandles {
    ParameterStore::Handle w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  };
  std::optional<MlpHandles> respt_, lang_encoder_;
  struct LoraHandles {
    ParameterStore::Handle a = 0, b = 0;
  };
  std::map<std::string, LoraHandles> lora_;
  double lora_scale_ = 0.0;
};

/// Partitions the model's parameters per `spec` and wires the adapter.
/// FFT: all base trainable. LoRA and every SPT variant: base frozen, adapter
/// trainable. Whole-model SPT: both trainable.
AttachedAdapter attach(Model model, const AdapterSpec& spec);

/// attach() for an SPT4ASR spec, checking the composition preconditions.
AttachedAdapter compose_spt4asr(Model model, const AdapterSpec& spec);

/// Drops the adapter and returns the untouched base model. Rejected for FFT
/// and whole-model SPT, whose base was trained.
Model detach(AttachedAdapter attached);

/// Live enumeration of the attached model's trainable parameters.
ParamAccount count_params(const AttachedAdapter& attached);

/// Name of the LoRA factor for a site, e.g. "lora.decoder.block1.cross_attn.v.A".
std::string lora_parameter_name(const ProjectionSite& site, char factor);

}  // namespace promptlab
