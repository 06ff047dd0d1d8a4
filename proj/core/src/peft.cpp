#include "promptlab/peft.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace promptlab {

namespace {

[[noreturn]] void reject(const std::string& what) {
  throw std::invalid_argument("invalid adapter spec: " + what);
}

const char* kind_name(AttentionKind k) { return k == AttentionKind::Self ? "attn" : "cross_attn"; }

bool is_spt(Method m) {
  return m == Method::VanillaSPT || m == Method::DPT || m == Method::ResPT || m == Method::LPT ||
         m == Method::SPT4ASR || m == Method::WholeModelSPT;
}

/// Every attention site of the model in forward order.
std::vector<ProjectionSite> attention_sites(const ModelConfig& c) {
  std::vector<ProjectionSite> sites;
  for (int i = 0; i < c.n_enc_blocks; ++i) sites.push_back({Side::Encoder, i, AttentionKind::Self});
  for (int i = 0; i < c.n_dec_blocks; ++i) {
    sites.push_back({Side::Decoder, i, AttentionKind::Self});
    sites.push_back({Side::Decoder, i, AttentionKind::Cross});
  }
  return sites;
}

std::string deep_name(Side side, int block) {
  return std::string("deep.") + to_string(side) + ".block" + std::to_string(block);
}

void add_mlp_layout(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t e,
                    std::size_t hidden) {
  out.push_back({prefix + ".fc1.weight", {hidden, e}});
  out.push_back({prefix + ".fc1.bias", {hidden}, ParamInit::Zeros});
  // Zero output layer: the residual MLP starts as the identity.
  out.push_back({prefix + ".fc2.weight", {e, hidden}, ParamInit::Zeros});
  out.push_back({prefix + ".fc2.bias", {e}, ParamInit::Zeros});
}

std::size_t model_count(const ModelConfig& c) {
  const std::size_t e = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.ffn_width());
  const std::size_t attn = 4 * e * e + 3 * e;  // k_proj has no bias
  const std::size_t mlp = 2 * e * f + f + e;
  const std::size_t enc = static_cast<std::size_t>(c.n_enc_blocks) * (4 * e + attn + mlp);
  const std::size_t dec = static_cast<std::size_t>(c.n_dec_blocks) * (6 * e + 2 * attn + mlp);
  return e * static_cast<std::size_t>(c.d_feat) + e +
         static_cast<std::size_t>(c.max_source_positions) * e + enc + 2 * e +
         static_cast<std::size_t>(c.vocab_size) * e +
         static_cast<std::size_t>(c.max_target_positions) * e + dec + 2 * e;
}

void finish(ParamAccount& acc, std::size_t everything) {
  acc.total = 0;
  for (const auto& [_, n] : acc.components) acc.total += n;
  acc.frozen_total = everything - acc.total;
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::FFT: return "FFT";
    case Method::LoRA: return "LoRA";
    case Method::VanillaSPT: return "VanillaSPT";
    case Method::DPT: return "DPT";
    case Method::ResPT: return "ResPT";
    case Method::LPT: return "LPT";
    case Method::SPT4ASR: return "SPT4ASR";
    case Method::WholeModelSPT: return "WholeModelSPT";
  }
  return "?";
}

const char* to_string(PromptPosition p) {
  switch (p) {
    case PromptPosition::Encoder: return "Encoder";
    case PromptPosition::Decoder: return "Decoder";
    case PromptPosition::Entire: return "Entire";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::FFT, Method::LoRA, Method::VanillaSPT, Method::DPT, Method::ResPT,
                   Method::LPT, Method::SPT4ASR, Method::WholeModelSPT}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown method: " + s);
}

PromptPosition parse_position(const std::string& s) {
  for (PromptPosition p : {PromptPosition::Encoder, PromptPosition::Decoder, PromptPosition::Entire}) {
    if (s == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown prompt position: " + s);
}

Projection parse_projection(const std::string& s) {
  for (Projection p : {Projection::Q, Projection::K, Projection::V, Projection::O}) {
    if (s == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown projection: " + s);
}

Mechanisms resolve_mechanisms(const AdapterSpec& spec) {
  Mechanisms m;
  if (is_spt(spec.method)) {
    m.encoder_prompts = spec.position != PromptPosition::Decoder;
    m.decoder_prompts = spec.position != PromptPosition::Encoder;
  }
  switch (spec.method) {
    case Method::FFT: m.base_trainable = true; break;
    case Method::LoRA: m.lora = true; break;
    case Method::VanillaSPT: break;
    case Method::DPT: m.deep = true; break;
    case Method::ResPT: m.respt = true; break;
    case Method::LPT: m.lpt = true; break;
    case Method::SPT4ASR:
      m.deep = spec.use_deep;
      m.respt = spec.use_respt;
      m.lpt = spec.use_lpt;
      break;
    case Method::WholeModelSPT: m.base_trainable = true; break;
  }
  return m;
}

int encoder_prompt_length(const AdapterSpec& spec) {
  return resolve_mechanisms(spec).encoder_prompts ? spec.n_enc : 0;
}

int decoder_prompt_length(const AdapterSpec& spec) {
  return resolve_mechanisms(spec).decoder_prompts ? spec.n_dec : 0;
}

int respt_width(const AdapterSpec& spec, const ModelConfig& config) {
  return spec.respt_bottleneck > 0 ? spec.respt_bottleneck : config.d_model / 2;
}

void validate_spec(const AdapterSpec& spec, const ModelConfig& config) {
  config.validate();
  const Mechanisms m = resolve_mechanisms(spec);
  const int n_enc = encoder_prompt_length(spec);
  const int n_dec = decoder_prompt_length(spec);
  if (m.encoder_prompts && n_enc < 1) reject("n_enc must be >= 1 for encoder prompts");
  if (m.decoder_prompts && n_dec < 1) reject("n_dec must be >= 1 for decoder prompts");
  if (m.deep) {
    if (spec.n_deep < 0) reject("n_deep must be >= 0");
    if ((m.encoder_prompts && spec.n_deep > n_enc) || (m.decoder_prompts && spec.n_deep > n_dec)) {
      reject("n_deep " + std::to_string(spec.n_deep) +
             " exceeds the prompt length of a prompted side; deep prompts overwrite existing prompt slots");
    }
  }
  if (m.respt && respt_width(spec, config) < 1) reject("respt_bottleneck must be >= 1");
  if (m.lpt) {
    if (spec.lpt_hidden < 1) reject("lpt_hidden must be >= 1");
    if (spec.lpt_languages.empty()) reject("lpt_languages must not be empty");
    const auto tokens = SpecialTokenMap::standard(config.vocab_size, config.languages);
    for (const auto& lang : spec.lpt_languages) tokens.lid_for(lang);
  }
  if (m.lora) {
    if (spec.lora_rank < 1) reject("lora_rank must be >= 1");
    if (!(spec.lora_alpha > 0.0)) reject("lora_alpha must be > 0");
    if (spec.lora_targets.empty()) reject("lora_targets must not be empty");
  }
  if (spec.target_budget < 1) reject("target_budget must be >= 1");
  const int lpt_rows = m.lpt ? static_cast<int>(spec.lpt_languages.size()) : 0;
  if (lpt_rows + n_enc >= config.max_source_positions) {
    throw ContextLimitError("encoder context limit: " + std::to_string(lpt_rows + n_enc) +
                            " prompt rows leave no room within max_source_positions " +
                            std::to_string(config.max_source_positions));
  }
  const int needed = n_dec + static_cast<int>(kDecoderPrefixLength) + spec.target_budget;
  if (needed > config.max_target_positions) {
    throw ContextLimitError("decoder context limit: " + std::to_string(n_dec) + " prompts + " +
                            std::to_string(kDecoderPrefixLength) + " prefix tokens + " +
                            std::to_string(spec.target_budget) +
                            " target tokens exceed max_target_positions " +
                            std::to_string(config.max_target_positions));
  }
}

std::vector<ParamSpec> adapter_parameter_layout(const ModelConfig& config, const AdapterSpec& spec) {
  validate_spec(spec, config);
  const Mechanisms m = resolve_mechanisms(spec);
  const auto e = static_cast<std::size_t>(config.d_model);
  std::vector<ParamSpec> out;
  if (m.lpt) add_mlp_layout(out, "lpt", e, static_cast<std::size_t>(spec.lpt_hidden));
  if (m.encoder_prompts) out.push_back({"prompt.encoder", {static_cast<std::size_t>(spec.n_enc), e}});
  if (m.decoder_prompts) out.push_back({"prompt.decoder", {static_cast<std::size_t>(spec.n_dec), e}});
  if (m.deep && spec.n_deep > 0) {
    const auto nd = static_cast<std::size_t>(spec.n_deep);
    if (m.encoder_prompts) {
      for (int i = 0; i < config.n_enc_blocks; ++i) out.push_back({deep_name(Side::Encoder, i), {nd, e}});
    }
    if (m.decoder_prompts) {
      for (int i = 0; i < config.n_dec_blocks; ++i) out.push_back({deep_name(Side::Decoder, i), {nd, e}});
    }
  }
  if (m.respt) add_mlp_layout(out, "respt", e, static_cast<std::size_t>(respt_width(spec, config)));
  if (m.lora) {
    const auto r = static_cast<std::size_t>(spec.lora_rank);
    for (const auto& site : attention_sites(config)) {
      for (Projection p : spec.lora_targets) {
        ProjectionSite s = site;
        s.proj = p;
        out.push_back({lora_parameter_name(s, 'A'), {r, e}});
        out.push_back({lora_parameter_name(s, 'B'), {e, r}, ParamInit::Zeros});
      }
    }
  }
  return out;
}

std::string lora_parameter_name(const ProjectionSite& site, char factor) {
  return std::string("lora.") + to_string(site.side) + ".block" + std::to_string(site.block) + "." +
         kind_name(site.kind) + "." + to_string(site.proj) + "." + factor;
}

std::string account_component(const std::string& name) {
  const auto head = name.substr(0, name.find('.'));
  if (head == "prompt") return "prompts";
  if (head == "deep") return "deep";
  if (head == "respt") return "respt_mlp";
  if (head == "lpt") return "lpt_encoder";
  if (head == "lora") return "lora";
  return "base";
}

ParamAccount symbolic_account(const ModelConfig& config, const AdapterSpec& spec) {
  validate_spec(spec, config);
  const Mechanisms m = resolve_mechanisms(spec);
  const std::size_t e = static_cast<std::size_t>(config.d_model);
  const std::size_t base = model_count(config);
  const std::size_t n_enc = static_cast<std::size_t>(encoder_prompt_length(spec));
  const std::size_t n_dec = static_cast<std::size_t>(decoder_prompt_length(spec));

  ParamAccount acc;
  std::size_t adapter_total = 0;
  auto put = [&](const std::string& key, std::size_t n) {
    acc.components[key] = n;
    adapter_total += n;
  };
  if (m.encoder_prompts || m.decoder_prompts) put("prompts", (n_enc + n_dec) * e);
  if (m.deep) {
    std::size_t blocks = 0;
    if (m.encoder_prompts) blocks += static_cast<std::size_t>(config.n_enc_blocks);
    if (m.decoder_prompts) blocks += static_cast<std::size_t>(config.n_dec_blocks);
    put("deep", blocks * static_cast<std::size_t>(spec.n_deep) * e);
  }
  if (m.respt) {
    const auto b = static_cast<std::size_t>(respt_width(spec, config));
    put("respt_mlp", 2 * e * b + b + e);
  }
  if (m.lpt) {
    const auto h = static_cast<std::size_t>(spec.lpt_hidden);
    put("lpt_encoder", 2 * e * h + h + e);
  }
  if (m.lora) {
    const std::size_t sites =
        static_cast<std::size_t>(config.n_enc_blocks) + 2 * static_cast<std::size_t>(config.n_dec_blocks);
    put("lora", sites * spec.lora_targets.size() * static_cast<std::size_t>(spec.lora_rank) * 2 * e);
  }
  if (m.base_trainable) acc.components["base"] = base;
  finish(acc, base + adapter_total);
  return acc;
}

ParamAccount layout_account(const ModelConfig& config, const AdapterSpec& spec) {
  const Mechanisms m = resolve_mechanisms(spec);
  ParamAccount acc;
  std::size_t everything = 0;
  for (const auto& p : model_parameter_layout(config)) {
    everything += p.numel();
    if (m.base_trainable) acc.components["base"] += p.numel();
  }
  for (const auto& p : adapter_parameter_layout(config, spec)) {
    everything += p.numel();
    acc.components[account_component(p.name)] += p.numel();
  }
  finish(acc, everything);
  return acc;
}

ParamAccount count_params(const AttachedAdapter& attached) {
  ParamAccount acc;
  std::size_t everything = 0;
  auto visit = [&](const ParameterStore& store) {
    for (const auto& p : store) {
      everything += p.numel();
      if (p.trainable) acc.components[account_component(p.name)] += p.numel();
    }
  };
  visit(attached.model().parameters());
  visit(attached.bank());
  finish(acc, everything);
  return acc;
}

// ---------------------------------------------------------------------------

Var overwrite_rows(Var hidden, std::size_t offset, Var rows) {
  const std::size_t s = hidden.rows();
  const std::size_t k = rows.rows();
  if (offset + k > s) {
    throw ShapeError("overwrite_rows: rows [" + std::to_string(offset) + ", " +
                     std::to_string(offset + k) + ") exceed sequence of " + std::to_string(s));
  }
  std::vector<Var> parts;
  if (offset > 0) parts.push_back(slice_rows(hidden, 0, offset));
  parts.push_back(rows);
  if (offset + k < s) parts.push_back(slice_rows(hidden, offset + k, s));
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

Var residual_mlp(Var x, Var w1, Var b1, Var w2, Var b2) {
  Var h = gelu(add_row(matmul_nt(x, w1), b1));
  return add(x, add_row(matmul_nt(h, w2), b2));
}

Var lora_delta(Var x, Var a, Var b, double scale) {
  return promptlab::scale(matmul_nt(matmul_nt(x, a), b), scale);
}

AttachedAdapter::AttachedAdapter(Model model, AdapterSpec spec)
    : model_(std::move(model)), spec_(std::move(spec)), mech_(resolve_mechanisms(spec_)) {
  const auto layout = adapter_parameter_layout(model_.config(), spec_);
  std::mt19937_64 rng(spec_.seed ^ 0x5eed5eed5eedULL);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& p : layout) {
    Tensor t(p.shape, 0.0);
    if (p.init == ParamInit::Normal) {
      for (auto& v : t.values()) v = normal(rng);
    } else if (p.init == ParamInit::Ones) {
      t.fill(1.0);
    }
    bank_.add(p.name, std::move(t), true);
  }
  model_.parameters().set_trainable(mech_.base_trainable);

  auto h = [this](const std::string& name) { return bank_.handle_of(name); };
  auto mlp = [&](const std::string& prefix) {
    return MlpHandles{h(prefix + ".fc1.weight"), h(prefix + ".fc1.bias"), h(prefix + ".fc2.weight"),
                      h(prefix + ".fc2.bias")};
  };
  if (mech_.encoder_prompts) p_enc_ = h("prompt.encoder");
  if (mech_.decoder_prompts) p_dec_ = h("prompt.decoder");
  if (mech_.deep && spec_.n_deep > 0) {
    if (mech_.encoder_prompts) {
      for (int i = 0; i < model_.config().n_enc_blocks; ++i) deep_enc_.push_back(h(deep_name(Side::Encoder, i)));
    }
    if (mech_.decoder_prompts) {
      for (int i = 0; i < model_.config().n_dec_blocks; ++i) deep_dec_.push_back(h(deep_name(Side::Decoder, i)));
    }
  }
  if (mech_.respt) respt_ = mlp("respt");
  if (mech_.lpt) lang_encoder_ = mlp("lpt");
  if (mech_.lora) {
    lora_scale_ = spec_.lora_alpha / static_cast<double>(spec_.lora_rank);
    for (const auto& site : attention_sites(model_.config())) {
      for (Projection p : spec_.lora_targets) {
        ProjectionSite s = site;
        s.proj = p;
        lora_[lora_parameter_name(s, 'A')] = {h(lora_parameter_name(s, 'A')), h(lora_parameter_name(s, 'B'))};
      }
    }
  }
}

std::vector<Parameter*> AttachedAdapter::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto* p : all_parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

std::vector<Parameter*> AttachedAdapter::all_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : model_.parameters()) out.push_back(&p);
  for (auto& p : bank_) out.push_back(&p);
  return out;
}

Var AttachedAdapter::respt_reparam(Graph& g, Var prompts) {
  if (!respt_) throw std::logic_error("respt_reparam: ResPT is not enabled for this adapter");
  return residual_mlp(prompts, g.param(bank_[respt_->w1]), g.param(bank_[respt_->b1]),
                      g.param(bank_[respt_->w2]), g.param(bank_[respt_->b2]));
}

Var AttachedAdapter::prompt_matrix(Graph& g, ParameterStore::Handle h) {
  Var p = g.param(bank_[h]);
  return respt_ ? respt_reparam(g, p) : p;
}

std::size_t AttachedAdapter::lpt_rows() const { return lang_encoder_ ? spec_.lpt_languages.size() : 0; }

Var AttachedAdapter::lpt_prompts(Graph& g) {
  if (!lang_encoder_) throw std::logic_error("lpt_prompts: LPT is not enabled for this adapter");
  std::vector<int> ids;
  for (const auto& lang : spec_.lpt_languages) ids.push_back(model_.tokens().lid_for(lang));
  Var lid_rows = embedding(g.param(model_.token_embedding()), ids);
  return residual_mlp(lid_rows, g.param(bank_[lang_encoder_->w1]), g.param(bank_[lang_encoder_->b1]),
                      g.param(bank_[lang_encoder_->w2]), g.param(bank_[lang_encoder_->b2]));
}

std::optional<Var> AttachedAdapter::encoder_prompts(Graph& g) {
  std::vector<Var> parts;
  if (lang_encoder_) parts.push_back(lpt_prompts(g));
  if (p_enc_) parts.push_back(prompt_matrix(g, *p_enc_));
  if (parts.empty()) return std::nullopt;
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

std::optional<Var> AttachedAdapter::decoder_prompts(Graph& g) {
  if (!p_dec_) return std::nullopt;
  return prompt_matrix(g, *p_dec_);
}

Var AttachedAdapter::block_output(Graph& g, Side side, int block, Var hidden) {
  const auto& deep = side == Side::Encoder ? deep_enc_ : deep_dec_;
  if (deep.empty()) return hidden;
  const std::size_t offset = side == Side::Encoder ? lpt_rows() : 0;
  return overwrite_rows(hidden, offset, prompt_matrix(g, deep[static_cast<std::size_t>(block)]));
}

std::optional<Var> AttachedAdapter::projection_delta(Graph& g, const ProjectionSite& site, Var input) {
  if (lora_.empty()) return std::nullopt;
  auto it = lora_.find(lora_parameter_name(site, 'A'));
  if (it == lora_.end()) return std::nullopt;
  return lora_delta(input, g.param(bank_[it->second.a]), g.param(bank_[it->second.b]), lora_scale_);
}

Var AttachedAdapter::forward_logits(Graph& g, const Tensor& features, const std::string& language,
                                    std::span<const int> y) {
  return model_.forward_logits(g, features, language, y, this);
}

std::vector<int> AttachedAdapter::transcribe(const Tensor& features, const std::string& language,
                                             std::size_t max_new_tokens) {
  return greedy_decode(model_, features, language, max_new_tokens, this);
}

AttachedAdapter attach(Model model, const AdapterSpec& spec) { return AttachedAdapter(std::move(model), spec); }

AttachedAdapter compose_spt4asr(Model model, const AdapterSpec& spec) {
  if (spec.method != Method::SPT4ASR) reject("compose_spt4asr requires method SPT4ASR");
  if (spec.position != PromptPosition::Entire) {
    reject("SPT4ASR composes vanilla prompts on the Entire position");
  }
  return attach(std::move(model), spec);
}

Model detach(AttachedAdapter attached) {
  if (attached.mechanisms().base_trainable) {
    throw std::invalid_argument(std::string("detach: ") + to_string(attached.spec().method) +
                                " trained the base parameters; there is no untouched base to return");
  }
  Model base = std::move(attached.model());
  base.parameters().set_trainable(true);
  return base;
}

}  // namespace promptlab
