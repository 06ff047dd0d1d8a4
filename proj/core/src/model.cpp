#include "promptlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>

namespace promptlab {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("invalid model config: " + what);
}

std::string enc_block(int i) { return "encoder.block" + std::to_string(i); }
std::string dec_block(int i) { return "decoder.block" + std::to_string(i); }

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t e) {
  out.push_back({prefix + ".gain", {e}, ParamInit::Ones});
  out.push_back({prefix + ".bias", {e}, ParamInit::Zeros});
}

void add_attention(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t e) {
  out.push_back({prefix + ".q_proj.weight", {e, e}});
  out.push_back({prefix + ".q_proj.bias", {e}});
  // Key projection carries no bias, as in Whisper.
  out.push_back({prefix + ".k_proj.weight", {e, e}});
  out.push_back({prefix + ".v_proj.weight", {e, e}});
  out.push_back({prefix + ".v_proj.bias", {e}});
  out.push_back({prefix + ".o_proj.weight", {e, e}});
  out.push_back({prefix + ".o_proj.bias", {e}});
}

void add_mlp(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t e, std::size_t f) {
  out.push_back({prefix + ".fc1.weight", {f, e}});
  out.push_back({prefix + ".fc1.bias", {f}});
  out.push_back({prefix + ".fc2.weight", {e, f}});
  out.push_back({prefix + ".fc2.bias", {e}});
}

}  // namespace

void ModelConfig::validate() const {
  require(d_model >= 1 && n_heads >= 1 && n_enc_blocks >= 1 && n_dec_blocks >= 1 && ffn_mult >= 1 &&
              vocab_size >= 1 && d_feat >= 1 && max_source_positions >= 1 &&
              max_target_positions >= 1,
          "all dimensions must be >= 1");
  require(d_model % n_heads == 0, "d_model " + std::to_string(d_model) +
                                      " is not divisible by n_heads " + std::to_string(n_heads));
  const int specials = SpecialTokenMap::kControlTokens + static_cast<int>(languages.size());
  require(!languages.empty(), "at least one language is required");
  require(vocab_size >= specials + 2, "vocab_size " + std::to_string(vocab_size) +
                                          " must hold " + std::to_string(specials) +
                                          " special tokens and at least 2 text tokens");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::whisper_small() {
  ModelConfig c;
  c.d_model = 768;
  c.n_heads = 12;
  c.n_enc_blocks = 12;
  c.n_dec_blocks = 12;
  c.ffn_mult = 4;
  c.vocab_size = 51865;
  c.d_feat = 80;
  c.max_source_positions = 1500;
  c.max_target_positions = 448;
  return c;
}

ModelConfig ModelConfig::whisper_medium() {
  ModelConfig c = whisper_small();
  c.d_model = 1024;
  c.n_heads = 16;
  c.n_enc_blocks = 24;
  c.n_dec_blocks = 24;
  return c;
}

std::size_t ParamSpec::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<ParamSpec> model_parameter_layout(const ModelConfig& config) {
  config.validate();
  const auto e = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.ffn_width());
  std::vector<ParamSpec> out;
  out.push_back({"encoder.frontend.weight", {e, static_cast<std::size_t>(config.d_feat)}});
  out.push_back({"encoder.frontend.bias", {e}});
  out.push_back({"encoder.positional", {static_cast<std::size_t>(config.max_source_positions), e}});
  for (int i = 0; i < config.n_enc_blocks; ++i) {
    add_norm(out, enc_block(i) + ".attn_ln", e);
    add_attention(out, enc_block(i) + ".attn", e);
    add_norm(out, enc_block(i) + ".mlp_ln", e);
    add_mlp(out, enc_block(i) + ".mlp", e, f);
  }
  add_norm(out, "encoder.ln_post", e);
  out.push_back({"decoder.token_embedding", {static_cast<std::size_t>(config.vocab_size), e}});
  out.push_back({"decoder.positional", {static_cast<std::size_t>(config.max_target_positions), e}});
  for (int i = 0; i < config.n_dec_blocks; ++i) {
    add_norm(out, dec_block(i) + ".attn_ln", e);
    add_attention(out, dec_block(i) + ".attn", e);
    add_norm(out, dec_block(i) + ".cross_ln", e);
    add_attention(out, dec_block(i) + ".cross_attn", e);
    add_norm(out, dec_block(i) + ".mlp_ln", e);
    add_mlp(out, dec_block(i) + ".mlp", e, f);
  }
  add_norm(out, "decoder.ln", e);
  return out;
}

const char* to_string(Side side) { return side == Side::Encoder ? "encoder" : "decoder"; }

const char* to_string(Projection proj) {
  switch (proj) {
    case Projection::Q: return "q";
    case Projection::K: return "k";
    case Projection::V: return "v";
    case Projection::O: return "o";
  }
  return "?";
}

DecoderTargets decoder_targets(std::size_t n_prompts, std::span<const int> y, int eot) {
  const std::size_t rows = n_prompts + kDecoderPrefixLength + y.size();
  DecoderTargets t;
  t.targets.assign(rows, 0);
  t.mask.assign(rows, 0);
  const std::size_t first = n_prompts + kDecoderPrefixLength - 1;
  for (std::size_t i = 0; i <= y.size(); ++i) {
    t.targets[first + i] = i < y.size() ? y[i] : eot;
    t.mask[first + i] = 1;
  }
  return t;
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) {
  const auto layout = model_parameter_layout(config_);
  tokens_ = SpecialTokenMap::standard(config_.vocab_size, config_.languages);

  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (const auto& spec : layout) {
    Tensor t(spec.shape, 0.0);
    switch (spec.init) {
      case ParamInit::Normal:
        for (auto& v : t.values()) v = normal(rng);
        break;
      case ParamInit::Ones: t.fill(1.0); break;
      case ParamInit::Zeros: break;
    }
    params_.add(spec.name, std::move(t));
  }

  auto h = [this](const std::string& name) { return params_.handle_of(name); };
  auto lin = [&](const std::string& prefix, bool bias) {
    Linear l;
    l.weight = h(prefix + ".weight");
    if (bias) l.bias = h(prefix + ".bias");
    return l;
  };
  auto nrm = [&](const std::string& prefix) { return Norm{h(prefix + ".gain"), h(prefix + ".bias")}; };
  auto att = [&](const std::string& prefix) {
    return Attention{lin(prefix + ".q_proj", true), lin(prefix + ".k_proj", false),
                     lin(prefix + ".v_proj", true), lin(prefix + ".o_proj", true)};
  };
  auto ffn = [&](const std::string& prefix) {
    return Mlp{lin(prefix + ".fc1", true), lin(prefix + ".fc2", true)};
  };

  frontend_ = lin("encoder.frontend", true);
  enc_pos_ = h("encoder.positional");
  for (int i = 0; i < config_.n_enc_blocks; ++i) {
    const auto p = enc_block(i);
    enc_blocks_.push_back({nrm(p + ".attn_ln"), att(p + ".attn"), nrm(p + ".mlp_ln"), ffn(p + ".mlp")});
  }
  enc_ln_post_ = nrm("encoder.ln_post");
  token_embedding_ = h("decoder.token_embedding");
  dec_pos_ = h("decoder.positional");
  for (int i = 0; i < config_.n_dec_blocks; ++i) {
    const auto p = dec_block(i);
    dec_blocks_.push_back({nrm(p + ".attn_ln"), att(p + ".attn"), nrm(p + ".cross_ln"),
                           att(p + ".cross_attn"), nrm(p + ".mlp_ln"), ffn(p + ".mlp")});
  }
  dec_ln_ = nrm("decoder.ln");
}

Model build_model(const ModelConfig& config) { return Model(config); }

Var Model::linear(Graph& g, const Linear& l, Var x) {
  Var y = matmul_nt(x, g.param(params_[l.weight]));
  if (l.bias) y = add_row(y, g.param(params_[*l.bias]));
  return y;
}

Var Model::norm(Graph& g, const Norm& n, Var x) {
  return layer_norm(x, g.param(params_[n.gain]), g.param(params_[n.bias]));
}

Var Model::mlp(Graph& g, const Mlp& m, Var x) { return linear(g, m.fc2, gelu(linear(g, m.fc1, x))); }

Var Model::projection(Graph& g, const Linear& l, Var x, ProjectionSite site, Projection proj,
                      ForwardAdapter* adapter) {
  Var y = linear(g, l, x);
  if (adapter != nullptr) {
    site.proj = proj;
    if (auto delta = adapter->projection_delta(g, site, x)) y = add(y, *delta);
  }
  return y;
}

Var Model::attention(Graph& g, const Attention& a, Var query_in, Var kv_in, bool causal,
                     ProjectionSite site, ForwardAdapter* adapter) {
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const auto dh = static_cast<std::size_t>(config_.head_dim());
  Var q = projection(g, a.q, query_in, site, Projection::Q, adapter);
  Var k = projection(g, a.k, kv_in, site, Projection::K, adapter);
  Var v = projection(g, a.v, kv_in, site, Projection::V, adapter);
  q = scale(q, 1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = matmul_nt(qh, kh);
    if (causal) scores = causal_mask_add(scores);
    outs.push_back(matmul(softmax_rows(scores), vh));
  }
  Var merged = heads == 1 ? outs.front() : concat_cols(outs);
  return projection(g, a.o, merged, site, Projection::O, adapter);
}

Var Model::encoder_input(Graph& g, const Tensor& features, std::optional<Var> prompts) {
  const std::size_t l = features.rows();
  const auto limit = static_cast<std::size_t>(config_.max_source_positions);
  if (features.cols() != static_cast<std::size_t>(config_.d_feat)) {
    throw ShapeError("encode: features " + features.shape_string() + " but d_feat is " +
                     std::to_string(config_.d_feat));
  }
  const std::size_t n = prompts ? prompts->rows() : 0;
  if (l > limit || n + l > limit) {
    throw ContextLimitError("encoder context limit: " + std::to_string(n) + " prompt rows + " +
                            std::to_string(l) + " feature rows exceed max_source_positions " +
                            std::to_string(limit));
  }
  if (prompts && prompts->cols() != static_cast<std::size_t>(config_.d_model)) {
    throw ShapeError("encode: prompt width " + std::to_string(prompts->cols()) + " != d_model " +
                     std::to_string(config_.d_model));
  }
  Var x = linear(g, frontend_, g.constant(features));
  x = add(x, slice_rows(g.param(params_[enc_pos_]), 0, l));
  if (!prompts) return x;
  const Var parts[] = {*prompts, x};
  return concat_rows(parts);
}

Var Model::encode(Graph& g, const Tensor& features, std::optional<Var> prompts,
                  ForwardAdapter* adapter) {
  Var x = encoder_input(g, features, prompts);
  for (int i = 0; i < config_.n_enc_blocks; ++i) {
    const auto& b = enc_blocks_[static_cast<std::size_t>(i)];
    const ProjectionSite site{Side::Encoder, i, AttentionKind::Self, Projection::Q};
    Var h = norm(g, b.attn_ln, x);
    x = add(x, attention(g, b.attn, h, h, false, site, adapter));
    x = add(x, mlp(g, b.mlp, norm(g, b.mlp_ln, x)));
    if (adapter != nullptr) x = adapter->block_output(g, Side::Encoder, i, x);
  }
  return norm(g, enc_ln_post_, x);
}

Var Model::decoder_input(Graph& g, std::optional<Var> prompts, std::span<const int> prefix,
                         std::span<const int> y) {
  const std::size_t n = prompts ? prompts->rows() : 0;
  const std::size_t tokens = prefix.size() + y.size();
  const auto limit = static_cast<std::size_t>(config_.max_target_positions);
  if (tokens == 0) throw std::invalid_argument("decode: empty decoder input");
  if (n + tokens > limit) {
    throw ContextLimitError("decoder context limit: " + std::to_string(n) + " prompts + " +
                            std::to_string(tokens) + " tokens exceed max_target_positions " +
                            std::to_string(limit));
  }
  if (prompts && prompts->cols() != static_cast<std::size_t>(config_.d_model)) {
    throw ShapeError("decode: prompt width " + std::to_string(prompts->cols()) + " != d_model " +
                     std::to_string(config_.d_model));
  }
  std::vector<int> ids(prefix.begin(), prefix.end());
  ids.insert(ids.end(), y.begin(), y.end());
  Var x = add(embedding(g.param(params_[token_embedding_]), ids),
              slice_rows(g.param(params_[dec_pos_]), 0, tokens));
  if (!prompts) return x;
  const Var parts[] = {*prompts, x};
  return concat_rows(parts);
}

Var Model::decode(Graph& g, Var memory, std::optional<Var> prompts, std::span<const int> prefix,
                  std::span<const int> y, ForwardAdapter* adapter) {
  Var x = decoder_input(g, prompts, prefix, y);
  for (int i = 0; i < config_.n_dec_blocks; ++i) {
    const auto& b = dec_blocks_[static_cast<std::size_t>(i)];
    Var h = norm(g, b.attn_ln, x);
    x = add(x, attention(g, b.attn, h, h, true, {Side::Decoder, i, AttentionKind::Self}, adapter));
    h = norm(g, b.cross_ln, x);
    x = add(x, attention(g, b.cross, h, memory, false, {Side::Decoder, i, AttentionKind::Cross},
                         adapter));
    x = add(x, mlp(g, b.mlp, norm(g, b.mlp_ln, x)));
    if (adapter != nullptr) x = adapter->block_output(g, Side::Decoder, i, x);
  }
  return matmul_nt(norm(g, dec_ln_, x), g.param(params_[token_embedding_]));
}

Var Model::forward_logits(Graph& g, const Tensor& features, const std::string& language,
                          std::span<const int> y, ForwardAdapter* adapter) {
  const auto prefix = build_decoder_prefix(language, tokens_);
  std::optional<Var> enc_prompts = adapter ? adapter->encoder_prompts(g) : std::nullopt;
  std::optional<Var> dec_prompts = adapter ? adapter->decoder_prompts(g) : std::nullopt;
  Var memory = encode(g, features, enc_prompts, adapter);
  return decode(g, memory, dec_prompts, prefix, y, adapter);
}

std::pair<Var, std::size_t> Model::utterance_nll(Graph& g, const Tensor& features,
                                                 const std::string& language,
                                                 std::span<const int> y,
                                                 ForwardAdapter* adapter) {
  Var logits = forward_logits(g, features, language, y, adapter);
  const std::size_t n = logits.rows() - kDecoderPrefixLength - y.size();
  const auto t = decoder_targets(n, y, tokens_.eot);
  return {cross_entropy(logits, t.targets, t.mask, Reduction::Sum), y.size() + 1};
}

std::vector<int> greedy_decode(Model& model, const Tensor& features, const std::string& language,
                               std::size_t max_new_tokens, ForwardAdapter* adapter) {
  if (max_new_tokens == 0) throw std::invalid_argument("greedy_decode: max_new_tokens must be >= 1");
  const auto& tok = model.tokens();
  const auto prefix = build_decoder_prefix(language, tok);

  Graph g(false);
  std::optional<Var> enc_prompts = adapter ? adapter->encoder_prompts(g) : std::nullopt;
  std::optional<Var> dec_prompts = adapter ? adapter->decoder_prompts(g) : std::nullopt;
  Var memory = model.encode(g, features, enc_prompts, adapter);

  const std::size_t n_dec = dec_prompts ? dec_prompts->rows() : 0;
  const auto limit = static_cast<std::size_t>(model.config().max_target_positions);
  std::vector<int> generated;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    if (n_dec + prefix.size() + generated.size() > limit) break;
    Var logits = model.decode(g, memory, dec_prompts, prefix, generated, adapter);
    auto last = logits.value().row(logits.rows() - 1);
    // max_element returns the first maximum, i.e. the lowest token id.
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == tok.eot) break;
    generated.push_back(next);
  }
  std::vector<int> text;
  for (int t : generated) {
    if (!tok.is_special(t)) text.push_back(t);
  }
  return text;
}

}  // namespace promptlab
