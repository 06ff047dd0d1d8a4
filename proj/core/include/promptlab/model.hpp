#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptlab/autodiff.hpp"
#include "promptlab/parameter.hpp"
#include "promptlab/tokens.hpp"

namespace promptlab {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_blocks = 2;
  int n_dec_blocks = 2;
  int ffn_mult = 4;
  int vocab_size = 64;
  int d_feat = 16;
  int max_source_positions = 512;
  int max_target_positions = 384;
  std::uint64_t seed = 0;
  std::vector<std::string> languages = {"A", "B", "C"};

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  int ffn_width() const { return ffn_mult * d_model; }
  int head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  /// Desk-scale default.
  static ModelConfig toy();
  /// Dimension presets for parameter accounting only; never instantiated.
  static ModelConfig whisper_small();
  static ModelConfig whisper_medium();
};

enum class ParamInit { Normal, Zeros, Ones };

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  ParamInit init = ParamInit::Normal;
  std::size_t numel() const;
};

/// The model's parameter layout in construction order. Pure function of the
/// config; build_model allocates exactly this list.
std::vector<ParamSpec> model_parameter_layout(const ModelConfig& config);

inline constexpr double kInitStd = 0.02;

enum class Side { Encoder, Decoder };
enum class AttentionKind { Self, Cross };
enum class Projection { Q, K, V, O };

struct ProjectionSite {
  Side side = Side::Encoder;
  int block = 0;
  AttentionKind kind = AttentionKind::Self;
  Projection proj = Projection::Q;
};

const char* to_string(Side side);
const char* to_string(Projection proj);

/// Extension points an adapter plugs into the forward pass. The defaults
/// leave the base architecture untouched. Methods are non-const because they
/// bind the adapter's parameters onto the graph for gradient accumulation.
class ForwardAdapter {
 public:
  virtual ~ForwardAdapter() = default;
  /// Rows placed ahead of the projected features in the encoder input.
  virtual std::optional<Var> encoder_prompts(Graph&) { return std::nullopt; }
  /// Rows placed ahead of the decoder task prefix.
  virtual std::optional<Var> decoder_prompts(Graph&) { return std::nullopt; }
  /// Applied to the output of every transformer block.
  virtual Var block_output(Graph&, Side, int /*block*/, Var hidden) { return hidden; }
  /// Additive term for an attention projection, given the projection input.
  virtual std::optional<Var> projection_delta(Graph&, const ProjectionSite&, Var /*input*/) {
    return std::nullopt;
  }
};

class ContextLimitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row indices, targets and loss mask for one decoder pass.
struct DecoderTargets {
  std::vector<int> targets;
  std::vector<unsigned char> mask;
};

/// Loss layout for a decoder input [prompts (n); prefix (4); y (T)]: the row
/// holding the last prefix token predicts y_1, row of y_t predicts y_{t+1},
/// the row of y_T predicts EOT. Every other row is masked out.
DecoderTargets decoder_targets(std::size_t n_prompts, std::span<const int> y, int eot);

/// Whisper-shaped encoder-decoder. Pre-norm blocks, affine feature frontend,
/// learned positional embeddings on feature and token rows only, output
/// projection tied to the token embedding.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const SpecialTokenMap& tokens() const { return tokens_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  Parameter& token_embedding() { return params_[token_embedding_]; }
  const Parameter& token_embedding() const { return params_[token_embedding_]; }

  /// Encoder memory with prompt rows first: (n + l) x e, or l x e without
  /// prompts. Prompt rows get no positional embedding.
  Var encode(Graph& g, const Tensor& features, std::optional<Var> prompts,
             ForwardAdapter* adapter = nullptr);

  /// Encoder input rows [prompts; frontend(features) + positions].
  Var encoder_input(Graph& g, const Tensor& features, std::optional<Var> prompts);

  /// Decoder input rows [prompts; embed(prefix ++ y) + positions]. Throws
  /// ContextLimitError("decoder context limit ...") when the row count
  /// exceeds max_target_positions.
  Var decoder_input(Graph& g, std::optional<Var> prompts, std::span<const int> prefix,
                    std::span<const int> y);

  /// Logits for decoder input [prompts; embed(prefix); embed(y)], one row per
  /// input row. Throws ContextLimitError("decoder context limit ...") when
  /// n + |prefix| + |y| exceeds max_target_positions.
  Var decode(Graph& g, Var memory, std::optional<Var> prompts, std::span<const int> prefix,
             std::span<const int> y, ForwardAdapter* adapter = nullptr);

  /// Full teacher-forced pass; uses the adapter's prompts when present.
  Var forward_logits(Graph& g, const Tensor& features, const std::string& language,
                     std::span<const int> y, ForwardAdapter* adapter = nullptr);

  /// Summed token NLL over the masked rows of one utterance, plus the count of
  /// masked rows. Callers divide by the total count across a batch.
  std::pair<Var, std::size_t> utterance_nll(Graph& g, const Tensor& features,
                                            const std::string& language, std::span<const int> y,
                                            ForwardAdapter* adapter = nullptr);

 private:
  struct Linear {
    ParameterStore::Handle weight = 0;
    std::optional<ParameterStore::Handle> bias;
  };
  struct Norm {
    ParameterStore::Handle gain = 0;
    ParameterStore::Handle bias = 0;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct Mlp {
    Linear fc1, fc2;
  };
  struct EncoderBlock {
    Norm attn_ln;
    Attention attn;
    Norm mlp_ln;
    Mlp mlp;
  };
  struct DecoderBlock {
    Norm attn_ln;
    Attention attn;
    Norm cross_ln;
    Attention cross;
    Norm mlp_ln;
    Mlp mlp;
  };

  Var linear(Graph& g, const Linear& l, Var x);
  Var norm(Graph& g, const Norm& n, Var x);
  Var mlp(Graph& g, const Mlp& m, Var x);
  Var attention(Graph& g, const Attention& a, Var query_in, Var kv_in, bool causal,
                ProjectionSite site, ForwardAdapter* adapter);
  Var projection(Graph& g, const Linear& l, Var x, ProjectionSite site, Projection proj,
                 ForwardAdapter* adapter);

  ModelConfig config_;
  SpecialTokenMap tokens_;
  ParameterStore params_;

  Linear frontend_;
  ParameterStore::Handle enc_pos_ = 0;
  std::vector<EncoderBlock> enc_blocks_;
  Norm enc_ln_post_;
  ParameterStore::Handle token_embedding_ = 0;
  ParameterStore::Handle dec_pos_ = 0;
  std::vector<DecoderBlock> dec_blocks_;
  Norm dec_ln_;
};

/// Seeded construction; same config and seed give bit-identical parameters.
Model build_model(const ModelConfig& config);

/// Greedy transcription: appends the argmax token (lowest id on ties) until
/// EOT or `max_new_tokens`, then returns the text tokens only.
std::vector<int> greedy_decode(Model& model, const Tensor& features, const std::string& language,
                               std::size_t max_new_tokens, ForwardAdapter* adapter = nullptr);

}  // namespace promptlab
