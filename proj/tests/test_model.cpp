#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptlab/grad_check.hpp"
#include "promptlab/model.hpp"

using namespace promptlab;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_blocks = 1;
  c.n_dec_blocks = 1;
  c.ffn_mult = 2;
  c.d_feat = 8;
  c.max_source_positions = 40;
  c.max_target_positions = 24;
  c.seed = 3;
  return c;
}

Tensor features(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t = Tensor::matrix(rows, cols);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

/// Prepends fixed rows to the encoder and decoder inputs.
struct FixedPrompts : ForwardAdapter {
  Tensor enc, dec;
  std::optional<Var> encoder_prompts(Graph& g) override {
    return enc.numel() ? std::optional<Var>(g.constant(enc)) : std::nullopt;
  }
  std::optional<Var> decoder_prompts(Graph& g) override {
    return dec.numel() ? std::optional<Var>(g.constant(dec)) : std::nullopt;
  }
};

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelConfig, RejectsVocabWithoutRoomForSpecials) {
  ModelConfig c = tiny();
  c.vocab_size = 9;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Tokens, SpecialsOccupyTheTail) {
  const auto t = SpecialTokenMap::standard(64, {"A", "B", "C"});
  EXPECT_EQ(t.sot, 56);
  EXPECT_EQ(t.eot, 57);
  EXPECT_EQ(t.transcribe, 58);
  EXPECT_EQ(t.no_timestamps, 59);
  EXPECT_EQ(t.prev, 60);
  EXPECT_EQ(t.lid_for("A"), 61);
  EXPECT_EQ(t.lid_for("C"), 63);
  EXPECT_EQ(t.first_special, 56);
  EXPECT_THROW(t.lid_for("Z"), std::invalid_argument);
  const auto prefix = build_decoder_prefix("B", t);
  EXPECT_EQ(prefix, (std::array<int, 4>{56, 62, 58, 59}));
}

TEST(ModelLayout, WhisperSmallBaseCountFromDimensions) {
  // Affine frontend, learned positions, 4 projections per attention with
  // biases on q, v, o only, GELU MLP, two norms per encoder block and three
  // per decoder block, final norms, tied output embedding.
  const std::size_t e = 768, f = 3072, V = 51865, S = 1500, T = 448, d = 80;
  const std::size_t attn = 4 * e * e + 3 * e;
  const std::size_t mlp = e * f + f + f * e + e;
  const std::size_t enc_block = attn + mlp + 2 * 2 * e;
  const std::size_t dec_block = 2 * attn + mlp + 3 * 2 * e;
  const std::size_t want = d * e + e + S * e + 12 * enc_block + 2 * e + V * e + T * e + 12 * dec_block + 2 * e;
  std::size_t got = 0;
  for (const auto& p : model_parameter_layout(ModelConfig::whisper_small())) got += p.numel();
  EXPECT_EQ(got, want);
}

TEST(ModelLayout, BuiltModelMatchesLayout) {
  const auto layout = model_parameter_layout(tiny());
  Model m = build_model(tiny());
  ASSERT_EQ(m.parameters().size(), layout.size());
  std::size_t i = 0;
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.name, layout[i].name);
    EXPECT_EQ(p.value.shape(), layout[i].shape);
    ++i;
  }
}

TEST(ModelLayout, OutputProjectionIsTiedToEmbedding) {
  for (const auto& p : model_parameter_layout(tiny())) {
    EXPECT_EQ(p.name.find("output"), std::string::npos) << p.name;
  }
  Model m = build_model(tiny());
  Graph g(false);
  const std::vector<int> y{1, 2};
  Tensor x = features(6, 8, 1);
  const Tensor before = m.forward_logits(g, x, "A", y).value();
  // Perturbing an embedding row not used as input changes only that logit column.
  m.token_embedding().value.at(30, 0) += 0.5;
  Graph h(false);
  const Tensor after = m.forward_logits(h, x, "A", y).value();
  for (std::size_t r = 0; r < before.rows(); ++r) {
    for (std::size_t c = 0; c < before.cols(); ++c) {
      if (c == 30) {
        EXPECT_NE(before.at(r, c), after.at(r, c));
      } else {
        EXPECT_EQ(before.at(r, c), after.at(r, c));
      }
    }
  }
}

TEST(Model, SeededBuildIsBitIdentical) {
  Model a = build_model(tiny());
  Model b = build_model(tiny());
  ModelConfig other = tiny();
  other.seed = 4;
  Model c = build_model(other);
  auto ia = a.parameters().begin();
  auto ic = c.parameters().begin();
  bool any_diff = false;
  for (const auto& p : b.parameters()) {
    EXPECT_TRUE(bit_identical(p.value.data(), ia->value.data())) << p.name;
    any_diff |= !bit_identical(p.value.data(), ic->value.data());
    ++ia;
    ++ic;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, NormsInitializeToIdentity) {
  Model m = build_model(tiny());
  EXPECT_EQ(m.parameters().by_name("decoder.ln.gain").value[0], 1.0);
  EXPECT_EQ(m.parameters().by_name("decoder.ln.bias").value[0], 0.0);
}

TEST(ModelShapes, EncoderMemoryRowsArePromptsPlusFrames) {
  Model m = build_model(tiny());
  Graph g(false);
  Var prompts = g.constant(Tensor::matrix(5, 16, 0.1));
  EXPECT_EQ(m.encode(g, features(12, 8, 2), prompts).rows(), 17u);
  EXPECT_EQ(m.encode(g, features(12, 8, 2), std::nullopt).rows(), 12u);
}

TEST(ModelShapes, DecoderInputRowsArePromptsPrefixAndTargets) {
  Model m = build_model(tiny());
  Graph g(false);
  const auto prefix = build_decoder_prefix("A", m.tokens());
  const std::vector<int> y{3, 4, 5};
  Var in = m.decoder_input(g, g.constant(Tensor::matrix(6, 16)), prefix, y);
  EXPECT_EQ(in.rows(), 6u + 4u + 3u);
  EXPECT_EQ(in.cols(), 16u);
}

TEST(ModelShapes, DecoderContextLimit) {
  Model m = build_model(tiny());
  Graph g(false);
  const auto prefix = build_decoder_prefix("A", m.tokens());
  const std::vector<int> y(10, 1);
  // 11 prompts + 4 prefix + 10 targets = 25 > 24.
  try {
    m.decoder_input(g, g.constant(Tensor::matrix(11, 16)), prefix, y);
    FAIL() << "expected ContextLimitError";
  } catch (const ContextLimitError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("decoder context limit", 0), 0u) << e.what();
  }
  EXPECT_NO_THROW(m.decoder_input(g, g.constant(Tensor::matrix(10, 16)), prefix, y));
}

TEST(ModelShapes, EncoderContextLimit) {
  Model m = build_model(tiny());
  Graph g(false);
  try {
    m.encode(g, features(36, 8, 3), g.constant(Tensor::matrix(5, 16)));
    FAIL() << "expected ContextLimitError";
  } catch (const ContextLimitError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("encoder context limit", 0), 0u) << e.what();
  }
}

TEST(ModelShapes, FeatureWidthMismatchRejected) {
  Model m = build_model(tiny());
  Graph g(false);
  EXPECT_THROW(m.encode(g, features(4, 7, 3), std::nullopt), ShapeError);
}

TEST(DecoderTargets, LastPrefixRowPredictsFirstToken) {
  const std::vector<int> y{7, 8, 9};
  const auto t = decoder_targets(2, y, 57);
  ASSERT_EQ(t.targets.size(), 2u + 4u + 3u);
  const std::vector<unsigned char> mask{0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(t.mask, mask);
  EXPECT_EQ(t.targets[5], 7);
  EXPECT_EQ(t.targets[6], 8);
  EXPECT_EQ(t.targets[7], 9);
  EXPECT_EQ(t.targets[8], 57);
}

TEST(Model, UtteranceNllCountsTargetsPlusEot) {
  Model m = build_model(tiny());
  Graph g(false);
  const std::vector<int> y{1, 2, 3};
  Tensor x = features(6, 8, 4);
  auto [nll, count] = m.utterance_nll(g, x, "B", y);
  EXPECT_EQ(count, 4u);
  // Oracle: sum of per-row NLL from the logits.
  const Tensor logits = m.forward_logits(g, x, "B", y).value();
  const auto t = decoder_targets(0, y, m.tokens().eot);
  double want = 0;
  for (std::size_t r = 0; r < t.mask.size(); ++r) {
    if (!t.mask[r]) continue;
    double mx = -1e300, z = 0;
    for (double v : logits.row(r)) mx = std::max(mx, v);
    for (double v : logits.row(r)) z += std::exp(v - mx);
    want += -(logits.at(r, static_cast<std::size_t>(t.targets[r])) - mx - std::log(z));
  }
  EXPECT_NEAR(nll.value()[0], want, 1e-10);
}

TEST(Model, UntrainedLossIsNearLogVocab) {
  Model m = build_model(ModelConfig::toy());
  Graph g(false);
  const std::vector<int> y{1, 20, 40, 2};
  auto [nll, count] = m.utterance_nll(g, features(8, 16, 5), "A", y);
  EXPECT_NEAR(nll.value()[0] / static_cast<double>(count), std::log(64.0), 0.5);
}

TEST(Model, PromptRowsShiftNothingInPositions) {
  // Zero prompts still change the computation (they are attended to) but the
  // token rows keep positions starting at zero: the decoder input rows after
  // the prompts equal the unprompted decoder input.
  Model m = build_model(tiny());
  Graph g(false);
  const auto prefix = build_decoder_prefix("A", m.tokens());
  const std::vector<int> y{3, 4};
  const Tensor plain = m.decoder_input(g, std::nullopt, prefix, y).value();
  const Tensor prompted = m.decoder_input(g, g.constant(Tensor::matrix(3, 16, 0.7)), prefix, y).value();
  for (std::size_t r = 0; r < plain.rows(); ++r) {
    EXPECT_TRUE(bit_identical(plain.row(r), prompted.row(r + 3))) << r;
  }
}

TEST(Model, GradientsMatchFiniteDifferences) {
  Model m = build_model(tiny());
  std::vector<Parameter*> ps;
  for (auto& p : m.parameters()) ps.push_back(&p);
  // Spread the weights so that gradients are not vanishingly small.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto* p : ps) {
    if (p->name.find(".gain") == std::string::npos) {
      for (auto& v : p->value.values()) v = n(rng);
    }
  }
  Tensor x = features(6, 8, 6);
  const std::vector<int> y{2, 9, 4};
  const auto r = finite_diff_check(
      [&](Graph& g) { return scale(m.utterance_nll(g, x, "C", y).first, 0.25); }, ps, 1e-5, 1, 24);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "] analytic "
                                        << r.analytic << " numeric " << r.numeric;
}

TEST(GreedyDecode, TiesPickLowestTokenAndRespectBudget) {
  Model m = build_model(tiny());
  for (auto& p : m.parameters()) p.value.fill(0.0);
  // All-zero weights give all-zero logits: argmax ties resolve to token 0.
  const auto out = greedy_decode(m, features(4, 8, 7), "A", 3);
  EXPECT_EQ(out, (std::vector<int>{0, 0, 0}));
  EXPECT_THROW(greedy_decode(m, features(4, 8, 7), "A", 0), std::invalid_argument);
}

TEST(GreedyDecode, StopsAtEotAndStripsSpecials) {
  Model m = build_model(tiny());
  for (auto& p : m.parameters()) p.value.fill(0.0);
  // Bias the final norm so the decoder state aligns with the EOT embedding.
  auto& E = m.token_embedding().value;
  E.at(static_cast<std::size_t>(m.tokens().eot), 0) = 1.0;
  m.parameters().by_name("decoder.ln.bias").value[0] = 1.0;
  EXPECT_TRUE(greedy_decode(m, features(4, 8, 8), "A", 5).empty());
}

TEST(GreedyDecode, DecoderPromptsReduceTheBudget) {
  Model m = build_model(tiny());
  for (auto& p : m.parameters()) p.value.fill(0.0);
  FixedPrompts prompts;
  prompts.dec = Tensor::matrix(18, 16);
  // 18 prompts + 4 prefix + 2 fed-back tokens fill the 24 rows; the third
  // token is read off the last row and never fed back.
  EXPECT_EQ(greedy_decode(m, features(4, 8, 9), "A", 10, &prompts).size(), 3u);
}
