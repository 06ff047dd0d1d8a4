#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "promptlab/autodiff.hpp"
#include "promptlab/grad_check.hpp"

using namespace promptlab;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

using OpBuilder = std::function<Var(Graph&, std::vector<Var>&)>;

/// Reduces op output against fixed random weights so every output element
/// carries a distinct upstream gradient, then compares every input
/// coordinate with an oracle central difference.
void expect_gradients(const OpBuilder& op, std::vector<Parameter>& inputs, double tol = 1e-6) {
  Tensor weights;
  auto loss_value = [&](Graph& g) {
    std::vector<Var> vars;
    for (auto& p : inputs) vars.push_back(g.param(p));
    Var out = op(g, vars);
    if (weights.numel() == 0) weights = random_tensor(out.value().shape(), 99);
    return sum(mul(out, g.constant(weights)));
  };
  for (auto& p : inputs) p.zero_grad();
  Graph g;
  Var loss = loss_value(g);
  g.backward(loss);

  for (auto& p : inputs) {
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double numeric = oracle::derivative(
          [&] {
            Graph h(false);
            return loss_value(h).value()[0];
          },
          p.value[i]);
      EXPECT_NEAR(p.grad[i], numeric, tol * std::max(1.0, std::abs(numeric)))
          << p.name << "[" << i << "]";
    }
  }
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t = Tensor::matrix(2, 3, 1.5);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.numel(), 6u);
  t.at(1, 2) = -4.0;
  EXPECT_EQ(t[5], -4.0);
  EXPECT_EQ(t.shape_string(), "[2x3]");
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, BitIdenticalDistinguishesSignedZero) {
  std::vector<double> a{0.0, 1.0};
  std::vector<double> b{-0.0, 1.0};
  EXPECT_FALSE(bit_identical(a, b));
  EXPECT_TRUE(bit_identical(a, a));
}

TEST(Autodiff, MatmulMatchesNaiveProduct) {
  Tensor a = random_tensor({3, 4}, 1);
  Tensor b = random_tensor({4, 5}, 2);
  Graph g(false);
  const Tensor got = matmul(g.constant(a), g.constant(b)).value();
  const Tensor want = oracle::matmul(a, b);
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Autodiff, MatmulRejectsMismatchedShapes) {
  Graph g;
  EXPECT_THROW(matmul(g.constant(Tensor::matrix(2, 3)), g.constant(Tensor::matrix(2, 3))), ShapeError);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Tensor x = random_tensor({4, 7}, 3, 5.0);
  const Tensor s = softmax_rows(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0;
    for (double v : s.row(r)) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Autodiff, LayerNormZeroMeanUnitVariance) {
  Graph g(false);
  Tensor x = random_tensor({3, 8}, 4, 3.0);
  Var y = layer_norm(g.constant(x), g.constant(Tensor({8}, 1.0)), g.constant(Tensor({8}, 0.0)));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (double v : y.value().row(r)) mean += v / 8;
    for (double v : y.value().row(r)) var += (v - mean) * (v - mean) / 8;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Autodiff, GeluReferencePoints) {
  EXPECT_DOUBLE_EQ(gelu(0.0), 0.0);
  const double x = 1.0;
  const double want = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
  EXPECT_NEAR(gelu(x), want, 1e-9);
}

TEST(Autodiff, CausalMaskHidesFutureKeys) {
  Graph g(false);
  Var s = causal_mask_add(g.constant(Tensor::matrix(3, 3)), 0);
  EXPECT_EQ(s.value().at(0, 0), 0.0);
  EXPECT_EQ(s.value().at(0, 1), kMaskedScore);
  EXPECT_EQ(s.value().at(2, 1), 0.0);
  Var shifted = causal_mask_add(g.constant(Tensor::matrix(2, 4)), 2);
  EXPECT_EQ(shifted.value().at(0, 2), 0.0);
  EXPECT_EQ(shifted.value().at(0, 3), kMaskedScore);
}

TEST(Autodiff, CrossEntropyUniformLogitsIsLogVocab) {
  Graph g(false);
  std::vector<int> targets{3, 7};
  std::vector<unsigned char> mask{1, 1};
  Var l = cross_entropy(g.constant(Tensor::matrix(2, 64)), targets, mask);
  EXPECT_NEAR(l.value()[0], std::log(64.0), 1e-12);
}

TEST(Autodiff, CrossEntropyRejectsEmptyMask) {
  Graph g;
  std::vector<int> targets{0};
  std::vector<unsigned char> mask{0};
  EXPECT_THROW(cross_entropy(g.constant(Tensor::matrix(1, 4)), targets, mask), std::invalid_argument);
}

TEST(AutodiffGrad, Matmul) {
  std::vector<Parameter> in{{"a", random_tensor({3, 4}, 5)}, {"b", random_tensor({4, 2}, 6)}};
  expect_gradients([](Graph&, std::vector<Var>& v) { return matmul(v[0], v[1]); }, in);
}

TEST(AutodiffGrad, MatmulNt) {
  std::vector<Parameter> in{{"a", random_tensor({3, 4}, 7)}, {"b", random_tensor({5, 4}, 8)}};
  expect_gradients([](Graph&, std::vector<Var>& v) { return matmul_nt(v[0], v[1]); }, in);
}

TEST(AutodiffGrad, AddRowMulScale) {
  std::vector<Parameter> in{{"a", random_tensor({3, 4}, 9)}, {"r", random_tensor({4}, 10)},
                            {"b", random_tensor({3, 4}, 11)}};
  expect_gradients(
      [](Graph&, std::vector<Var>& v) { return scale(mul(add_row(v[0], v[1]), add(v[2], v[0])), 0.7); }, in);
}

TEST(AutodiffGrad, SlicesAndConcats) {
  std::vector<Parameter> in{{"a", random_tensor({4, 6}, 12)}, {"b", random_tensor({2, 6}, 13)}};
  expect_gradients(
      [](Graph&, std::vector<Var>& v) {
        std::vector<Var> rows{slice_rows(v[0], 1, 3), v[1]};
        Var r = concat_rows(rows);
        std::vector<Var> cols{slice_cols(r, 4, 6), slice_cols(r, 0, 2)};
        return concat_cols(cols);
      },
      in);
}

TEST(AutodiffGrad, Embedding) {
  std::vector<Parameter> in{{"table", random_tensor({5, 3}, 14)}};
  expect_gradients(
      [](Graph&, std::vector<Var>& v) {
        std::vector<int> ids{4, 1, 4, 0};
        return embedding(v[0], ids);
      },
      in);
}

TEST(AutodiffGrad, LayerNorm) {
  std::vector<Parameter> in{{"x", random_tensor({3, 5}, 15)}, {"g", random_tensor({5}, 16)},
                            {"b", random_tensor({5}, 17)}};
  expect_gradients([](Graph&, std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); }, in, 1e-5);
}

TEST(AutodiffGrad, SoftmaxAndGelu) {
  std::vector<Parameter> in{{"x", random_tensor({3, 5}, 18)}};
  expect_gradients([](Graph&, std::vector<Var>& v) { return gelu(softmax_rows(v[0])); }, in);
}

TEST(AutodiffGrad, CausalMaskedAttentionScores) {
  std::vector<Parameter> in{{"x", random_tensor({4, 4}, 19)}};
  expect_gradients([](Graph&, std::vector<Var>& v) { return softmax_rows(causal_mask_add(v[0], 0)); }, in);
}

TEST(AutodiffGrad, CrossEntropyMatchesRowOracle) {
  Tensor logits = random_tensor({4, 6}, 20, 2.0);
  std::vector<int> targets{1, 5, 0, 2};
  std::vector<unsigned char> mask{1, 0, 1, 1};
  Graph g(false);
  const double got = cross_entropy(g.constant(logits), targets, mask).value()[0];
  double want = 0;
  for (std::size_t r : {0u, 2u, 3u}) want += oracle::row_nll(logits.row(r), targets[r]);
  EXPECT_NEAR(got, want / 3, 1e-12);

  std::vector<Parameter> in{{"logits", logits}};
  expect_gradients(
      [&](Graph&, std::vector<Var>& v) { return cross_entropy(v[0], targets, mask); },
      in);
}

TEST(AutodiffGrad, ReusedParameterAccumulates) {
  Parameter p("p", random_tensor({2, 2}, 21));
  Graph g;
  Var a = g.param(p);
  Var b = g.param(p);
  EXPECT_EQ(a.id, b.id);
  g.backward(sum(add(a, b)));
  for (double v : p.grad.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(AutodiffGrad, FrozenParameterReceivesNothing) {
  Parameter p("p", random_tensor({2, 2}, 22), false);
  Parameter q("q", random_tensor({2, 2}, 23));
  Graph g;
  g.backward(sum(mul(g.param(p), g.param(q))));
  for (double v : p.grad.data()) EXPECT_EQ(v, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(q.grad[i], p.value[i]);
}

TEST(AutodiffGrad, BackwardTwiceRejected) {
  Parameter p("p", random_tensor({2}, 24));
  Graph g;
  Var l = sum(g.param(p));
  g.backward(l);
  EXPECT_THROW(g.backward(l), std::logic_error);
}

TEST(AutodiffGrad, NonScalarLossRejected) {
  Parameter p("p", random_tensor({2, 2}, 25));
  Graph g;
  EXPECT_THROW(g.backward(g.param(p)), std::invalid_argument);
}

TEST(GradCheck, QuadraticHasExactGradient) {
  Parameter p("p", random_tensor({3, 3}, 26));
  std::vector<Parameter*> ps{&p};
  const auto r = finite_diff_check([&](Graph& g) { Var v = g.param(p); return sum(mul(v, v)); }, ps, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_EQ(r.coordinates_checked, 9u);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A custom op whose backward is deliberately off by a factor of two.
  Parameter p("p", random_tensor({2}, 27));
  std::vector<Parameter*> ps{&p};
  auto broken = [&](Graph& g) {
    Var x = g.param(p);
    Tensor y = x.value();
    Var out = g.record(y, std::vector<Var>{x}, [x](Graph& gr, std::size_t self) {
      Tensor& gx = gr.grad(x.id);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += 2.0 * gr.grad(self)[i];
    });
    return sum(out);
  };
  EXPECT_GT(finite_diff_check(broken, ps, 1e-5).max_relative_error, 0.3);
}

TEST(GradCheck, RejectsNonPositiveEps) {
  Parameter p("p", random_tensor({2}, 28));
  std::vector<Parameter*> ps{&p};
  EXPECT_THROW(finite_diff_check([&](Graph& g) { return sum(g.param(p)); }, ps, 0.0), std::invalid_argument);
}
