#include "promptlab/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace promptlab {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const MatR>;
using Map = Eigen::Map<MatR>;

MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
Map view(Tensor& t) { return Map(t.data().data(), t.rows(), t.cols()); }

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

Graph& graph_of(std::span<const Var> vars) {
  if (vars.empty() || vars.front().graph == nullptr) {
    throw std::invalid_argument("op applied to an unbound Var");
  }
  Graph* g = vars.front().graph;
  for (const auto& v : vars) {
    if (v.graph != g) throw std::invalid_argument("op mixes Vars from different graphs");
  }
  return *g;
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor t) {
  if (!t.all_finite()) throw std::invalid_argument("non-finite value in graph input " + t.shape_string());
  Node n;
  n.owned = std::move(t);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  if (!p.value.all_finite()) throw std::invalid_argument("non-finite value in parameter " + p.name);
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = p.trainable && record_gradients_;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](const Var& v) { return nodes_[v.id].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor(value(id).shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
  if (!value(loss.id).is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got " + value(loss.id).shape_string());
  }
  if (backward_done_) throw std::logic_error("backward: graph already consumed");
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.numel() == 0) continue;
    if (n.param != nullptr) {
      add_into(n.param->grad, n.grad);
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
  // Activations and gradients are released with the graph.
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  const Var in[] = {a, b};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) shape_fail("matmul", A, B);
  Tensor out = Tensor::matrix(A.rows(), B.cols());
  view(out).noalias() = view(A) * view(B);
  return g.record(std::move(out), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    if (g.requires_grad(a.id)) view(g.grad(a.id)).noalias() += view(G) * view(g.value(b.id)).transpose();
    if (g.requires_grad(b.id)) view(g.grad(b.id)).noalias() += view(g.value(a.id)).transpose() * view(G);
  });
}

Var matmul_nt(Var a, Var b) {
  const Var in[] = {a, b};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) shape_fail("matmul_nt", A, B);
  Tensor out = Tensor::matrix(A.rows(), B.rows());
  view(out).noalias() = view(A) * view(B).transpose();
  return g.record(std::move(out), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    if (g.requires_grad(a.id)) view(g.grad(a.id)).noalias() += view(G) * view(g.value(b.id));
    if (g.requires_grad(b.id)) view(g.grad(b.id)).noalias() += view(G).transpose() * view(g.value(a.id));
  });
}

Var add(Var a, Var b) {
  const Var in[] = {a, b};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("add", A, B);
  Tensor out = A;
  add_into(out, B);
  return g.record(std::move(out), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    if (g.requires_grad(a.id)) add_into(g.grad(a.id), G);
    if (g.requires_grad(b.id)) add_into(g.grad(b.id), G);
  });
}

Var add_row(Var a, Var row) {
  const Var in[] = {a, row};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) shape_fail("add_row", A, R);
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += R[c];
  }
  return g.record(std::move(out), in, [a, row](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    if (g.requires_grad(a.id)) add_into(g.grad(a.id), G);
    if (g.requires_grad(row.id)) {
      Tensor& gr = g.grad(row.id);
      for (std::size_t r = 0; r < G.rows(); ++r) {
        auto src = G.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) gr[c] += src[c];
      }
    }
  });
}

Var mul(Var a, Var b) {
  const Var in[] = {a, b};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("mul", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  return g.record(std::move(out), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& A = g.value(a.id);
    const Tensor& B = g.value(b.id);
    if (g.requires_grad(a.id)) {
      Tensor& ga = g.grad(a.id);
      for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += G[i] * B[i];
    }
    if (g.requires_grad(b.id)) {
      Tensor& gb = g.grad(b.id);
      for (std::size_t i = 0; i < G.numel(); ++i) gb[i] += G[i] * A[i];
    }
  });
}

Var scale(Var a, double s) {
  const Var in[] = {a};
  Graph& g = graph_of(in);
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return g.record(std::move(out), in, [a, s](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor& ga = g.grad(a.id);
    for (std::size_t i = 0; i < G.numel(); ++i) ga[i] += s * G[i];
  });
}

Var sum(Var a) {
  const Var in[] = {a};
  Graph& g = graph_of(in);
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return g.record(Tensor::scalar(total), in, [a](Graph& g, std::size_t self) {
    const double G = g.grad(self)[0];
    for (auto& v : g.grad(a.id).values()) v += G;
  });
}

Var concat_rows(std::span<const Var> parts) {
  Graph& g = graph_of(parts);
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_fail("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [inputs](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t n = g.value(p.id).numel();
      if (g.requires_grad(p.id)) {
        Tensor& gp = g.grad(p.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += G[offset + i];
      }
      offset += n;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Var in[] = {a};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  if (begin >= end || end > A.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + A.shape_string());
  }
  const std::size_t cols = A.cols();
  Tensor out = Tensor::matrix(end - begin, cols);
  std::copy(A.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
            A.data().begin() + static_cast<std::ptrdiff_t>(end * cols), out.data().begin());
  return g.record(std::move(out), in, [a, begin, cols](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor& ga = g.grad(a.id);
    for (std::size_t i = 0; i < G.numel(); ++i) ga[begin * cols + i] += G[i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  Graph& g = graph_of(parts);
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const Tensor& P = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = P.row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(c0));
    }
    c0 += P.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [inputs](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    std::size_t c0 = 0;
    for (const auto& p : inputs) {
      const std::size_t pc = g.value(p.id).cols();
      if (g.requires_grad(p.id)) {
        Tensor& gp = g.grad(p.id);
        for (std::size_t r = 0; r < G.rows(); ++r) {
          for (std::size_t c = 0; c < pc; ++c) gp.at(r, c) += G.at(r, c0 + c);
        }
      }
      c0 += pc;
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Var in[] = {a};
  Graph& g = graph_of(in);
  const Tensor& A = a.value();
  if (begin >= end || end > A.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + A.shape_string());
  }
  Tensor out = Tensor::matrix(A.rows(), end - begin);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    auto src = A.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin),
              src.begin() + static_cast<std::ptrdiff_t>(end), out.row(r).begin());
  }
  return g.record(std::move(out), in, [a, begin](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor& ga = g.grad(a.id);
    for (std::size_t r = 0; r < G.rows(); ++r) {
      for (std::size_t c = 0; c < G.cols(); ++c) ga.at(r, begin + c) += G.at(r, c);
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Var in[] = {table};
  Graph& g = graph_of(in);
  const Tensor& T = table.value();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out = Tensor::matrix(ids.size(), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       T.shape_string());
    }
    auto src = T.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return g.record(std::move(out), in, [table, saved](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor& gt = g.grad(table.id);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      auto dst = gt.row(static_cast<std::size_t>(saved[i]));
      auto src = G.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  const Var in[] = {x, gain, bias};
  Graph& g = graph_of(in);
  const Tensor& X = x.value();
  const std::size_t n = X.cols();
  if (gain.value().numel() != n) shape_fail("layer_norm", X, gain.value());
  if (bias.value().numel() != n) shape_fail("layer_norm", X, bias.value());
  const Tensor& Gn = gain.value();
  const Tensor& Bs = bias.value();
  Tensor out = Tensor::matrix(X.rows(), n);
  Tensor xhat = Tensor::matrix(X.rows(), n);
  std::vector<double> rstd(X.rows());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto row = X.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * rstd[r];
      xhat.at(r, c) = h;
      out.at(r, c) = h * Gn[c] + Bs[c];
    }
  }
  return g.record(std::move(out), in,
                  [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g,
                                                                                   std::size_t self) {
                    const Tensor& G = g.grad(self);
                    const Tensor& Gn = g.value(gain.id);
                    const std::size_t n = G.cols();
                    if (g.requires_grad(gain.id) || g.requires_grad(bias.id)) {
                      const bool wg = g.requires_grad(gain.id);
                      const bool wb = g.requires_grad(bias.id);
                      for (std::size_t r = 0; r < G.rows(); ++r) {
                        for (std::size_t c = 0; c < n; ++c) {
                          if (wg) g.grad(gain.id)[c] += G.at(r, c) * xhat.at(r, c);
                          if (wb) g.grad(bias.id)[c] += G.at(r, c);
                        }
                      }
                    }
                    if (!g.requires_grad(x.id)) return;
                    Tensor& gx = g.grad(x.id);
                    std::vector<double> dh(n);
                    for (std::size_t r = 0; r < G.rows(); ++r) {
                      double s1 = 0.0;
                      double s2 = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        dh[c] = G.at(r, c) * Gn[c];
                        s1 += dh[c];
                        s2 += dh[c] * xhat.at(r, c);
                      }
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        gx.at(r, c) += rstd[r] * (dh[c] - inv_n * s1 - xhat.at(r, c) * inv_n * s2);
                      }
                    }
                  });
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  return out;
}

Var softmax_rows(Var x) {
  const Var in[] = {x};
  Graph& g = graph_of(in);
  return g.record(softmax_rows(x.value()), in, [x](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& Y = g.value(self);
    Tensor& gx = g.grad(x.id);
    for (std::size_t r = 0; r < G.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < G.cols(); ++c) dot += G.at(r, c) * Y.at(r, c);
      for (std::size_t c = 0; c < G.cols(); ++c) gx.at(r, c) += Y.at(r, c) * (G.at(r, c) - dot);
    }
  });
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var gelu(Var x) {
  const Var in[] = {x};
  Graph& g = graph_of(in);
  Tensor out = x.value();
  for (auto& v : out.values()) v = gelu(v);
  return g.record(std::move(out), in, [x](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& X = g.value(x.id);
    Tensor& gx = g.grad(x.id);
    for (std::size_t i = 0; i < G.numel(); ++i) {
      const double v = X[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += G[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var causal_mask_add(Var scores, std::size_t offset) {
  const Var in[] = {scores};
  Graph& g = graph_of(in);
  Tensor out = scores.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = r + offset + 1; c < out.cols(); ++c) out.at(r, c) += kMaskedScore;
  }
  return g.record(std::move(out), in, [scores](Graph& g, std::size_t self) {
    add_into(g.grad(scores.id), g.grad(self));
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const unsigned char> mask,
                  Reduction reduction) {
  const Var in[] = {logits};
  Graph& g = graph_of(in);
  const Tensor& L = logits.value();
  if (targets.size() != L.rows() || mask.size() != L.rows()) {
    throw ShapeError("cross_entropy: logits " + L.shape_string() + " vs " +
                     std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: empty mask");

  Tensor probs = softmax_rows(L);
  double total = 0.0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    if (!mask[r]) continue;
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= L.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(L.cols()));
    }
    auto row = L.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += (std::log(z) + mx) - row[static_cast<std::size_t>(t)];
  }
  const double factor = reduction == Reduction::Mean ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<unsigned char> mk(mask.begin(), mask.end());
  return g.record(Tensor::scalar(total * factor), in,
                  [logits, tg = std::move(tg), mk = std::move(mk), probs = std::move(probs),
                   factor](Graph& g, std::size_t self) {
                    const double G = g.grad(self)[0] * factor;
                    Tensor& gl = g.grad(logits.id);
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      if (!mk[r]) continue;
                      for (std::size_t c = 0; c < probs.cols(); ++c) gl.at(r, c) += G * probs.at(r, c);
                      gl.at(r, static_cast<std::size_t>(tg[r])) -= G;
                    }
                  });
}

}  // namespace promptlab
