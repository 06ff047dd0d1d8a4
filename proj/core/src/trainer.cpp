#include "promptlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "binary_io.hpp"
#include "json_convert.hpp"
#include "promptlab/checkpoint.hpp"

namespace promptlab {

void OptimizerConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("invalid optimizer config: " + what); };
  if (!(learning_rate > 0.0)) bad("learning_rate must be > 0");
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) bad("betas must lie in [0, 1)");
  if (!(eps > 0.0)) bad("eps must be > 0");
  if (weight_decay < 0.0) bad("weight_decay must be >= 0");
  if (grad_clip_norm && !(*grad_clip_norm > 0.0)) bad("grad_clip_norm must be > 0 when set");
  if (max_steps < 0) bad("max_steps must be >= 0");
  if (stop_below_loss < 0.0) bad("stop_below_loss must be >= 0");
}

Var nll_loss(Var logits, std::span<const int> targets, std::span<const unsigned char> mask) {
  return cross_entropy(logits, targets, mask, Reduction::Mean);
}

AdamW::AdamW(OptimizerConfig config) : config_(std::move(config)) { config_.validate(); }

void AdamW::step(std::span<Parameter* const> params) {
  ++t_;
  const double lr = config_.learning_rate;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    auto [it, fresh] = state_.try_emplace(p->name);
    Moments& s = it->second;
    if (fresh) {
      s.m = Tensor(p->value.shape());
      s.v = Tensor(p->value.shape());
    }
    auto w = p->value.data();
    auto g = p->grad.data();
    auto m = s.m.data();
    auto v = s.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      for (double& g : p->grad.data()) g *= k;
    }
  }
  return norm;
}

void check_compatible(const DatasetManifest& manifest, const Model& model) {
  const auto& tok = model.tokens();
  const auto& cfg = manifest.config;
  auto mismatch = [&](const std::string& what) {
    throw std::invalid_argument("dataset/model vocab mismatch (" + manifest.split + "): " + what);
  };
  if (cfg.text_tokens > tok.first_special) {
    mismatch("dataset uses " + std::to_string(cfg.text_tokens) + " text tokens, model has " +
             std::to_string(tok.first_special));
  }
  if (cfg.d_feat != model.config().d_feat) mismatch("feature width differs from the model frontend");
  for (const auto& l : cfg.languages) {
    if (!tok.lid.count(l.name)) mismatch("model has no LID token for language " + l.name);
    if (l.token_end > tok.first_special) mismatch("language " + l.name + " overlaps the special tokens");
  }
  if (!tok.lid.count(manifest.prefix_language())) mismatch("unknown prefix language " + manifest.prefix_language());
  for (const auto& u : manifest.utterances) {
    for (int t : u.tokens) {
      if (t < 0 || t >= tok.first_special) mismatch("utterance " + u.id + " holds a non-text token");
    }
    if (u.features.cols() != static_cast<std::size_t>(model.config().d_feat)) {
      mismatch("utterance " + u.id + " has the wrong feature width");
    }
  }
}

MerReport evaluate(AttachedAdapter& attached, const DatasetManifest& manifest) {
  const std::string& lang = manifest.prefix_language();
  return corpus_mer(manifest, [&](const Utterance& u) {
    return attached.transcribe(u.features, lang, decode_budget(u));
  });
}

TrainReport train_run(AttachedAdapter& attached, const DatasetManifest& train,
                      std::span<const DatasetManifest> dev, const OptimizerConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint) {
  return train_run(attached, std::span<const DatasetManifest>(&train, 1), dev, config, checkpoint);
}

TrainReport train_run(AttachedAdapter& attached, std::span<const DatasetManifest> train,
                      std::span<const DatasetManifest> dev, const OptimizerConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint) {
  config.validate();
  struct Item {
    const Utterance* utterance;
    const std::string* language;
  };
  std::vector<Item> pool;
  for (const auto& m : train) {
    check_compatible(m, attached.model());
    for (const auto& u : m.utterances) pool.push_back({&u, &m.prefix_language()});
  }
  if (pool.empty()) throw std::invalid_argument("train_run: empty training set");
  for (const auto& d : dev) check_compatible(d, attached.model());

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.method = to_string(attached.spec().method);
  for (const auto& d : dev) report.dev_names.push_back(d.split);

  auto params = attached.trainable_parameters();
  AdamW opt(config);
  const std::size_t n = pool.size();
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;

  std::vector<std::size_t> order(n);
  std::vector<Tensor> best;
  double best_score = 0.0;
  bool done = false;

  for (int epoch = 0; epoch < config.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < n && !done; b += batch) {
      const std::size_t e = std::min(n, b + batch);
      std::size_t tokens = 0;
      for (std::size_t i = b; i < e; ++i) tokens += pool[order[i]].utterance->tokens.size() + 1;

      for (Parameter* p : params) p->zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const Utterance& u = *pool[order[i]].utterance;
        Graph g;
        auto [nll, count] =
            attached.model().utterance_nll(g, u.features, *pool[order[i]].language, u.tokens, &attached);
        (void)count;
        Var loss = scale(nll, 1.0 / static_cast<double>(tokens));
        g.backward(loss);
        batch_loss += loss.value()[0];
      }
      if (config.grad_clip_norm) clip_grad_norm(params, *config.grad_clip_norm);
      opt.step(params);

      report.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss;
      ++epoch_steps;
      if (config.max_steps > 0 && opt.steps() >= static_cast<std::size_t>(config.max_steps)) done = true;
      if (config.stop_below_loss > 0.0 && report.step_losses.size() >= steps_per_epoch) {
        const double window = std::accumulate(report.step_losses.end() - static_cast<long>(steps_per_epoch),
                                              report.step_losses.end(), 0.0) /
                              static_cast<double>(steps_per_epoch);
        if (window < config.stop_below_loss) {
          done = true;
          report.stopped_early = true;
        }
      }
    }
    report.epoch_train_loss.push_back(epoch_loss / static_cast<double>(epoch_steps));

    double score = report.epoch_train_loss.back();
    if (!dev.empty()) {
      std::vector<double> mers;
      for (const auto& d : dev) mers.push_back(evaluate(attached, d).mer());
      score = std::accumulate(mers.begin(), mers.end(), 0.0) / static_cast<double>(mers.size());
      report.epoch_dev_mer.push_back(std::move(mers));
    }
    if (report.best_epoch < 0 || score < best_score) {
      best_score = score;
      report.best_epoch = epoch;
      best.clear();
      for (const Parameter* p : params) best.push_back(p->value);
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(best[i]);
  report.best_mean_dev_mer = dev.empty() ? 0.0 : best_score;
  report.steps = opt.steps();
  report.account = count_params(attached);
  if (checkpoint) {
    const auto all = attached.all_parameters();
    std::vector<const Parameter*> view(all.begin(), all.end());
    save_checkpoint(*checkpoint, view);
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string report_json(const TrainReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["steps"] = r.steps;
  j["stopped_early"] = r.stopped_early;
  j["step_losses"] = r.step_losses;
  j["epoch_train_loss"] = r.epoch_train_loss;
  j["dev_names"] = r.dev_names;
  j["epoch_dev_mer"] = r.epoch_dev_mer;
  j["best_epoch"] = r.best_epoch;
  j["best_mean_dev_mer"] = r.best_mean_dev_mer;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["param_account"] = {{"components", r.account.components},
                        {"total", r.account.total},
                        {"frozen_total", r.account.frozen_total}};
  return j.dump(2);
}

}  // namespace promptlab
