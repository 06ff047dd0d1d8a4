// Acceptance checks. Prints one [PASS]/[FAIL] line per criterion and exits
// nonzero when any criterion fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mer_suite.hpp"
#include "promptlab/checkpoint.hpp"
#include "promptlab/experiment.hpp"
#include "promptlab/forgetting.hpp"
#include "promptlab/grad_check.hpp"
#include "promptlab/peft.hpp"
#include "promptlab/trainer.hpp"

using namespace promptlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

void log(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const std::vector<Method> kAllMethods = {Method::FFT, Method::LoRA,    Method::VanillaSPT, Method::DPT,
                                         Method::ResPT, Method::LPT, Method::SPT4ASR, Method::WholeModelSPT};
const std::vector<Method> kFrozenMethods = {Method::VanillaSPT, Method::DPT, Method::ResPT,
                                            Method::LPT,        Method::SPT4ASR, Method::LoRA};

std::vector<ToyLanguageSpec> toy_languages() {
  const auto c = ModelConfig::toy();
  return standard_languages(SpecialTokenMap::standard(c.vocab_size, c.languages));
}

DatasetManifest generate(const std::string& split, std::vector<double> mix, double switch_prob, int size,
                         std::uint64_t seed, const std::string& prefix) {
  GenerationConfig g;
  g.languages = toy_languages();
  g.split = split;
  g.mix_ratio = std::move(mix);
  g.switch_prob = switch_prob;
  g.size = size;
  g.seed = seed;
  g.prefix_language = prefix;
  return gen_dataset(g);
}

/// Prompt sizes small enough for the toy preset's training budget.
AdapterSpec toy_spec(Method m) {
  AdapterSpec s;
  s.method = m;
  s.n_enc = 16;
  s.n_dec = 16;
  s.n_deep = 8;
  return s;
}

AttachedAdapter attach_any(Model base, const AdapterSpec& s) {
  return s.method == Method::SPT4ASR ? compose_spt4asr(std::move(base), s) : attach(std::move(base), s);
}

Tensor random_features(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t = Tensor::matrix(rows, cols);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

std::vector<Tensor> snapshot(Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

bool same_values(Model& m, const std::vector<Tensor>& want) {
  std::size_t i = 0;
  for (const auto& p : m.parameters()) {
    if (i >= want.size() || !bit_identical(p.value.data(), want[i].data())) return false;
    ++i;
  }
  return i == want.size();
}

bool same_logits(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape() || !bit_identical(a[i].data(), b[i].data())) return false;
  }
  return true;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Model pretrain(const std::vector<DatasetManifest>& sets, int epochs) {
  AdapterSpec fft;
  fft.method = Method::FFT;
  AttachedAdapter a = attach(build_model(ModelConfig::toy()), fft);
  OptimizerConfig o;
  o.learning_rate = 1e-3;
  o.epochs = epochs;
  o.batch_size = 8;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train_run(a, sets, {}, o);
  log("pretrained base: " + std::to_string(r.steps) + " steps, final epoch loss " +
      fmt("%.4f", r.epoch_train_loss.back()) + ", " + fmt("%.1f s", seconds_since(t0)));
  for (const auto& s : sets) log("  base MER on " + s.split + ": " + fmt("%.4f", evaluate(a, s).mer()));
  return std::move(a.model());
}

// ---- criteria -------------------------------------------------------------------

Outcome accounting() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto small = ModelConfig::whisper_small();
  auto spec = [](Method m) {
    AdapterSpec s;
    s.method = m;
    s.position = PromptPosition::Entire;
    s.n_enc = s.n_dec = 128;
    s.n_deep = 64;
    s.respt_bottleneck = 384;
    s.lpt_hidden = 512;
    return s;
  };
  const std::pair<Method, std::size_t> want[] = {
      {Method::VanillaSPT, 196'608}, {Method::ResPT, 787'584}, {Method::LPT, 984'320}, {Method::DPT, 1'376'256}};
  for (const auto& [m, n] : want) {
    const auto sym = symbolic_account(small, spec(m));
    const auto lay = layout_account(small, spec(m));
    o.require(sym.total == n, std::string(to_string(m)) + " symbolic " + std::to_string(sym.total));
    o.require(sym == lay, std::string(to_string(m)) + " symbolic/layout disagree");
  }
  const double dpt = static_cast<double>(symbolic_account(small, spec(Method::DPT)).total);
  const double residual = std::abs(dpt - 1.39e6) / 1e6;
  o.require(residual <= 0.02, "DPT residual " + fmt("%.4fM", residual));
  o.note("DPT 1376256 vs 1.39M, residual " + fmt("%.4fM", residual));

  const auto medium = ModelConfig::whisper_medium();
  const auto delta = symbolic_account(medium, spec(Method::WholeModelSPT)).total -
                     symbolic_account(medium, spec(Method::FFT)).total;
  const double delta_m = static_cast<double>(delta) / 1e6;
  o.require(delta == 262'144, "medium delta " + std::to_string(delta));
  o.require(std::abs(delta_m - 0.27) <= 0.01, "medium delta " + fmt("%.4fM", delta_m));
  o.note("medium prompt delta " + std::to_string(delta) + " vs 0.27M");
  const double secs = seconds_since(t0);
  o.require(secs < 1.0, "runtime " + fmt("%.3f s", secs));
  o.note(fmt("%.3f s", secs));
  return o;
}

Outcome gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor x = random_features(6, ModelConfig::toy().d_feat, 11);
  const std::vector<int> y{3, 25, 26, 40};
  double worst = 0.0;
  for (Method m : kAllMethods) {
    AttachedAdapter a = attach_any(build_model(ModelConfig::toy()), toy_spec(m));
    // Zero-initialized adapter factors would make their partners' gradients vacuously zero.
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& p : a.bank()) {
      for (auto& v : p.value.values()) v = n(rng);
    }
    const auto trainable = a.trainable_parameters();
    const LossBuilder loss = [&](Graph& g) { return a.model().utterance_nll(g, x, "A", y, &a).first; };
    const auto r = finite_diff_check(loss, trainable, 1e-5, 3);
    std::string line = std::string(to_string(m)) + ": " + std::to_string(r.coordinates_checked) +
                       " coordinates, max rel err " + fmt("%.3e", r.max_relative_error) + " at " +
                       r.worst_parameter + "[" + std::to_string(r.worst_index) + "] analytic " +
                       fmt("%.6e", r.analytic) + " numeric " + fmt("%.6e", r.numeric);
    if (r.max_relative_error >= 1e-4) {
      const auto coarse = finite_diff_check(loss, trainable, 1e-4, 3);
      line += "; at eps 1e-4 the max rel err is " + fmt("%.3e", coarse.max_relative_error);
    }
    log(line);
    o.require(r.coordinates_checked > 0 && r.max_relative_error < 1e-4,
              std::string(to_string(m)) + " rel err " + fmt("%.3e", r.max_relative_error) + " where |grad| is " +
                  fmt("%.1e", std::abs(r.analytic)));
    worst = std::max(worst, r.max_relative_error);
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + fmt("%.1f s", secs));
  o.note("8 methods, eps 1e-5, worst rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs));
  return o;
}

Outcome purity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<DatasetManifest> old_train = {generate("monoA", {1, 0, 0}, 0.0, 150, 300, "A"),
                                                  generate("monoC", {0, 0, 1}, 0.0, 150, 301, "C")};
  const std::vector<DatasetManifest> old_dev = {generate("monoA-dev", {1, 0, 0}, 0.0, 25, 310, "A"),
                                                generate("monoC-dev", {0, 0, 1}, 0.0, 25, 311, "C")};
  const DatasetManifest cs = generate("csAB", {0.5, 0.5, 0}, 0.3, 32, 320, "A");
  Model base = pretrain(old_train, 40);
  const auto base_values = snapshot(base);
  std::vector<std::vector<Tensor>> base_logits;
  for (const auto& d : old_dev) base_logits.push_back(manifest_logits(base, d));

  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.batch_size = 4;
  opt.epochs = 125;  // 32 utterances in batches of 4: 1000 steps

  std::vector<Method> methods = kFrozenMethods;
  methods.push_back(Method::FFT);
  for (Method m : methods) {
    const std::string name = to_string(m);
    AttachedAdapter a = attach_any(base, toy_spec(m));
    const auto r = train_run(a, cs, {}, opt);
    o.require(r.steps >= 1000, name + " ran " + std::to_string(r.steps) + " steps");
    const ForgettingReport rep = forgetting_eval(base, a, old_dev);
    double max_delta = 0.0;
    std::string deltas;
    for (const auto& row : rep.rows) {
      max_delta = std::max(max_delta, std::abs(row.delta_mer));
      deltas += " " + row.task + " " + fmt("%+.4f", row.delta_mer);
    }
    log(name + ": " + std::to_string(r.steps) + " steps, final loss " + fmt("%.4f", r.epoch_train_loss.back()) +
        ", dMER" + deltas);
    if (m == Method::FFT) {
      o.require(!rep.detached && max_delta > 0.0, "FFT dMER is zero");
      o.note("FFT max |dMER| " + fmt("%.4f", max_delta));
      continue;
    }
    o.require(same_values(a.model(), base_values), name + " changed a frozen parameter");
    o.require(rep.detached, name + " not detached");
    for (const auto& row : rep.rows) {
      o.require(row.logits_bit_identical, name + " logits differ on " + row.task);
      o.require(row.delta_mer == 0.0, name + " dMER " + fmt("%.6f", row.delta_mer) + " on " + row.task);
    }
    Model back = detach(std::move(a));
    for (std::size_t i = 0; i < old_dev.size(); ++i) {
      o.require(same_logits(manifest_logits(back, old_dev[i]), base_logits[i]),
                name + " detached logits differ on " + old_dev[i].split);
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 600.0, "runtime " + fmt("%.1f s", secs));
  o.note("6 frozen methods x 1000 steps, 50 held-out inputs bit-identical after detach, " + fmt("%.1f s", secs));
  return o;
}

Outcome identity_inits() {
  Outcome o;
  const Tensor x = random_features(10, ModelConfig::toy().d_feat, 5);
  const std::vector<int> y{1, 2, 20, 21};
  Model base = build_model(ModelConfig::toy());

  AttachedAdapter lora = attach(base, toy_spec(Method::LoRA));
  Graph g1(false), g2(false);
  o.require(bit_identical(base.forward_logits(g1, x, "A", y).value().data(),
                          lora.forward_logits(g2, x, "A", y).value().data()),
            "LoRA logits differ from the base model at step 0");

  // ResPT with a zero output layer is vanilla prompt tuning on the same prompts.
  AttachedAdapter respt = attach(base, toy_spec(Method::ResPT));
  AttachedAdapter vanilla = attach(base, toy_spec(Method::VanillaSPT));
  for (const char* n : {"prompt.encoder", "prompt.decoder"}) vanilla.bank().by_name(n).value = respt.bank().by_name(n).value;
  Graph g3(false), g4(false);
  Var p = g3.param(respt.bank().by_name("prompt.encoder"));
  o.require(bit_identical(respt.respt_reparam(g3, p).value().data(), p.value().data()),
            "ResPT reparameterization is not the identity");
  Graph g5(false), g6(false);
  o.require(bit_identical(respt.forward_logits(g5, x, "A", y).value().data(),
                          vanilla.forward_logits(g6, x, "A", y).value().data()),
            "ResPT logits differ from vanilla prompts");

  AttachedAdapter lpt = attach(base, toy_spec(Method::LPT));
  Graph g7(false);
  const Tensor rows = lpt.lpt_prompts(g7).value();
  const auto& E = lpt.model().token_embedding().value;
  const auto& langs = lpt.spec().lpt_languages;
  o.require(rows.rows() == langs.size(), "LPT row count");
  for (std::size_t i = 0; i < langs.size() && i < rows.rows(); ++i) {
    const auto lid = static_cast<std::size_t>(lpt.model().tokens().lid_for(langs[i]));
    o.require(bit_identical(rows.row(i), E.row(lid)), "LPT row " + langs[i] + " differs from its LID embedding");
  }
  o.note("LoRA logits, ResPT reparameterization and logits, LPT language rows all bit-identical");
  return o;
}

Outcome shapes() {
  Outcome o;
  const auto toy = ModelConfig::toy();
  AttachedAdapter a = attach(build_model(toy), toy_spec(Method::VanillaSPT));
  const std::size_t l = 14;
  const std::vector<int> y{1, 2, 3, 20, 21};
  Graph g(false);
  const Var enc = a.model().encode(g, random_features(l, toy.d_feat, 2), a.encoder_prompts(g), &a);
  o.require(enc.rows() == 16 + l, "encoder rows " + std::to_string(enc.rows()));
  const Var dec = a.forward_logits(g, random_features(l, toy.d_feat, 2), "A", y);
  o.require(dec.rows() == 16 + 4 + y.size(), "decoder rows " + std::to_string(dec.rows()));

  AdapterSpec d256 = toy_spec(Method::VanillaSPT);
  d256.position = PromptPosition::Decoder;
  d256.n_enc = 0;
  d256.n_dec = 256;
  try {
    validate_spec(d256, toy);
    o.require(false, "Decoder x 256 accepted");
  } catch (const ContextLimitError& e) {
    o.require(std::string(e.what()).starts_with("decoder context limit"), std::string("message: ") + e.what());
  }

  ExperimentConfig c;
  c.mode = Mode::Sweep;
  const auto cells = grid_cells(c);
  int na = 0;
  for (const auto& cell : cells) {
    if (!cell.available) {
      ++na;
      o.require(cell.position == PromptPosition::Decoder && cell.length == 256 &&
                    cell.reason == "decoder context limit",
                "unexpected N/A cell");
    }
    if (cell.position == PromptPosition::Entire && cell.length == 256) {
      o.require(cell.available && cell.n_enc == 256 && cell.n_dec == 128,
                "Entire x 256 gives (" + std::to_string(cell.n_enc) + ", " + std::to_string(cell.n_dec) + ")");
    }
  }
  o.require(cells.size() == 15, std::to_string(cells.size()) + " cells");
  o.require(na == 1, std::to_string(na) + " N/A cells");
  o.note("encoder 16+" + std::to_string(l) + " rows, decoder 16+4+" + std::to_string(y.size()) +
         " rows, 15 cells with 1 N/A, Entire x 256 -> (256, 128)");
  return o;
}

Outcome learnability() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<DatasetManifest> pre = {generate("monoA", {1, 0, 0}, 0.0, 150, 100, "A"),
                                      generate("monoB", {0, 1, 0}, 0.0, 150, 101, "B"),
                                      generate("monoC", {0, 0, 1}, 0.0, 150, 102, "C"),
                                      generate("csAC", {0.5, 0, 0.5}, 0.3, 150, 200, "A"),
                                      generate("csBC", {0, 0.5, 0.5}, 0.3, 150, 201, "B")};
  Model base = pretrain(pre, 40);
  const DatasetManifest overfit = generate("overfit", {0.5, 0.5, 0}, 0.3, 32, 7, "A");

  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.epochs = 500;
  opt.max_steps = 2000;
  opt.stop_below_loss = 0.02;
  int worst_exact = 32;
  for (Method m : kAllMethods) {
    const auto t1 = std::chrono::steady_clock::now();
    AttachedAdapter a = attach_any(base, toy_spec(m));
    const auto r = train_run(a, overfit, {}, opt);
    const double best = *std::min_element(r.epoch_train_loss.begin(), r.epoch_train_loss.end());
    int exact = 0;
    for (const auto& u : overfit.utterances) {
      exact += a.transcribe(u.features, overfit.prefix_language(), decode_budget(u)) == u.tokens ? 1 : 0;
    }
    worst_exact = std::min(worst_exact, exact);
    log(std::string(to_string(m)) + ": initial loss " + fmt("%.4f", r.step_losses.front()) + ", " +
        std::to_string(r.steps) + " steps, best epoch loss " + fmt("%.4f", best) + ", exact " +
        std::to_string(exact) + "/32, " + fmt("%.1f s", seconds_since(t1)));
    o.require(r.steps <= 2000 && best < 0.1, std::string(to_string(m)) + " loss " + fmt("%.4f", best));
    o.require(exact * 10 >= 32 * 9, std::string(to_string(m)) + " exact " + std::to_string(exact) + "/32");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 900.0, "runtime " + fmt("%.1f s", secs));
  o.note("worst exact " + std::to_string(worst_exact) + "/32, " + fmt("%.1f s", secs));
  return o;
}

Outcome mer_equivalence() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const mer_suite::Tally parts[] = {
      mer_suite::exhaustive_pairs(8),
      mer_suite::exhaustive_hypotheses({{0, 3, 1, 4}, {5, 5, 0, 2, 3, 1, 4, 0}}, 8),
      mer_suite::random_pairs(1000, 9, 40, 2024),
  };
  std::uint64_t pairs = 0;
  for (const auto& t : parts) {
    pairs += t.pairs;
    o.require(t.mismatches == 0, std::to_string(t.mismatches) + " mismatches, first " + t.first_mismatch);
  }
  o.require(parts[2].pairs == 1000, "random pair count");

  const auto langs = toy_languages();
  Utterance ref;
  ref.id = "worked";
  ref.tokens = {0, 1, 20, 21, 22, 23};
  for (int t : ref.tokens) ref.token_langs.push_back(language_of(t, langs)->name);
  const std::vector<int> hyp{0, 20, 21, 22, 23};
  const std::string worked = format_mer(mer(ref, hyp, langs).mer());
  o.require(worked == "25.00", "worked example " + worked);
  o.note(std::to_string(pairs) + " pairs agree with the oracle, worked example " + worked + "%, " +
         fmt("%.1f s", seconds_since(t0)));
  return o;
}

Outcome determinism(const fs::path& scratch) {
  Outcome o;
  const std::string config = R"({
  "schema_version": 1, "mode": "train", "seed": 21,
  "adapter": {"method": "SPT4ASR", "n_enc": 16, "n_dec": 16, "n_deep": 8},
  "optimizer": {"learning_rate": 0.001, "epochs": 2, "batch_size": 8},
  "dataset": {
    "train": [{"generate": {"split": "train", "mix_ratio": [0.5, 0.5, 0.0], "size": 24, "seed": 31}}],
    "dev": [{"generate": {"split": "dev", "mix_ratio": [0.5, 0.5, 0.0], "size": 8, "seed": 32}}]
  }
})";
  run(parse_config(config), scratch / "first");
  run(load_config(scratch / "first" / "config.json"), scratch / "rerun");
  const std::string a = read_file(scratch / "first" / "results.csv");
  const std::string b = read_file(scratch / "rerun" / "results.csv");
  o.require(!a.empty() && a == b, "results.csv differs between runs");

  AttachedAdapter m = attach(build_model(ModelConfig::toy()), toy_spec(Method::SPT4ASR));
  load_checkpoint(scratch / "first" / "best.ckpt", m.all_parameters());
  const auto all = m.all_parameters();
  save_checkpoint(scratch / "again.ckpt", std::vector<const Parameter*>(all.begin(), all.end()));
  AttachedAdapter n = attach(build_model(ModelConfig::toy()), toy_spec(Method::SPT4ASR));
  load_checkpoint(scratch / "again.ckpt", n.all_parameters());
  const Tensor x = random_features(12, ModelConfig::toy().d_feat, 9);
  const std::vector<int> y{2, 3, 22, 23};
  Graph g1(false), g2(false);
  o.require(bit_identical(m.forward_logits(g1, x, "A", y).value().data(),
                          n.forward_logits(g2, x, "A", y).value().data()),
            "forward after checkpoint round trip differs");
  o.require(read_file(scratch / "first" / "best.ckpt") == read_file(scratch / "again.ckpt"),
            "re-saved checkpoint differs");
  o.note("rerun from config.json gives identical results.csv (" + std::to_string(a.size()) +
         " bytes); checkpoint round trip bit-identical");
  return o;
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / ("promptlab_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"parameter accounting at the small and medium presets", accounting},
      {"finite-difference gradients for every method", gradients},
      {"frozen base purity and zero forgetting", purity},
      {"identity initializations", identity_inits},
      {"prompt shape contracts and grid", shapes},
      {"overfit learnability for every method", learnability},
      {"MER aligner equals the edit-distance oracle", mer_equivalence},
      {"deterministic reruns and checkpoints", [&] { return determinism(scratch); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    failures += out.pass ? 0 : 1;
    std::printf("[%s] criterion %zu: %s (%s)\n", out.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                out.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(scratch);
  return failures == 0 ? 0 : 1;
}
