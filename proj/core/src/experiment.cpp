#include "promptlab/experiment.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_convert.hpp"
#include "promptlab/checkpoint.hpp"

namespace promptlab {

using nlohmann::json;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::Train: return "train";
    case Mode::Sweep: return "sweep";
    case Mode::Account: return "account";
    case Mode::Forgetting: return "forgetting";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  if (s == "train") return Mode::Train;
  if (s == "sweep") return Mode::Sweep;
  if (s == "account") return Mode::Account;
  if (s == "forgetting") return Mode::Forgetting;
  throw std::invalid_argument("unknown mode " + s + " (expected train, sweep, account or forgetting)");
}

// ---- JSON for the experiment-level structs --------------------------------

void to_json(json& j, Mode m) { j = to_string(m); }
void from_json(const json& j, Mode& m) { m = parse_mode(j.get<std::string>()); }

void to_json(json& j, const DatasetSource& s) {
  if (s.generate) {
    j = {{"generate", *s.generate}};
  } else {
    j = {{"manifest", s.manifest.string()}};
  }
}

void from_json(const json& j, DatasetSource& s) {
  if (!j.is_object()) throw FieldError("", "expected an object with 'generate' or 'manifest'");
  const bool gen = j.contains("generate");
  const bool man = j.contains("manifest");
  if (gen == man) throw FieldError("", "exactly one of 'generate' or 'manifest' is required");
  if (gen) {
    GenerationConfig g;
    detail::field(j, "generate", g, true);
    s.generate = g;
  } else {
    std::string p;
    detail::field(j, "manifest", p, true);
    s.manifest = p;
  }
}

void to_json(json& j, const TaskSources& t) { j = {{"train", t.train}, {"dev", t.dev}}; }
void from_json(const json& j, TaskSources& t) {
  detail::field(j, "train", t.train, true);
  detail::field(j, "dev", t.dev, true);
}

void to_json(json& j, const PretrainConfig& p) { j = {{"train", p.train}, {"optimizer", p.optimizer}}; }
void from_json(const json& j, PretrainConfig& p) {
  detail::field(j, "train", p.train, true);
  detail::field(j, "optimizer", p.optimizer);
}

void to_json(json& j, const SweepConfig& s) {
  j = {{"lengths", s.lengths}, {"positions", s.positions}, {"workers", s.workers}};
}
void from_json(const json& j, SweepConfig& s) {
  detail::field(j, "lengths", s.lengths);
  detail::field(j, "positions", s.positions);
  detail::field(j, "workers", s.workers);
}

void to_json(json& j, const ForgettingConfig& f) {
  j = {{"methods", f.methods}, {"old_tasks", f.old_tasks}, {"optimizers", f.optimizers}};
  if (f.new_task) j["new_task"] = *f.new_task;
}
void from_json(const json& j, ForgettingConfig& f) {
  detail::field(j, "methods", f.methods);
  detail::field(j, "old_tasks", f.old_tasks);
  if (j.contains("new_task")) {
    TaskSources t;
    detail::field(j, "new_task", t);
    f.new_task = t;
  }
  detail::field(j, "optimizers", f.optimizers);
  for (const auto& [name, _] : f.optimizers) {
    try {
      parse_method(name);
    } catch (const std::invalid_argument& e) {
      throw FieldError("optimizers." + name, e.what());
    }
  }
}

namespace {

const std::set<std::string> kTopLevelKeys = {"schema_version", "mode",    "seed",    "model",
                                             "adapter",        "optimizer", "pretrain", "dataset",
                                             "sweep",          "forgetting", "outputs"};

void resolve_paths(DatasetSource& s, const std::filesystem::path& base) {
  if (!s.generate && !s.manifest.empty() && s.manifest.is_relative() && !base.empty()) {
    s.manifest = base / s.manifest;
  }
  if (!s.manifest.empty()) s.manifest = std::filesystem::absolute(s.manifest).lexically_normal();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void say(const Progress& progress, const std::string& msg) {
  if (progress) progress(msg);
}

std::string format_count(std::size_t n) { return std::to_string(n); }

std::string format_millions(double m) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2fM", m);
  return buf;
}

std::string format_signed_millions(double m) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2fM", m);
  return buf;
}

/// Trainable count of an attached model, cross-checked against the layout
/// enumeration.
std::size_t checked_param_count(const AttachedAdapter& attached) {
  const ParamAccount live = count_params(attached);
  const ParamAccount planned = layout_account(attached.model().config(), attached.spec());
  if (live.total != planned.total) {
    throw std::logic_error("parameter accountant disagrees with the live model: " +
                           std::to_string(live.total) + " vs " + std::to_string(planned.total));
  }
  return live.total;
}

std::vector<DatasetManifest> materialize_all(const std::vector<DatasetSource>& sources, const ModelConfig& model) {
  std::vector<DatasetManifest> out;
  for (const auto& s : sources) out.push_back(materialize(s, model));
  return out;
}

AdapterSpec spec_for(const ExperimentConfig& config, Method method) {
  AdapterSpec spec = config.adapter;
  spec.method = method;
  if (method == Method::SPT4ASR) spec.position = PromptPosition::Entire;
  return spec;
}

AttachedAdapter attach_spec(Model base, const AdapterSpec& spec) {
  return spec.method == Method::SPT4ASR ? compose_spt4asr(std::move(base), spec) : attach(std::move(base), spec);
}

}  // namespace

// ---- config loading ---------------------------------------------------------

void apply_seed(ExperimentConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.model.seed = seed;
  config.adapter.seed = seed;
  config.optimizer.seed = seed;
  if (config.pretrain) config.pretrain->optimizer.seed = seed;
  for (auto& [_, opt] : config.forgetting.optimizers) opt.seed = seed;
}

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("<document>", "expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kTopLevelKeys.count(key)) throw ConfigError(key, "unknown field");
  }

  ExperimentConfig c;
  try {
    detail::field(j, "schema_version", c.schema_version, true);
    if (c.schema_version != kSchemaVersion) {
      throw FieldError("schema_version", "unsupported schema version " + std::to_string(c.schema_version) +
                                             " (expected " + std::to_string(kSchemaVersion) + ")");
    }
    detail::field(j, "mode", c.mode, true);
    detail::field(j, "model", c.model);
    detail::field(j, "adapter", c.adapter);
    detail::field(j, "optimizer", c.optimizer);
    if (j.contains("pretrain")) {
      PretrainConfig p;
      detail::field(j, "pretrain", p);
      c.pretrain = p;
    }
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      try {
        detail::field(d, "train", c.train);
        detail::field(d, "dev", c.dev);
      } catch (const FieldError& e) {
        throw e.nested("dataset");
      }
    }
    detail::field(j, "sweep", c.sweep);
    detail::field(j, "forgetting", c.forgetting);
    std::string out;
    detail::field(j, "outputs", out);
    c.outputs = out;
    if (j.contains("seed")) {
      std::uint64_t seed = 0;
      detail::field(j, "seed", seed);
      apply_seed(c, seed);
    } else {
      c.seed = c.model.seed;
    }
  } catch (const FieldError& e) {
    throw ConfigError(e.path(), e.why());
  }

  for (auto& s : c.train) resolve_paths(s, base_dir);
  for (auto& s : c.dev) resolve_paths(s, base_dir);
  if (c.pretrain) {
    for (auto& s : c.pretrain->train) resolve_paths(s, base_dir);
  }
  for (auto& t : c.forgetting.old_tasks) {
    resolve_paths(t.train, base_dir);
    resolve_paths(t.dev, base_dir);
  }
  if (c.forgetting.new_task) {
    resolve_paths(c.forgetting.new_task->train, base_dir);
    resolve_paths(c.forgetting.new_task->dev, base_dir);
  }
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("--config", "cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

void validate_config(const ExperimentConfig& c) {
  auto check = [](const std::string& field, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(field, e.what());
    }
  };
  auto check_source = [&](const std::string& field, const DatasetSource& s) {
    if (s.generate) return;
    if (!std::filesystem::exists(s.manifest)) {
      throw ConfigError(field + ".manifest", "no such file: " + s.manifest.string());
    }
  };
  auto check_sources = [&](const std::string& field, const std::vector<DatasetSource>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) check_source(field + "[" + std::to_string(i) + "]", v[i]);
  };

  check("model", [&] { c.model.validate(); });
  check("optimizer", [&] { c.optimizer.validate(); });
  if (c.pretrain) {
    if (c.pretrain->train.empty()) throw ConfigError("pretrain.train", "at least one dataset is required");
    check("pretrain.optimizer", [&] { c.pretrain->optimizer.validate(); });
    check_sources("pretrain.train", c.pretrain->train);
  }
  for (const auto& [name, opt] : c.forgetting.optimizers) {
    check("forgetting.optimizers." + name, [&] { opt.validate(); });
  }

  switch (c.mode) {
    case Mode::Train:
      if (c.train.empty()) throw ConfigError("dataset.train", "missing required field for mode train");
      check_sources("dataset.train", c.train);
      check_sources("dataset.dev", c.dev);
      check("adapter", [&] { validate_spec(c.adapter, c.model); });
      break;
    case Mode::Sweep:
      if (c.train.empty()) throw ConfigError("dataset.train", "missing required field for mode sweep");
      check_sources("dataset.train", c.train);
      check_sources("dataset.dev", c.dev);
      if (c.sweep.lengths.empty()) throw ConfigError("sweep.lengths", "must not be empty");
      for (int l : c.sweep.lengths) {
        if (l < 1) throw ConfigError("sweep.lengths", "lengths must be >= 1");
      }
      if (c.sweep.positions.empty()) throw ConfigError("sweep.positions", "must not be empty");
      if (c.sweep.workers < 1) throw ConfigError("sweep.workers", "must be >= 1");
      break;
    case Mode::Account:
      break;
    case Mode::Forgetting:
      if (c.forgetting.old_tasks.empty()) {
        throw ConfigError("forgetting.old_tasks", "missing required field for mode forgetting");
      }
      if (!c.forgetting.new_task) {
        throw ConfigError("forgetting.new_task", "missing required field for mode forgetting");
      }
      if (!c.pretrain) throw ConfigError("pretrain", "mode forgetting needs a pretraining stage for the base");
      if (c.forgetting.methods.empty()) throw ConfigError("forgetting.methods", "must not be empty");
      for (std::size_t i = 0; i < c.forgetting.old_tasks.size(); ++i) {
        const std::string f = "forgetting.old_tasks[" + std::to_string(i) + "]";
        check_source(f + ".train", c.forgetting.old_tasks[i].train);
        check_source(f + ".dev", c.forgetting.old_tasks[i].dev);
      }
      check_source("forgetting.new_task.train", c.forgetting.new_task->train);
      check_source("forgetting.new_task.dev", c.forgetting.new_task->dev);
      for (Method m : c.forgetting.methods) {
        check("forgetting.methods", [&] { validate_spec(spec_for(c, m), c.model); });
      }
      break;
  }
}

std::string snapshot_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["mode"] = c.mode;
  j["seed"] = c.seed;
  j["model"] = c.model;
  j["adapter"] = c.adapter;
  j["optimizer"] = c.optimizer;
  if (c.pretrain) j["pretrain"] = *c.pretrain;
  j["dataset"] = {{"train", c.train}, {"dev", c.dev}};
  j["sweep"] = c.sweep;
  j["forgetting"] = c.forgetting;
  j["outputs"] = c.outputs.string();
  return j.dump(2) + "\n";
}

DatasetManifest materialize(const DatasetSource& source, const ModelConfig& model) {
  if (source.generate) {
    GenerationConfig g = *source.generate;
    if (g.languages.empty()) {
      g.languages = standard_languages(SpecialTokenMap::standard(model.vocab_size, model.languages));
    }
    return gen_dataset(g);
  }
  return read_manifest(source.manifest);
}

// ---- tables -------------------------------------------------------------------

std::string format_mer(double mer) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * mer);
  return buf;
}

std::string ResultsTable::csv() const {
  auto line = [](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      const bool quote = cells[i].find_first_of(",\"\n") != std::string::npos;
      if (quote) {
        out += '"';
        for (char ch : cells[i]) {
          if (ch == '"') out += '"';
          out += ch;
        }
        out += '"';
      } else {
        out += cells[i];
      }
    }
    return out + "\n";
  };
  std::string out = line(header);
  for (const auto& r : rows) out += line(r);
  return out;
}

std::string ResultsTable::markdown() const {
  auto line = [](const std::vector<std::string>& cells) {
    std::string out = "|";
    for (const auto& c : cells) out += " " + c + " |";
    return out + "\n";
  };
  std::string out = line(header);
  out += "|";
  for (std::size_t i = 0; i < header.size(); ++i) out += " --- |";
  out += "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

// ---- base model -----------------------------------------------------------------

Model prepare_base(const ExperimentConfig& config, const Progress& progress) {
  Model base = build_model(config.model);
  if (!config.pretrain) return base;
  const auto sets = materialize_all(config.pretrain->train, config.model);
  AdapterSpec fft;
  fft.method = Method::FFT;
  fft.seed = config.seed;
  fft.target_budget = config.adapter.target_budget;
  AttachedAdapter a = attach(std::move(base), fft);
  say(progress, "pretraining base model on " + std::to_string(sets.size()) + " dataset(s)");
  const TrainReport r = train_run(a, sets, {}, config.pretrain->optimizer);
  say(progress, "pretraining done after " + std::to_string(r.steps) + " steps, final epoch loss " +
                    std::to_string(r.epoch_train_loss.back()));
  return std::move(a.model());
}

// ---- train --------------------------------------------------------------------------

namespace {

std::vector<std::string> dev_columns(const std::vector<DatasetManifest>& dev) {
  std::vector<std::string> cols;
  for (const auto& d : dev) cols.push_back("mer_" + d.split);
  return cols;
}

}  // namespace

ResultsTable run_train(const ExperimentConfig& config, const std::filesystem::path& out,
                       const Progress& progress) {
  const auto train = materialize_all(config.train, config.model);
  const auto dev = materialize_all(config.dev, config.model);
  Model base = prepare_base(config, progress);
  AttachedAdapter attached = attach_spec(std::move(base), config.adapter);
  const std::size_t params = checked_param_count(attached);

  say(progress, std::string("training ") + to_string(config.adapter.method));
  const TrainReport report = train_run(attached, train, dev, config.optimizer, out / "best.ckpt");
  write_text(out / "report.json", report_json(report) + "\n");

  ResultsTable t;
  t.header = {"method", "position", "n_enc", "n_dec"};
  for (auto& c : dev_columns(dev)) t.header.push_back(c);
  t.header.insert(t.header.end(), {"params", "best_epoch"});
  std::vector<std::string> row = {to_string(config.adapter.method), to_string(config.adapter.position),
                                  std::to_string(encoder_prompt_length(config.adapter)),
                                  std::to_string(decoder_prompt_length(config.adapter))};
  for (std::size_t i = 0; i < dev.size(); ++i) {
    row.push_back(format_mer(report.epoch_dev_mer[static_cast<std::size_t>(report.best_epoch)][i]));
  }
  row.push_back(format_count(params));
  row.push_back(std::to_string(report.best_epoch));
  t.rows.push_back(std::move(row));
  return t;
}

// ---- sweep ----------------------------------------------------------------------------

std::vector<SweepCell> grid_cells(const ExperimentConfig& config) {
  AdapterSpec spec = config.adapter;
  spec.method = Method::VanillaSPT;
  auto decoder_fits = [&](int n) {
    AdapterSpec s = spec;
    s.position = PromptPosition::Decoder;
    s.n_dec = n;
    try {
      validate_spec(s, config.model);
      return true;
    } catch (const ContextLimitError&) {
      return false;
    }
  };

  std::vector<SweepCell> cells;
  for (PromptPosition pos : config.sweep.positions) {
    for (int len : config.sweep.lengths) {
      SweepCell cell;
      cell.position = pos;
      cell.length = len;
      cell.n_enc = pos == PromptPosition::Decoder ? 0 : len;
      cell.n_dec = pos == PromptPosition::Encoder ? 0 : len;
      if (pos != PromptPosition::Encoder && !decoder_fits(len)) {
        if (pos == PromptPosition::Decoder) {
          cell.available = false;
          cell.reason = "decoder context limit";
        } else {
          int fallback = 0;
          for (int l : config.sweep.lengths) {
            if (l < len && l > fallback && decoder_fits(l)) fallback = l;
          }
          if (fallback == 0) {
            cell.available = false;
            cell.reason = "decoder context limit";
          } else {
            cell.n_dec = fallback;
          }
        }
      }
      if (cell.available) {
        AdapterSpec s = spec;
        s.position = pos;
        s.n_enc = cell.n_enc > 0 ? cell.n_enc : s.n_enc;
        s.n_dec = cell.n_dec > 0 ? cell.n_dec : s.n_dec;
        try {
          validate_spec(s, config.model);
        } catch (const std::invalid_argument& e) {
          cell.available = false;
          cell.reason = e.what();
        }
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

ResultsTable sweep_grid(const ExperimentConfig& config, const std::filesystem::path& out,
                          const Progress& progress) {
  const auto cells = grid_cells(config);
  const auto train = materialize_all(config.train, config.model);
  const auto dev = materialize_all(config.dev, config.model);
  const Model base = prepare_base(config, progress);

  struct Outcome {
    bool ok = false;
    std::string error;
    TrainReport report;
    std::size_t params = 0;
  };
  std::vector<Outcome> outcomes(cells.size());
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    std::lock_guard<std::mutex> lock(log_mutex);
    say(progress, msg);
  };

  auto run_cell = [&](std::size_t i) {
    const SweepCell& cell = cells[i];
    if (!cell.available) return;
    const std::string name = std::string(to_string(cell.position)) + "-" + std::to_string(cell.length);
    try {
      AdapterSpec spec = config.adapter;
      spec.method = Method::VanillaSPT;
      spec.position = cell.position;
      if (cell.n_enc > 0) spec.n_enc = cell.n_enc;
      if (cell.n_dec > 0) spec.n_dec = cell.n_dec;
      AttachedAdapter attached = attach(base, spec);
      outcomes[i].params = checked_param_count(attached);
      log("cell " + name + ": training");
      const auto dir = out / "cells" / name;
      std::filesystem::create_directories(dir);
      outcomes[i].report = train_run(attached, train, dev, config.optimizer, dir / "best.ckpt");
      write_text(dir / "report.json", report_json(outcomes[i].report) + "\n");
      outcomes[i].ok = true;
    } catch (const std::exception& e) {
      outcomes[i].error = e.what();
      log("cell " + name + " failed: " + e.what());
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.sweep.workers), cells.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  ResultsTable t;
  t.header = {"position", "length", "n_enc", "n_dec", "status"};
  for (auto& c : dev_columns(dev)) t.header.push_back(c);
  t.header.insert(t.header.end(), {"params", "best_epoch", "note"});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cell = cells[i];
    const auto& o = outcomes[i];
    std::vector<std::string> row = {to_string(cell.position), std::to_string(cell.length),
                                    std::to_string(cell.n_enc), std::to_string(cell.n_dec)};
    if (!cell.available) {
      row.push_back("N/A");
      for (std::size_t k = 0; k < dev.size(); ++k) row.push_back("N/A");
      row.insert(row.end(), {"", "", cell.reason});
    } else if (!o.ok) {
      row.push_back("failed");
      for (std::size_t k = 0; k < dev.size(); ++k) row.push_back("");
      row.insert(row.end(), {format_count(o.params), "", o.error});
    } else {
      row.push_back("ok");
      const auto best = static_cast<std::size_t>(o.report.best_epoch);
      for (std::size_t k = 0; k < dev.size(); ++k) row.push_back(format_mer(o.report.epoch_dev_mer[best][k]));
      std::string note;
      if (cell.position == PromptPosition::Entire && cell.n_dec != cell.length) {
        note = "decoder uses " + std::to_string(cell.n_dec) + " prompts";
      }
      row.insert(row.end(), {format_count(o.params), std::to_string(o.report.best_epoch), note});
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---- accounting ---------------------------------------------------------------------------

ResultsTable account_presets() {
  struct Published {
    const char* preset;
    Method method;
    double millions;
  };
  static const Published kPublished[] = {
      {"small", Method::FFT, 240.58},         {"small", Method::LoRA, 1.85},
      {"small", Method::VanillaSPT, 0.20},    {"small", Method::DPT, 1.39},
      {"small", Method::ResPT, 0.79},         {"small", Method::LPT, 0.99},
      {"small", Method::SPT4ASR, 3.74},       {"small", Method::WholeModelSPT, 240.69},
      {"medium", Method::FFT, 762.32},        {"medium", Method::LoRA, 4.94},
      {"medium", Method::SPT4ASR, 7.48},      {"medium", Method::WholeModelSPT, 762.59},
  };
  const Method methods[] = {Method::FFT, Method::LoRA, Method::VanillaSPT, Method::DPT,
                            Method::ResPT, Method::LPT, Method::SPT4ASR, Method::WholeModelSPT};

  ResultsTable t;
  t.header = {"preset", "method", "trainable_params", "published", "delta"};
  for (const char* preset : {"small", "medium"}) {
    const ModelConfig cfg = std::string(preset) == "small" ? ModelConfig::whisper_small() : ModelConfig::whisper_medium();
    std::map<Method, std::size_t> totals;
    for (Method m : methods) {
      AdapterSpec spec;
      spec.method = m;
      const ParamAccount acc = layout_account(cfg, spec);
      totals[m] = acc.total;
      std::vector<std::string> row = {preset, to_string(m), format_count(acc.total), "", ""};
      for (const auto& p : kPublished) {
        if (preset == std::string(p.preset) && p.method == m) {
          row[3] = format_millions(p.millions);
          row[4] = format_signed_millions(static_cast<double>(acc.total) / 1e6 - p.millions);
        }
      }
      t.rows.push_back(std::move(row));
    }
    // Prompt overhead of whole-model SPT over FFT, comparable with the
    // difference of the two published totals.
    const std::size_t delta = totals[Method::WholeModelSPT] - totals[Method::FFT];
    std::vector<std::string> row = {preset, "WholeModelSPT-FFT", format_count(delta), "", ""};
    double published_fft = 0.0;
    double published_whole = 0.0;
    for (const auto& p : kPublished) {
      if (preset != std::string(p.preset)) continue;
      if (p.method == Method::FFT) published_fft = p.millions;
      if (p.method == Method::WholeModelSPT) published_whole = p.millions;
    }
    row[3] = format_millions(published_whole - published_fft);
    row[4] = format_signed_millions(static_cast<double>(delta) / 1e6 - (published_whole - published_fft));
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---- forgetting ---------------------------------------------------------------------------

ForgettingSuiteResult forgetting_suite(const ExperimentConfig& config, const std::filesystem::path& out,
                                       const Progress& progress) {
  if (!config.pretrain || config.forgetting.old_tasks.empty() || !config.forgetting.new_task) {
    throw std::invalid_argument("forgetting_suite needs pretrain, old_tasks and new_task");
  }
  std::vector<DatasetManifest> old_dev;
  for (const auto& t : config.forgetting.old_tasks) old_dev.push_back(materialize(t.dev, config.model));
  const DatasetManifest new_train = materialize(config.forgetting.new_task->train, config.model);
  const DatasetManifest new_dev = materialize(config.forgetting.new_task->dev, config.model);

  ExperimentConfig base_cfg = config;
  base_cfg.pretrain->train.clear();
  for (const auto& t : config.forgetting.old_tasks) base_cfg.pretrain->train.push_back(t.train);
  const Model base = prepare_base(base_cfg, progress);
  {
    const auto& params = base.parameters();
    std::vector<const Parameter*> view;
    for (const auto& p : params) view.push_back(&p);
    save_checkpoint(out / "base.ckpt", view);
  }

  ForgettingSuiteResult result;
  result.table.header = {"method", "task", "base_mer", "adapted_mer", "delta_mer", "logits_identical",
                         "new_task_mer", "params"};
  for (Method m : config.forgetting.methods) {
    const AdapterSpec spec = spec_for(config, m);
    OptimizerConfig opt = config.optimizer;
    if (auto it = config.forgetting.optimizers.find(to_string(m)); it != config.forgetting.optimizers.end()) {
      opt = it->second;
    }
    AttachedAdapter adapted = attach_spec(base, spec);
    const std::size_t params = checked_param_count(adapted);
    say(progress, std::string("adapting with ") + to_string(m));
    const auto dir = out / "methods" / to_string(m);
    std::filesystem::create_directories(dir);
    const TrainReport report = train_run(adapted, new_train, std::span<const DatasetManifest>(&new_dev, 1), opt,
                                         dir / "best.ckpt");
    write_text(dir / "report.json", report_json(report) + "\n");
    const double new_mer = evaluate(adapted, new_dev).mer();
    ForgettingReport fr = forgetting_eval(base, adapted, old_dev);
    for (const auto& row : fr.rows) {
      result.table.rows.push_back({to_string(m), row.task, format_mer(row.base_mer), format_mer(row.adapted_mer),
                                   format_mer(row.delta_mer), row.logits_bit_identical ? "yes" : "no",
                                   format_mer(new_mer), format_count(params)});
    }
    result.reports.push_back(std::move(fr));
  }
  return result;
}

// ---- dispatch ------------------------------------------------------------------------------

ResultsTable run(const ExperimentConfig& config, const std::filesystem::path& out, const Progress& progress) {
  std::filesystem::create_directories(out);
  const auto marker = out / kIncompleteMarker;
  write_text(marker, std::string("mode: ") + to_string(config.mode) + "\nstatus: running\n");
  try {
    write_text(out / "config.json", snapshot_json(config));
    ResultsTable table;
    switch (config.mode) {
      case Mode::Train: table = run_train(config, out, progress); break;
      case Mode::Sweep: table = sweep_grid(config, out, progress); break;
      case Mode::Account: table = account_presets(); break;
      case Mode::Forgetting: table = forgetting_suite(config, out, progress).table; break;
    }
    write_text(out / "results.csv", table.csv());
    write_text(out / "results.md", table.markdown());
    std::filesystem::remove(marker);
    return table;
  } catch (const std::exception& e) {
    write_text(marker, std::string("mode: ") + to_string(config.mode) + "\nstatus: failed\nerror: " + e.what() + "\n");
    throw;
  }
}

}  // namespace promptlab
