#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptlab/dataset.hpp"
#include "promptlab/forgetting.hpp"
#include "promptlab/peft.hpp"
#include "promptlab/trainer.hpp"

namespace promptlab {

inline constexpr int kSchemaVersion = 1;

enum class Mode { Train, Sweep, Account, Forgetting };
const char* to_string(Mode m);
Mode parse_mode(const std::string& s);

/// Invalid configuration. `field()` is the dotted path of the offending
/// field, e.g. "dataset.train[0].manifest".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& why)
      : std::invalid_argument("config field '" + field + "': " + why), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Either an inline generation config or a manifest.json on disk.
struct DatasetSource {
  std::optional<GenerationConfig> generate;
  std::filesystem::path manifest;
};

struct TaskSources {
  DatasetSource train;
  DatasetSource dev;
};

/// Optional full fine-tuning of the freshly built model before adaptation.
struct PretrainConfig {
  std::vector<DatasetSource> train;
  OptimizerConfig optimizer;
};

struct SweepConfig {
  std::vector<int> lengths = {16, 32, 64, 128, 256};
  std::vector<PromptPosition> positions = {PromptPosition::Encoder, PromptPosition::Decoder,
                                           PromptPosition::Entire};
  int workers = 1;
};

struct ForgettingConfig {
  std::vector<Method> methods = {Method::FFT, Method::LoRA, Method::SPT4ASR};
  std::vector<TaskSources> old_tasks;
  std::optional<TaskSources> new_task;
  /// Per-method optimizer overrides keyed by method name.
  std::map<std::string, OptimizerConfig> optimizers;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  Mode mode = Mode::Train;
  /// Copied into the model, adapter and optimizer seeds. Dataset seeds are
  /// part of the dataset configs and stay fixed.
  std::uint64_t seed = 0;
  ModelConfig model;
  AdapterSpec adapter;
  OptimizerConfig optimizer;
  std::optional<PretrainConfig> pretrain;
  std::vector<DatasetSource> train;
  std::vector<DatasetSource> dev;
  SweepConfig sweep;
  ForgettingConfig forgetting;
  std::filesystem::path outputs;
};

/// Parses and validates a config document. Relative manifest paths resolve
/// against `base_dir`. Throws ConfigError naming the field.
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Mode-dependent checks: required sections present, manifests exist.
void validate_config(const ExperimentConfig& config);

/// Fully resolved config (seed applied, absolute paths) as JSON text.
/// Parsing the snapshot yields an equal config.
std::string snapshot_json(const ExperimentConfig& config);

/// Applies `seed` to the model, adapter and every optimizer.
void apply_seed(ExperimentConfig& config, std::uint64_t seed);

/// Generates or loads a dataset. Generation configs without languages use
/// the standard toy languages of the model's vocabulary.
DatasetManifest materialize(const DatasetSource& source, const ModelConfig& model);

struct ResultsTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const;
  std::string markdown() const;
};

/// MER as a percentage with two decimals, e.g. 0.25 -> "25.00".
std::string format_mer(double mer);

/// One cell of the prompt length/position grid.
struct SweepCell {
  PromptPosition position = PromptPosition::Entire;
  int length = 0;
  int n_enc = 0;
  int n_dec = 0;
  bool available = true;
  std::string reason;
};

/// The grid, in position-major order. Decoder cells whose prompts plus task
/// prefix and target budget exceed the decoder context are marked N/A with
/// reason "decoder context limit"; Entire cells in that situation keep the
/// encoder length and fall back to the longest grid length the decoder fits.
std::vector<SweepCell> grid_cells(const ExperimentConfig& config);

using Progress = std::function<void(const std::string&)>;

/// Builds the base model, running the pretraining stage when configured.
Model prepare_base(const ExperimentConfig& config, const Progress& progress = {});

ResultsTable run_train(const ExperimentConfig& config, const std::filesystem::path& out,
                       const Progress& progress = {});
ResultsTable sweep_grid(const ExperimentConfig& config, const std::filesystem::path& out,
                          const Progress& progress = {});
/// Trainable-parameter counts at the whisper-small and whisper-medium
/// dimension presets, next to the published figures where they exist.
ResultsTable account_presets();

struct ForgettingSuiteResult {
  ResultsTable table;
  std::vector<ForgettingReport> reports;
};
ForgettingSuiteResult forgetting_suite(const ExperimentConfig& config, const std::filesystem::path& out,
                                       const Progress& progress = {});

/// Name of the marker file present in an output directory while a run is in
/// progress or after it failed.
inline constexpr const char* kIncompleteMarker = "RUN_INCOMPLETE";

/// Dispatches on config.mode, writing config.json, results.csv and
/// results.md (plus mode-specific artifacts) into `out`.
ResultsTable run(const ExperimentConfig& config, const std::filesystem::path& out,
                 const Progress& progress = {});

}  // namespace promptlab
