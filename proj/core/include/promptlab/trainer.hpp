#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptlab/dataset.hpp"
#include "promptlab/mer.hpp"
#include "promptlab/peft.hpp"

namespace promptlab {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 0;
  /// Global-norm clipping threshold; nullopt disables clipping.
  std::optional<double> grad_clip_norm = 1.0;
  /// Hard cap on optimizer steps; 0 means no cap.
  int max_steps = 0;
  /// Stop once the mean loss over the last epoch falls below this; 0 disables.
  double stop_below_loss = 0.0;

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Mean cross-entropy over the masked rows. Throws on an empty mask.
Var nll_loss(Var logits, std::span<const int> targets, std::span<const unsigned char> mask);

/// AdamW with bias correction and decoupled weight decay. Frozen parameters
/// are never touched. Moments are keyed by parameter name.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config);

  void step(std::span<Parameter* const> params);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

struct TrainReport {
  std::string method;
  std::vector<double> step_losses;
  /// epoch_dev_mer[epoch][dev_set], MER as a fraction.
  std::vector<std::vector<double>> epoch_dev_mer;
  std::vector<double> epoch_train_loss;
  std::vector<std::string> dev_names;
  int best_epoch = -1;
  double best_mean_dev_mer = 0.0;
  std::size_t steps = 0;
  bool stopped_early = false;
  double wall_clock_seconds = 0.0;
  ParamAccount account;
};

/// Trains the adapter's trainable parameters on the pooled utterances of
/// `train` (each decoded with its own manifest's prefix language). Each epoch
/// visits a seeded shuffle of the pool in batches; the batch loss is the summed token
/// NLL divided by the batch token count. After every epoch every dev set is
/// decoded greedily and scored; the epoch with the lowest mean dev MER wins
/// (lowest mean training loss without dev sets). The winning parameters are
/// restored into `attached` and, when `checkpoint` is set, saved there.
TrainReport train_run(AttachedAdapter& attached, std::span<const DatasetManifest> train,
                      std::span<const DatasetManifest> dev, const OptimizerConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint = std::nullopt);
TrainReport train_run(AttachedAdapter& attached, const DatasetManifest& train,
                      std::span<const DatasetManifest> dev, const OptimizerConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

/// Throws unless the manifest's token space and languages fit the model.
void check_compatible(const DatasetManifest& manifest, const Model& model);

/// Pooled MER of the attached model on one manifest, decoding greedily.
MerReport evaluate(AttachedAdapter& attached, const DatasetManifest& manifest);

std::string report_json(const TrainReport& report);

}  // namespace promptlab
