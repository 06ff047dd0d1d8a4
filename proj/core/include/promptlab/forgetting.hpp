#pragma once

#include <span>
#include <string>
#include <vector>

#include "promptlab/dataset.hpp"
#include "promptlab/peft.hpp"

namespace promptlab {

struct ForgettingRow {
  std::string task;
  double base_mer = 0.0;
  double adapted_mer = 0.0;
  double delta_mer = 0.0;
  /// Teacher-forced logits of the evaluated model equal the base model's on
  /// every utterance, bit for bit.
  bool logits_bit_identical = false;
};

struct ForgettingReport {
  Method method = Method::FFT;
  /// True when the adapter was detached and the recovered base was evaluated.
  bool detached = false;
  std::vector<ForgettingRow> rows;
};

/// Re-evaluates old tasks after adaptation. Frozen-base methods are detached
/// first and must reproduce the base logits exactly (a std::logic_error
/// otherwise); FFT and whole-model SPT are evaluated as adapted and only the
/// MER change is reported.
ForgettingReport forgetting_eval(const Model& base, const AttachedAdapter& adapted,
                                 std::span<const DatasetManifest> old_tasks);

/// Teacher-forced logits of every utterance, in manifest order.
std::vector<Tensor> manifest_logits(Model& model, const DatasetManifest& manifest,
                                    ForwardAdapter* adapter = nullptr);

}  // namespace promptlab
