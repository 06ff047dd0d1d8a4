#include "promptlab/forgetting.hpp"

#include <stdexcept>

#include "promptlab/trainer.hpp"

namespace promptlab {

std::vector<Tensor> manifest_logits(Model& model, const DatasetManifest& manifest, ForwardAdapter* adapter) {
  std::vector<Tensor> out;
  out.reserve(manifest.utterances.size());
  for (const auto& u : manifest.utterances) {
    Graph g(false);
    out.push_back(model.forward_logits(g, u.features, manifest.prefix_language(), u.tokens, adapter).value());
  }
  return out;
}

namespace {

double model_mer(Model& model, const DatasetManifest& m, ForwardAdapter* adapter) {
  return corpus_mer(m, [&](const Utterance& u) {
           return greedy_decode(model, u.features, m.prefix_language(), decode_budget(u), adapter);
         }).mer();
}

bool all_identical(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape() || !bit_identical(a[i].data(), b[i].data())) return false;
  }
  return true;
}

}  // namespace

ForgettingReport forgetting_eval(const Model& base, const AttachedAdapter& adapted,
                                 std::span<const DatasetManifest> old_tasks) {
  ForgettingReport report;
  report.method = adapted.spec().method;
  report.detached = !adapted.mechanisms().base_trainable;

  Model reference = base;
  AttachedAdapter mutated = adapted;
  std::optional<Model> recovered;
  if (report.detached) recovered = detach(adapted);

  for (const auto& task : old_tasks) {
    check_compatible(task, reference);
    ForgettingRow row;
    row.task = task.split;
    const auto base_logits = manifest_logits(reference, task);
    row.base_mer = model_mer(reference, task, nullptr);
    if (recovered) {
      row.logits_bit_identical = all_identical(base_logits, manifest_logits(*recovered, task));
      if (!row.logits_bit_identical) {
        throw std::logic_error("forgetting_eval: detached " + std::string(to_string(report.method)) +
                               " model diverges from the base on " + task.split);
      }
      row.adapted_mer = model_mer(*recovered, task, nullptr);
    } else {
      row.logits_bit_identical =
          all_identical(base_logits, manifest_logits(mutated.model(), task, &mutated));
      row.adapted_mer = model_mer(mutated.model(), task, &mutated);
    }
    row.delta_mer = row.adapted_mer - row.base_mer;
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace promptlab
