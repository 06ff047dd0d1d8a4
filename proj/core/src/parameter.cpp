#include "promptlab/parameter.hpp"

#include <stdexcept>

namespace promptlab {

ParameterStore::Handle ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Handle h = params_.size();
  index_.emplace(name, h);
  params_.emplace_back(std::move(name), std::move(value), trainable);
  return h;
}

Parameter& ParameterStore::by_name(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::by_name(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

ParameterStore::Handle ParameterStore::handle_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.numel();
  }
  return n;
}

void ParameterStore::set_trainable(bool trainable) {
  for (auto& p : params_) p.trainable = trainable;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace promptlab
