#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "promptlab/tensor.hpp"

namespace promptlab {

/// A named tensor with a gradient buffer and a trainable flag. Frozen
/// parameters never receive gradient and are skipped by the optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter(std::string n, Tensor v, bool t = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(t) {}

  std::size_t numel() const { return value.numel(); }
  void zero_grad() { grad.fill(0.0); }
};

/// Owns parameters in insertion order. Handles are indices, so copying a store
/// deep-copies every parameter and the copy's handles stay valid.
class ParameterStore {
 public:
  using Handle = std::size_t;

  Handle add(std::string name, Tensor value, bool trainable = true);

  Parameter& operator[](Handle h) { return params_[h]; }
  const Parameter& operator[](Handle h) const { return params_[h]; }

  Parameter& by_name(const std::string& name);
  const Parameter& by_name(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Handle handle_of(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_count() const;
  std::size_t trainable_count() const;
  void set_trainable(bool trainable);
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, Handle> index_;
};

}  // namespace promptlab
