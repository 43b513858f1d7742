// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ehrbert/autodiff/tensor.hpp"
#include "ehrbert/core/error.hpp"
#include "ehrbert/core/random.hpp"

namespace ehrbert::ad {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;  // same size as value once has_grad is set
  bool has_grad = false;
  bool trainable = true;
  bool decay = true;  // subject to weight decay
  std::vector<T> m, v;  // AdamW moments

  void zero_grad() {
    std::fill(grad.begin(), grad.end(), T(0));
    has_grad = false;
  }

  void accumulate_grad(const std::vector<T>& g) {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    has_grad = true;
  }
};

/// Named, insertion-ordered collection of trainable tensors plus the AdamW
/// step counter. Parameters have stable addresses for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> init, bool decay = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = std::move(init);
    p->decay = decay;
    p->m.assign(p->value.size(), T(0));
    p->v.assign(p->value.size(), T(0));
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  /// Truncated-normal initialised matrix.
  Parameter<T>& add_normal(const std::string& name, Shape shape, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.values()) x = static_cast<T>(rng.truncated_normal(stddev));
    return add(name, std::move(t), true);
  }

  Parameter<T>& add_constant(const std::string& name, Shape shape, T fill, bool decay = false) {
    return add(name, Tensor<T>(std::move(shape), fill), decay);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& at(std::size_t i) { return *params_[i]; }
  const Parameter<T>& at(std::size_t i) const { return *params_[i]; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Marks every parameter whose name starts with `prefix` (non-)trainable.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p->name.rfind(prefix, 0) == 0) p->trainable = trainable;
  }

  /// Value snapshot keyed by name.
  std::map<std::string, Tensor<T>> snapshot() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& p : params_) out.emplace(p->name, p->value);
    return out;
  }

  /// Copies values for every parameter present in `values`; shapes must match.
  void restore(const std::map<std::string, Tensor<T>>& values) {
    for (auto& p : params_) {
      auto it = values.find(p->name);
      if (it == values.end()) continue;
      if (it->second.shape() != p->value.shape())
        throw ConfigError("shape mismatch restoring " + p->name + ": " + shape_string(it->second.shape()) + " vs " +
                          shape_string(p->value.shape()));
      p->value = it->second;
    }
  }

  std::size_t step = 0;  // optimizer steps taken

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace ehrbert::ad
