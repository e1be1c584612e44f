#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "evifuse/tensor.hpp"

namespace evifuse {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Named parameter tensors in a stable insertion order. Names are unique;
// accumulated gradients live next to the values so a training step is
// build tape -> backward -> pull_gradient per parameter -> optimizer step.
class ParameterStore {
 public:
  int add(std::string name, Tensor init);

  int index_of(const std::string& name) const;  // -1 when absent
  std::size_t count() const { return params_.size(); }

  Parameter& at(int index) { return params_[static_cast<std::size_t>(index)]; }
  const Parameter& at(int index) const { return params_[static_cast<std::size_t>(index)]; }

  void zero_grads();
  double grad_norm() const;
  // Scales all gradients so the global norm is at most max_norm.
  void clip_grads(double max_norm);

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, int> by_name_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction over a fixed subset of a store's parameters.
// step() consumes the accumulated gradients and zeroes all of them.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& store, AdamConfig cfg);
  AdamOptimizer(const ParameterStore& store, AdamConfig cfg, std::vector<int> trainable);

  void step(ParameterStore& store);
  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<int> trainable_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace evifuse
