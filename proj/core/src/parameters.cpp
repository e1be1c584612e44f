#include "evifuse/parameters.hpp"

#include <cmath>

#include "evifuse/errors.hpp"

namespace evifuse {

int ParameterStore::add(std::string name, Tensor init) {
  if (by_name_.count(name)) throw PreconditionError("duplicate parameter name: " + name);
  if (init.size() == 0) throw StructuralError("parameter must not be empty: " + name);
  Parameter p;
  p.grad = Tensor::zeros(init.shape);
  p.value = std::move(init);
  p.name = std::move(name);
  params_.push_back(std::move(p));
  const int idx = static_cast<int>(params_.size()) - 1;
  by_name_.emplace(params_.back().name, idx);
  return idx;
}

int ParameterStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

void ParameterStore::zero_grads() {
  for (Parameter& p : params_) p.grad.fill(0.0);
}

double ParameterStore::grad_norm() const {
  double acc = 0.0;
  for (const Parameter& p : params_)
    for (double g : p.grad.values) acc += g * g;
  return std::sqrt(acc);
}

void ParameterStore::clip_grads(double max_norm) {
  if (!(max_norm > 0.0)) throw PreconditionError("clip_grads requires max_norm > 0");
  const double norm = grad_norm();
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (Parameter& p : params_)
    for (double& g : p.grad.values) g *= scale;
}

namespace {

std::vector<int> all_indices(const ParameterStore& store) {
  std::vector<int> idx(store.count());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

}  // namespace

AdamOptimizer::AdamOptimizer(const ParameterStore& store, AdamConfig cfg)
    : AdamOptimizer(store, cfg, all_indices(store)) {}

AdamOptimizer::AdamOptimizer(const ParameterStore& store, AdamConfig cfg,
                             std::vector<int> trainable)
    : cfg_(cfg), trainable_(std::move(trainable)) {
  if (!(cfg_.learning_rate > 0.0)) throw PreconditionError("adam: learning_rate must be > 0");
  m_.reserve(trainable_.size());
  v_.reserve(trainable_.size());
  for (int idx : trainable_) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= store.count())
      throw PreconditionError("adam: trainable index out of range");
    m_.push_back(Tensor::zeros(store.at(idx).value.shape));
    v_.push_back(Tensor::zeros(store.at(idx).value.shape));
  }
}

void AdamOptimizer::step(ParameterStore& store) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < trainable_.size(); ++k) {
    Parameter& p = store.at(trainable_[k]);
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.values[i];
      m.values[i] = cfg_.beta1 * m.values[i] + (1.0 - cfg_.beta1) * g;
      v.values[i] = cfg_.beta2 * v.values[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m.values[i] / bc1;
      const double vh = v.values[i] / bc2;
      p.value.values[i] -= cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.epsilon);
    }
  }
  store.zero_grads();
}

}  // namespace evifuse
