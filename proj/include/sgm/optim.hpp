#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sgm/errors.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> momentum;
};

// Named, ordered collection of trainable tensors. Names are unique; order is
// registration order and defines the checkpoint layout.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values) {
    if (find(name) != nullptr) throw ValidationError("duplicate parameter name: " + name);
    Tensor t(std::move(shape), std::move(values), true);
    params_.push_back({name, t, std::vector<double>(t.numel(), 0.0)});
    return t;
  }

  // Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
  Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return add(name, std::move(shape), std::move(v));
  }

  Tensor add_constant(const std::string& name, Shape shape, double value) {
    return add(name, shape, std::vector<double>(shape_numel(shape), value));
  }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::map<std::string, std::vector<double>> snapshot() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& p : params_) out[p.name] = std::vector<double>(p.tensor.data().begin(), p.tensor.data().end());
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

// buffer <- momentum * buffer + grad; value <- value - lr * buffer; grads cleared.
// Learning-rate decay is applied by the caller once per epoch.
inline void momentum_step(std::vector<Parameter>& params, double lr, double momentum) {
  for (auto& p : params) {
    const auto g = p.tensor.grad();
    auto v = p.tensor.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      p.momentum[i] = momentum * p.momentum[i] + gi;
      v[i] -= lr * p.momentum[i];
    }
    p.tensor.zero_grad();
  }
}

}  // namespace sgm
