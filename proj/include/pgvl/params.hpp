// Named learnable parameters and SGD.
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "pgvl/tensor.hpp"

namespace pgvl {

enum class Init { Zeros, ScaledNormal };

template <typename T>
struct ParamStore {
  std::map<std::string, TensorPtr<T>> params;  // ordered by name
  T sigma = T(0.02);

  TensorPtr<T> create(const std::string& name, int64_t rows, int64_t cols,
                      Init init, std::mt19937_64& rng) {
    if (params.count(name))
      throw std::runtime_error("parameter name already used: " + name);
    std::vector<T> data((size_t)(rows * cols), T(0));
    if (init == Init::ScaledNormal) {
      std::normal_distribution<double> nd(0.0, (double)sigma);
      for (auto& v : data) v = (T)nd(rng);
    }
    auto t = make_tensor<T>(rows, cols, std::move(data), true);
    params.emplace(name, t);
    return t;
  }

  TensorPtr<T> at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end())
      throw std::runtime_error("no such parameter: " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, p] : params) p->zero_grad();
  }

  void sgd_step(T lr) {
    for (auto& [name, p] : params) {
      if (p->grad.empty()) continue;
      for (size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * p->grad[i];
    }
  }
};

}  // namespace pgvl
