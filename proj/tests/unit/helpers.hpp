#pragma once

#include <random>
#include <vector>

#include "msda/tensor.hpp"

namespace testutil {

inline msda::Tensor random_tensor(msda::Shape shape, std::mt19937_64& rng,
                                  bool requires_grad = false, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(msda::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return msda::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const msda::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace testutil
