#pragma once

// Central finite-difference gradient checker. The numeric side only ever
// evaluates forward passes under NoGradGuard, so it stays independent of the
// backward rules it is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "clear/rng.hpp"
#include "clear/tensor.hpp"

namespace gradcheck {

struct Result {
  double max_err = 0.0;   // max over elements of |analytic - numeric| / max(1,|a|,|n|)
  int checked = 0;
};

// f builds a scalar loss from the current leaf values (graph rebuilt per call).
inline Result check(const std::function<clear::Tensor()>& f, std::vector<clear::Tensor> leaves,
                    double step = 1e-5) {
  auto& tape = clear::Tape::active();
  tape.reset();
  for (auto& leaf : leaves) leaf.zero_grad();
  clear::Tensor loss = f();
  clear::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.size(), 0.0));
  }
  tape.reset();

  Result res;
  clear::NoGradGuard ng;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li].mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double hi = f().item();
      data[i] = keep - step;
      const double lo = f().item();
      data[i] = keep;
      const double numeric = (hi - lo) / (2.0 * step);
      const double a = analytic[li][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_err = std::max(res.max_err, err);
      ++res.checked;
    }
  }
  return res;
}

inline clear::Tensor random_tensor(clear::Rng& rng, clear::Shape shape, double lo = -1.0,
                                   double hi = 1.0, bool requires_grad = true) {
  std::vector<double> d(static_cast<size_t>(clear::numel(shape)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return clear::Tensor(std::move(shape), std::move(d), requires_grad);
}

}  // namespace gradcheck
