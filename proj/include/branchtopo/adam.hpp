#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "branchtopo/tensor.hpp"

namespace branchtopo::ad {

// Adam with bias correction. eps sits outside the square root, so the very
// first step is -lr * g / (|g| + eps).
template <typename T>
struct AdamState {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const std::vector<Tensor<T>>& params) {
    step = 0;
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].count(), T(0));
      v[i].assign(params[i].count(), T(0));
    }
  }
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st) {
  if (st.m.size() != params.size()) throw Error("adam_step: state not initialized");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& vals = params[p].value();
    const auto& grads = params[p].grad();
    if (grads.size() != vals.size()) {
      throw Error("adam_step: missing gradient for " + params[p].name());
    }
    auto& mp = st.m[p];
    auto& vp = st.v[p];
    for (size_t i = 0; i < vals.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient for " +
                           (params[p].name().empty() ? "parameter " + std::to_string(p)
                                                     : params[p].name()));
      }
      const double mi = st.beta1 * static_cast<double>(mp[i]) + (1.0 - st.beta1) * g;
      const double vi = st.beta2 * static_cast<double>(vp[i]) + (1.0 - st.beta2) * g * g;
      mp[i] = static_cast<T>(mi);
      vp[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      vals[i] = static_cast<T>(static_cast<double>(vals[i]) - st.lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

}  // namespace branchtopo::ad
