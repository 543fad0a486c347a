#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wm/error.hpp"
#include "wm/tensor.hpp"

namespace wm {

// A named trainable tensor. `group` identifies which network owns it,
// which is what gradient routing keys on.
template <class S>
struct Param {
  std::string name;
  int group = 0;
  Tensor<S> tensor;
};

template <class S>
struct AdamState {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  long step = 0;
  // One moment pair per parameter, in registry order.
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
};

// Bias-corrected Adam update. Reads each parameter's accumulated grad and
// applies the update in place. Deterministic given inputs.
template <class S>
void adam_step(std::vector<Param<S>>& params, AdamState<S>& st) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].tensor.numel(), S(0));
      st.v[i].assign(params[i].tensor.numel(), S(0));
    }
  }
  if (st.m.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(st.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  ++st.step;
  const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta1), static_cast<double>(st.step)));
  const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta2), static_cast<double>(st.step)));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const long n = p.tensor.numel();
    if (static_cast<long>(st.m[i].size()) != n)
      throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    const S* g = p.tensor.grad_data();
    for (long j = 0; j < n; ++j)
      if (!std::isfinite(static_cast<double>(g[j])))
        throw NumericError(p.name, "adam_step: non-finite gradient in parameter " + p.name);
    S* pv = p.tensor.data();
    S* mi = st.m[i].data();
    S* vi = st.v[i].data();
    for (long j = 0; j < n; ++j) {
      mi[j] = st.beta1 * mi[j] + (S(1) - st.beta1) * g[j];
      vi[j] = st.beta2 * vi[j] + (S(1) - st.beta2) * g[j] * g[j];
      const S mhat = mi[j] / bc1;
      const S vhat = vi[j] / bc2;
      pv[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace wm
