#include "qbn/optim.hpp"

#include <cmath>
#include <string>

#include "qbn/error.hpp"

namespace qbn {

template <typename T>
AdamState<T> AdamState<T>::zeros(const NamedTensors<T>& params) {
  AdamState s;
  for (const auto& [name, p] : params) {
    s.m.emplace_back(p.numel(), T(0));
    s.v.emplace_back(p.numel(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state,
               const AdamConfig& cfg, double lr_scale) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("optimizer state holds " + std::to_string(state.m.size()) +
                        " buffers for " + std::to_string(params.size()) +
                        " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.numel() || state.v[i].size() != p.numel()) {
      throw ContractError("optimizer state does not match parameter " + name);
    }
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter " + name);
      }
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double step_size = cfg.learning_rate * lr_scale / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    BasicTensor<T> p = params[i].second;  // handle copy, shares storage
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double denom = std::sqrt(static_cast<double>(v[k])) / sqrt_bc2 + cfg.eps;
      x[k] -= static_cast<T>(step_size * static_cast<double>(m[k]) / denom);
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(const NamedTensors<float>&, AdamState<float>&,
                        const AdamConfig&, double);
template void adam_step(const NamedTensors<double>&, AdamState<double>&,
                        const AdamConfig&, double);

}  // namespace qbn
