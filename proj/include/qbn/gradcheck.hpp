#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qbn/tensor.hpp"

namespace qbn {

struct GradcheckOptions {
  double eps = 1e-4;
  double tol = 1e-3;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor),
  // so entries whose true gradient is ~0 are judged on absolute error.
  double abs_floor = 1e-6;
  // 0 checks every element; otherwise a seeded sample of this many per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 17;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t elements_checked = 0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

// Compares reverse-mode gradients of `f` with respect to every tensor in
// `inputs` against central differences. Non-scalar outputs are reduced with a
// fixed seeded projection, so the check covers a random vector-Jacobian
// product. `f` is evaluated twice up front; differing outputs raise
// ContractError (non-deterministic function).
template <typename T>
GradcheckReport gradcheck(const std::function<BasicTensor<T>()>& f,
                          const NamedTensors<T>& inputs,
                          const GradcheckOptions& options = {});

template <typename T>
GradcheckReport gradcheck(
    const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
    const BasicTensor<T>& x, const GradcheckOptions& options = {});

}  // namespace qbn
