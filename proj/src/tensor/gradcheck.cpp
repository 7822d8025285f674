#include "qbn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace qbn {

namespace {

template <typename T>
BasicTensor<T> project(const BasicTensor<T>& out,
                       const BasicTensor<T>& weights) {
  if (out.rank() == 0) return out;
  return sum_all(mul(out, weights));
}

template <typename T>
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t limit,
                                        CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (limit == 0 || limit >= n) return idx;
  for (std::size_t i = 0; i < limit; ++i) {
    std::swap(idx[i], idx[i + rng.index(n - i)]);
  }
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

template <typename T>
GradcheckReport gradcheck(const std::function<BasicTensor<T>()>& f,
                          const NamedTensors<T>& inputs,
                          const GradcheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("gradcheck: eps must be > 0");

  BasicTensor<T> first = f();
  BasicTensor<T> second = f();
  if (first.shape() != second.shape() ||
      std::memcmp(first.values().data(), second.values().data(),
                  first.numel() * sizeof(T)) != 0) {
    throw ContractError("gradcheck: function is not deterministic");
  }

  CounterRng rng(options.seed);
  std::vector<T> w(first.numel());
  for (T& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  const BasicTensor<T> weights(first.shape(), std::move(w));

  for (const auto& [name, x] : inputs) {
    BasicTensor<T> handle = x;
    if (!handle.requires_grad()) {
      throw ContractError("gradcheck: input '" + name +
                          "' does not require grad");
    }
    handle.zero_grad();
  }
  project(f(), weights).backward();

  GradcheckReport report;
  for (const auto& [name, x] : inputs) {
    BasicTensor<T> handle = x;
    std::vector<T> analytic(handle.numel(), T(0));
    if (handle.has_grad()) {
      auto g = handle.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto values = handle.mutable_values();
    for (std::size_t i : sample_indices<T>(handle.numel(),
                                           options.max_elements_per_input,
                                           rng)) {
      const T original = values[i];
      values[i] = original + static_cast<T>(options.eps);
      double plus;
      double minus;
      {
        NoGradGuard no_grad;
        plus = static_cast<double>(project(f(), weights).item());
        values[i] = original - static_cast<T>(options.eps);
        minus = static_cast<double>(project(f(), weights).item());
      }
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = static_cast<double>(analytic[i]);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = err;
        report.worst_input = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
    handle.zero_grad();
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

template <typename T>
GradcheckReport gradcheck(
    const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
    const BasicTensor<T>& x, const GradcheckOptions& options) {
  BasicTensor<T> input = x;
  return gradcheck<T>(std::function<BasicTensor<T>()>([&] { return f(input); }),
                      NamedTensors<T>{{"x", input}}, options);
}

template GradcheckReport gradcheck<float>(
    const std::function<BasicTensor<float>()>&, const NamedTensors<float>&,
    const GradcheckOptions&);
template GradcheckReport gradcheck<double>(
    const std::function<BasicTensor<double>()>&, const NamedTensors<double>&,
    const GradcheckOptions&);
template GradcheckReport gradcheck<float>(
    const std::function<BasicTensor<float>(const BasicTensor<float>&)>&,
    const BasicTensor<float>&, const GradcheckOptions&);
template GradcheckReport gradcheck<double>(
    const std::function<BasicTensor<double>(const BasicTensor<double>&)>&,
    const BasicTensor<double>&, const GradcheckOptions&);

}  // namespace qbn
