#include <array>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "blas.hpp"
#include "qbn/tensor.hpp"

namespace qbn {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
using BackwardFn = std::function<void(detail::Node<T>&)>;

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::vector<NodePtr<T>> inputs,
                           BackwardFn<T> backward) {
  if (shape.size() > kMaxRank) {
    throw DimensionError(std::string(op) + ": result rank exceeds 4, shape " +
                         to_string(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool record =
      GradMode::enabled() &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const NodePtr<T>& n) { return n->requires_grad; });
  if (record) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

std::size_t product(const Shape& shape, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= shape[i];
  return n;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

void check_axis(const char* op, std::size_t axis, const Shape& shape) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(shape));
  }
}

// Elementwise binary with trailing-suffix broadcast. `value(a, b)` computes the
// output; `partial_a/partial_b(a, b, out)` give the local derivatives.
template <typename T, typename F, typename DA, typename DB>
BasicTensor<T> binary(const char* op, const BasicTensor<T>& a,
                      const BasicTensor<T>& b, F value, DA partial_a,
                      DB partial_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape out_shape;
  if (sa == sb || is_suffix(sb, sa)) {
    out_shape = sa;
  } else if (is_suffix(sa, sb)) {
    out_shape = sb;
  } else {
    throw DimensionError(std::string(op) + ": shapes " + to_string(sa) +
                         " and " + to_string(sb) + " are not broadcastable");
  }
  const std::size_t n = element_count(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const std::size_t inner = std::min(na, nb);
  const std::size_t reps = n / inner;
  const bool a_full = na == n;
  const bool b_full = nb == n;

  std::span<const T> av = a.values();
  std::span<const T> bv = b.values();
  std::vector<T> out(n);
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t i = r * inner + j;
      out[i] = value(av[a_full ? i : j], bv[b_full ? i : j]);
    }
  }
  return make_result<T>(
      op, out_shape, std::move(out), {a.node(), b.node()},
      [=](detail::Node<T>& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        const auto& g = self.grad;
        if (an.requires_grad) {
          auto& ga = an.grad_buffer();
          for (std::size_t r = 0; r < reps; ++r) {
            for (std::size_t j = 0; j < inner; ++j) {
              const std::size_t i = r * inner + j;
              const std::size_t ia = a_full ? i : j;
              ga[ia] += g[i] * partial_a(an.data[ia], bn.data[b_full ? i : j],
                                         self.data[i]);
            }
          }
        }
        if (bn.requires_grad) {
          auto& gb = bn.grad_buffer();
          for (std::size_t r = 0; r < reps; ++r) {
            for (std::size_t j = 0; j < inner; ++j) {
              const std::size_t i = r * inner + j;
              const std::size_t ib = b_full ? i : j;
              gb[ib] += g[i] * partial_b(an.data[a_full ? i : j], bn.data[ib],
                                         self.data[i]);
            }
          }
        }
      });
}

template <typename T, typename F, typename DF>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, F value,
                     DF partial) {
  std::span<const T> xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = value(xv[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          auto& gx = xn.grad_buffer();
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += self.grad[i] *
                                     partial(xn.data[i], self.data[i]);
                          }
                        });
}

void accumulate(std::vector<float>& dst, const std::vector<float>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// --- elementwise ------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& x, T alpha, T beta) {
  return unary<T>(
      "affine", x, [=](T v) { return alpha * v + beta; },
      [=](T, T) { return alpha; });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// --- linear algebra and layout -----------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&]() {
    return DimensionError("matmul: incompatible shapes " + to_string(sa) +
                          " and " + to_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) throw mismatch();
  const std::size_t n = sb.back();
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);

  const int mi = static_cast<int>(m);
  const int ni = static_cast<int>(n);
  const int ki = static_cast<int>(k);

  if (sb.size() == 2) {
    const std::size_t rows = a.numel() / k;
    const int ri = static_cast<int>(rows);
    std::vector<T> out(rows * n);
    detail::gemm(false, false, ri, ni, ki, T(1), a.values().data(), ki,
                 b.values().data(), ni, T(0), out.data(), ni);
    return make_result<T>(
        "matmul", out_shape, std::move(out), {a.node(), b.node()},
        [=](detail::Node<T>& self) {
          auto& an = *self.inputs[0];
          auto& bn = *self.inputs[1];
          if (an.requires_grad) {
            detail::gemm(false, true, ri, ki, ni, T(1), self.grad.data(), ni,
                         bn.data.data(), ni, T(1), an.grad_buffer().data(), ki);
          }
          if (bn.requires_grad) {
            detail::gemm(true, false, ki, ni, ri, T(1), an.data.data(), ki,
                         self.grad.data(), ni, T(1), bn.grad_buffer().data(),
                         ni);
          }
        });
  }

  if (sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw mismatch();
  }
  const std::size_t batches = product(sa, 0, sa.size() - 2);
  std::vector<T> out(batches * m * n);
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  for (std::size_t i = 0; i < batches; ++i) {
    detail::gemm(false, false, mi, ni, ki, T(1), ap + i * m * k, ki,
                 bp + i * k * n, ni, T(0), out.data() + i * m * n, ni);
  }
  return make_result<T>(
      "matmul", out_shape, std::move(out), {a.node(), b.node()},
      [=](detail::Node<T>& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        for (std::size_t i = 0; i < batches; ++i) {
          const T* g = self.grad.data() + i * m * n;
          if (an.requires_grad) {
            detail::gemm(false, true, mi, ki, ni, T(1), g, ni,
                         bn.data.data() + i * k * n, ni, T(1),
                         an.grad_buffer().data() + i * m * k, ki);
          }
          if (bn.requires_grad) {
            detail::gemm(true, false, ki, ni, mi, T(1),
                         an.data.data() + i * m * k, ki, g, ni, T(1),
                         bn.grad_buffer().data() + i * k * n, ni);
          }
        }
      });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) {
    throw DimensionError("transpose: needs rank >= 2, got " + to_string(s));
  }
  const std::size_t m = s[s.size() - 2];
  const std::size_t n = s.back();
  const std::size_t batches = x.numel() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::span<const T> xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t base = b * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * m + i] = xv[base + i * n + j];
      }
    }
  }
  return make_result<T>("transpose", out_shape, std::move(out), {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& gx = self.inputs[0]->grad_buffer();
                          for (std::size_t b = 0; b < batches; ++b) {
                            const std::size_t base = b * m * n;
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                gx[base + i * n + j] +=
                                    self.grad[base + j * m + i];
                              }
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  if (element_count(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) +
                         " as " + to_string(shape));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("reshape: zero extent in " + to_string(shape));
  }
  std::span<const T> xv = x.values();
  return make_result<T>("reshape", shape, std::vector<T>(xv.begin(), xv.end()),
                        {x.node()}, [](detail::Node<T>& self) {
                          accumulate(self.inputs[0]->grad_buffer(), self.grad);
                        });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x,
                       const std::vector<std::size_t>& axes) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> identity(r);
  std::iota(identity.begin(), identity.end(), 0);
  if (sorted != identity) {
    throw DimensionError("permute: invalid axis order for shape " +
                         to_string(s));
  }
  std::array<std::size_t, kMaxRank> in_stride{};
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = stride;
    stride *= s[i];
  }
  // Pad to rank 4 with unit leading extents.
  std::array<std::size_t, kMaxRank> ext{1, 1, 1, 1};
  std::array<std::size_t, kMaxRank> src_stride{0, 0, 0, 0};
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[axes[i]];
    ext[kMaxRank - r + i] = s[axes[i]];
    src_stride[kMaxRank - r + i] = in_stride[axes[i]];
  }
  std::vector<std::size_t> map(x.numel());
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < ext[0]; ++i0)
    for (std::size_t i1 = 0; i1 < ext[1]; ++i1)
      for (std::size_t i2 = 0; i2 < ext[2]; ++i2)
        for (std::size_t i3 = 0; i3 < ext[3]; ++i3)
          map[o++] = i0 * src_stride[0] + i1 * src_stride[1] +
                     i2 * src_stride[2] + i3 * src_stride[3];
  std::span<const T> xv = x.values();
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  return make_result<T>("permute", out_shape, std::move(out), {x.node()},
                        [map = std::move(map)](detail::Node<T>& self) {
                          auto& gx = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < map.size(); ++i) {
                            gx[map[i]] += self.grad[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& x, std::size_t axis,
                      std::size_t count) {
  const Shape& s = x.shape();
  if (axis > s.size() || count == 0) {
    throw DimensionError("expand: invalid axis " + std::to_string(axis) +
                         " or count for shape " + to_string(s));
  }
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis),
                   count);
  const std::size_t outer = product(s, 0, axis);
  const std::size_t inner = product(s, axis, s.size());
  std::span<const T> xv = x.values();
  std::vector<T> out(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * count + c) * inner));
  return make_result<T>("expand", out_shape, std::move(out), {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& gx = self.inputs[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t c = 0; c < count; ++c)
                              for (std::size_t i = 0; i < inner; ++i)
                                gx[o * inner + i] +=
                                    self.grad[(o * count + c) * inner + i];
                        });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: empty input list");
  const Shape& first = xs.front().shape();
  check_axis("concat", axis, first);
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: extent mismatch between " +
                           to_string(first) + " and " + to_string(s) +
                           " along axis " + std::to_string(axis));
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const std::size_t outer = product(first, 0, axis);
  const std::size_t inner = product(first, axis + 1, first.size());
  std::vector<T> out(outer * total * inner);
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < xs.size(); ++p) {
    std::span<const T> xv = xs[p].values();
    const std::size_t chunk = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() +
                      static_cast<std::ptrdiff_t>(o * total * inner + offset));
    }
    offset += chunk;
    inputs.push_back(xs[p].node());
  }
  return make_result<T>(
      "concat", out_shape, std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
          const std::size_t chunk = extents[p] * inner;
          auto& in = *self.inputs[p];
          if (in.requires_grad) {
            auto& g = in.grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < chunk; ++i)
                g[o * chunk + i] += self.grad[o * total * inner + off + i];
          }
          off += chunk;
        }
      });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis,
                     std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  check_axis("slice", axis, s);
  if (begin >= end || end > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t outer = product(s, 0, axis);
  const std::size_t inner = product(s, axis + 1, s.size());
  const std::size_t full = s[axis] * inner;
  const std::size_t chunk = (end - begin) * inner;
  const std::size_t off = begin * inner;
  std::span<const T> xv = x.values();
  std::vector<T> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * full + off), chunk,
                out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  return make_result<T>("slice", out_shape, std::move(out), {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < chunk; ++i)
                              g[o * full + off + i] += self.grad[o * chunk + i];
                        });
}

// --- reductions ----------------------------------------------------------------

namespace {
template <typename T>
BasicTensor<T> reduce_axis(const char* op, const BasicTensor<T>& x,
                           std::size_t axis, T factor) {
  const Shape& s = x.shape();
  check_axis(op, axis, s);
  const std::size_t outer = product(s, 0, axis);
  const std::size_t extent = s[axis];
  const std::size_t inner = product(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::span<const T> xv = x.values();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * extent + e) * inner + i];
  for (T& v : out) v *= factor;
  return make_result<T>(op, out_shape, std::move(out), {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t e = 0; e < extent; ++e)
                              for (std::size_t i = 0; i < inner; ++i)
                                g[(o * extent + e) * inner + i] +=
                                    factor * self.grad[o * inner + i];
                        });
}

template <typename T>
BasicTensor<T> reduce_all(const char* op, const BasicTensor<T>& x, T factor) {
  std::span<const T> xv = x.values();
  T total = T(0);
  for (T v : xv) total += v;
  return make_result<T>(op, Shape{}, std::vector<T>{total * factor}, {x.node()},
                        [=](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const T d = factor * self.grad[0];
                          for (T& v : g) v += d;
                        });
}
}  // namespace

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, std::size_t axis) {
  return reduce_axis<T>("sum", x, axis, T(1));
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis) {
  check_axis("mean", axis, x.shape());
  return reduce_axis<T>("mean", x, axis, T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  return reduce_all<T>("sum_all", x, T(1));
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
  return reduce_all<T>("mean_all", x, T(1) / static_cast<T>(x.numel()));
}

// --- normalizations --------------------------------------------------------------

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  check_axis("softmax", axis, s);
  const std::size_t outer = product(s, 0, axis);
  const std::size_t extent = s[axis];
  const std::size_t inner = product(s, axis + 1, s.size());
  std::span<const T> xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e)
        peak = std::max(peak, xv[base + e * inner]);
      T total = T(0);
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(xv[base + e * inner] - peak);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  return make_result<T>(
      "softmax", s, std::move(out), {x.node()}, [=](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const auto& y = self.data;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * extent * inner + i;
            T dot = T(0);
            for (std::size_t e = 0; e < extent; ++e)
              dot += self.grad[base + e * inner] * y[base + e * inner];
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t k = base + e * inner;
              g[k] += y[k] * (self.grad[k] - dot);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  const Shape& s = x.shape();
  if (s.empty() || gamma.shape() != Shape{s.back()} ||
      beta.shape() != Shape{s.back()}) {
    throw DimensionError("layer_norm: input " + to_string(s) + ", gamma " +
                         to_string(gamma.shape()) + ", beta " +
                         to_string(beta.shape()));
  }
  const std::size_t d = s.back();
  const std::size_t rows = x.numel() / d;
  std::span<const T> xv = x.values();
  std::span<const T> gv = gamma.values();
  std::span<const T> bv = beta.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * inv;
      xhat[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return make_result<T>(
      "layer_norm", s, std::move(out), {x.node(), gamma.node(), beta.node()},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](
          detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const auto& g = self.grad;
        if (gn.requires_grad) {
          auto& gg = gn.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i)
              gg[i] += g[r * d + i] * xhat[r * d + i];
        }
        if (bn.requires_grad) {
          auto& gb = bn.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
        if (xn.requires_grad) {
          auto& gx = xn.grad_buffer();
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0);
            T mean_dh_h = T(0);
            for (std::size_t i = 0; i < d; ++i) {
              dh[i] = g[r * d + i] * gn.data[i];
              mean_dh += dh[i];
              mean_dh_h += dh[i] * xhat[r * d + i];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t i = 0; i < d; ++i) {
              gx[r * d + i] +=
                  rstd[r] * (dh[i] - mean_dh - xhat[r * d + i] * mean_dh_h);
            }
          }
        }
      });
}

// --- lookup, regularization, loss --------------------------------------------

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const std::int32_t> ids,
                         const Shape& ids_shape) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be rank 2, got " +
                         to_string(table.shape()));
  }
  if (element_count(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids shape " + to_string(ids_shape) +
                         " does not match " + std::to_string(ids.size()) +
                         " ids");
  }
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> index(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw InputError("token id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(rows));
    }
    index[i] = static_cast<std::size_t>(ids[i]);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::span<const T> tv = table.values();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(index[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result<T>("embedding", out_shape, std::move(out), {table.node()},
                        [=, index = std::move(index)](detail::Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < index.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j)
                              g[index[i] * d + j] += self.grad[i * d + j];
                        });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, CounterRng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout rate must be in [0, 1), got " +
                        std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (T& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
  BasicTensor<T> mask_tensor(x.shape(), std::move(mask));
  return mul(x, mask_tensor);
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("softmax_cross_entropy: logits " +
                         to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  std::vector<std::int32_t> labels(targets.begin(), targets.end());
  for (std::int32_t t : labels) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw InputError("target class " + std::to_string(t) + " outside " +
                       std::to_string(classes) + " classes");
    }
  }
  std::span<const T> lv = logits.values();
  std::vector<T> probs(lv.size());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv.data() + b * classes;
    const T peak = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - peak);
      total += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= total;
    loss += std::log(total) + peak - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  return make_result<T>(
      "softmax_cross_entropy", Shape{}, std::vector<T>{loss}, {logits.node()},
      [=, probs = std::move(probs), labels = std::move(labels)](
          detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T scale_factor = self.grad[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < classes; ++c) {
            T p = probs[b * classes + c];
            if (static_cast<std::int32_t>(c) == labels[b]) p -= T(1);
            g[b * classes + c] += scale_factor * p;
          }
        }
      });
}

#define QBN_INSTANTIATE_OPS(T)                                                 \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> affine(const BasicTensor<T>&, T, T);                 \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                      \
  template BasicTensor<T> relu(const BasicTensor<T>&);                         \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                    \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);        \
  template BasicTensor<T> permute(const BasicTensor<T>&,                       \
                                  const std::vector<std::size_t>&);            \
  template BasicTensor<T> expand(const BasicTensor<T>&, std::size_t,           \
                                 std::size_t);                                 \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&,           \
                                 std::size_t);                                 \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t,            \
                                std::size_t, std::size_t);                     \
  template BasicTensor<T> sum(const BasicTensor<T>&, std::size_t);             \
  template BasicTensor<T> mean(const BasicTensor<T>&, std::size_t);            \
  template BasicTensor<T> sum_all(const BasicTensor<T>&);                      \
  template BasicTensor<T> mean_all(const BasicTensor<T>&);                     \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);         \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&,                    \
                                     const BasicTensor<T>&,                    \
                                     const BasicTensor<T>&, T);                \
  template BasicTensor<T> embedding(const BasicTensor<T>&,                     \
                                    std::span<const std::int32_t>,             \
                                    const Shape&);                             \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, CounterRng&); \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&,         \
                                                std::span<const std::int32_t>);

QBN_INSTANTIATE_OPS(float)
QBN_INSTANTIATE_OPS(double)

#undef QBN_INSTANTIATE_OPS

}  // namespace qbn
