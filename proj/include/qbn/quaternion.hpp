#pragma once

#include <array>
#include <cstddef>

#include "qbn/mask.hpp"
#include "qbn/tensor.hpp"

namespace qbn {

// Component order used everywhere: real, i, j, k.
enum QuaternionComponent : std::size_t { kReal = 0, kI = 1, kJ = 2, kK = 3 };

inline constexpr std::array<const char*, 4> kComponentNames = {"r", "i", "j",
                                                               "k"};

struct Quaternion {
  double r = 0.0;
  double i = 0.0;
  double j = 0.0;
  double k = 0.0;

  double operator[](std::size_t c) const;
  double norm() const;
  friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

// v ⊗ w with v as the left operand:
//   r = rv rw - iv iw - jv jw - kv kw
//   i = iv rw + rv iw - kv jw + jv kw
//   j = jv rw + kv iw + rv jw - iv kw
//   k = kv rw - jv iw + iv jw + rv kw
Quaternion hamilton_product(const Quaternion& v, const Quaternion& w);

// The four layers of one modality inside a block, each [n x d] or
// [B x n x d].
template <typename T>
struct QuaternionFeatureStack {
  std::array<BasicTensor<T>, 4> layer;

  const BasicTensor<T>& operator[](std::size_t c) const { return layer[c]; }
  BasicTensor<T>& operator[](std::size_t c) { return layer[c]; }
  const Shape& shape() const { return layer[kReal].shape(); }
  std::size_t channels() const { return shape().back(); }
  // Throws DimensionError unless all four layers share one rank-2/3 shape.
  void validate(const char* what) const;
};

// Score maps and their normalized gates, each [n_q x n_k] (or batched).
// `gate` is empty until quaternion_softmax runs.
template <typename T>
struct QuaternionGate {
  std::array<BasicTensor<T>, 4> score;
  std::array<BasicTensor<T>, 4> gate;
};

// Componentwise Hamilton product of two same-shape stacks.
template <typename T>
QuaternionFeatureStack<T> hamilton_product(const QuaternionFeatureStack<T>& v,
                                           const QuaternionFeatureStack<T>& w);

// Each pairwise term xv * yw becomes the map xv yw^T / sqrt(d); the four
// scores combine the sixteen maps with the Hamilton product's signs.
template <typename T>
QuaternionGate<T> quaternion_scores(const QuaternionFeatureStack<T>& visual,
                                    const QuaternionFeatureStack<T>& text);

// Softmax of each score map along the key axis. Masked keys get gate 0.
template <typename T>
QuaternionGate<T> quaternion_softmax(const QuaternionGate<T>& scores,
                                     const KeyMask* key_mask = nullptr);

}  // namespace qbn
