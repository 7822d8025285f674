#include "qbn/quaternion.hpp"

#include <cmath>

namespace qbn {

namespace {

// Product expansion shared by the scalar and tensor forms.
// kTerms[c][n] = (sign, v component, w component) of the n-th term of
// output component c.
struct Term {
  int sign;
  std::size_t v;
  std::size_t w;
};

constexpr Term kTerms[4][4] = {
    {{+1, kReal, kReal}, {-1, kI, kI}, {-1, kJ, kJ}, {-1, kK, kK}},
    {{+1, kI, kReal}, {+1, kReal, kI}, {-1, kK, kJ}, {+1, kJ, kK}},
    {{+1, kJ, kReal}, {+1, kK, kI}, {+1, kReal, kJ}, {-1, kI, kK}},
    {{+1, kK, kReal}, {-1, kJ, kI}, {+1, kI, kJ}, {+1, kReal, kK}},
};

template <typename T, typename Pair>
std::array<BasicTensor<T>, 4> combine(Pair pair) {
  std::array<BasicTensor<T>, 4> out;
  for (std::size_t c = 0; c < 4; ++c) {
    BasicTensor<T> acc = pair(kTerms[c][0].v, kTerms[c][0].w);
    for (std::size_t n = 1; n < 4; ++n) {
      const Term& t = kTerms[c][n];
      acc = t.sign > 0 ? add(acc, pair(t.v, t.w)) : sub(acc, pair(t.v, t.w));
    }
    out[c] = acc;
  }
  return out;
}

}  // namespace

double Quaternion::operator[](std::size_t c) const {
  switch (c) {
    case kReal: return r;
    case kI: return i;
    case kJ: return j;
    case kK: return k;
  }
  throw InputError("quaternion component " + std::to_string(c));
}

double Quaternion::norm() const {
  return std::sqrt(r * r + i * i + j * j + k * k);
}

Quaternion hamilton_product(const Quaternion& v, const Quaternion& w) {
  double out[4];
  for (std::size_t c = 0; c < 4; ++c) {
    double acc = 0.0;
    for (const Term& t : kTerms[c]) acc += t.sign * v[t.v] * w[t.w];
    out[c] = acc;
  }
  return {out[0], out[1], out[2], out[3]};
}

template <typename T>
void QuaternionFeatureStack<T>::validate(const char* what) const {
  for (std::size_t c = 0; c < 4; ++c) {
    if (!layer[c].defined()) {
      throw DimensionError(std::string(what) + " stack is missing layer " +
                           kComponentNames[c]);
    }
  }
  const Shape& s = shape();
  if (s.size() != 2 && s.size() != 3) {
    throw DimensionError(std::string(what) + " stack layers must be [n x d] " +
                         "or [B x n x d], got " + to_string(s));
  }
  for (std::size_t c = 1; c < 4; ++c) {
    if (layer[c].shape() != s) {
      throw DimensionError(std::string(what) + " stack layer " +
                           kComponentNames[c] + " has shape " +
                           to_string(layer[c].shape()) + ", layer r has " +
                           to_string(s));
    }
  }
}

template <typename T>
QuaternionFeatureStack<T> hamilton_product(const QuaternionFeatureStack<T>& v,
                                           const QuaternionFeatureStack<T>& w) {
  v.validate("left");
  w.validate("right");
  if (v.shape() != w.shape()) {
    throw DimensionError("hamilton product of " + to_string(v.shape()) +
                         " and " + to_string(w.shape()) + " stacks");
  }
  QuaternionFeatureStack<T> out;
  out.layer = combine<T>([&](std::size_t a, std::size_t b) {
    return mul(v[a], w[b]);
  });
  return out;
}

template <typename T>
QuaternionGate<T> quaternion_scores(const QuaternionFeatureStack<T>& visual,
                                    const QuaternionFeatureStack<T>& text) {
  visual.validate("visual");
  text.validate("text");
  if (visual.shape().size() != text.shape().size() ||
      visual.channels() != text.channels() ||
      (visual.shape().size() == 3 && visual.shape()[0] != text.shape()[0])) {
    throw DimensionError("quaternion scores: visual stack " +
                         to_string(visual.shape()) + " vs text stack " +
                         to_string(text.shape()));
  }
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(visual.channels()));
  std::array<BasicTensor<T>, 4> text_t;
  for (std::size_t c = 0; c < 4; ++c) text_t[c] = transpose(text[c]);

  // Sixteen similarity maps, each computed once.
  std::array<std::array<BasicTensor<T>, 4>, 4> sim;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      sim[a][b] = scale(matmul(visual[a], text_t[b]), inv_sqrt_d);

  QuaternionGate<T> out;
  out.score = combine<T>([&](std::size_t a, std::size_t b) {
    return sim[a][b];
  });
  return out;
}

template <typename T>
QuaternionGate<T> quaternion_softmax(const QuaternionGate<T>& scores,
                                     const KeyMask* key_mask) {
  QuaternionGate<T> out;
  out.score = scores.score;
  for (std::size_t c = 0; c < 4; ++c) {
    const BasicTensor<T>& s = scores.score[c];
    if (!s.defined()) {
      throw ContractError(std::string("quaternion softmax: score ") +
                          kComponentNames[c] + " is not populated");
    }
    BasicTensor<T> logits = s;
    if (key_mask) {
      key_mask->require_nonempty_rows();
      logits = add(s, key_mask->additive_bias<T>(s.shape()));
    }
    out.gate[c] = softmax(logits, s.rank() - 1);
  }
  return out;
}

#define QBN_INSTANTIATE_QUATERNION(T)                                      \
  template struct QuaternionFeatureStack<T>;                               \
  template QuaternionFeatureStack<T> hamilton_product(                     \
      const QuaternionFeatureStack<T>&, const QuaternionFeatureStack<T>&); \
  template QuaternionGate<T> quaternion_scores(                            \
      const QuaternionFeatureStack<T>&, const QuaternionFeatureStack<T>&); \
  template QuaternionGate<T> quaternion_softmax(const QuaternionGate<T>&,  \
                                                const KeyMask*);

QBN_INSTANTIATE_QUATERNION(float)
QBN_INSTANTIATE_QUATERNION(double)

}  // namespace qbn
