#include "qbn/mask.hpp"

#include <limits>

namespace qbn {

KeyMask::KeyMask(std::size_t batch, std::size_t length,
                 std::vector<std::uint8_t> valid)
    : batch_(batch), length_(length), valid_(std::move(valid)) {
  if (valid_.size() != batch_ * length_) {
    throw DimensionError("key mask needs " + std::to_string(batch_ * length_) +
                         " entries, got " + std::to_string(valid_.size()));
  }
}

KeyMask KeyMask::all_valid(std::size_t batch, std::size_t length) {
  return KeyMask(batch, length, std::vector<std::uint8_t>(batch * length, 1));
}

std::size_t KeyMask::valid_count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t j = 0; j < length_; ++j) n += valid(b, j);
  return n;
}

void KeyMask::require_nonempty_rows() const {
  for (std::size_t b = 0; b < batch_; ++b) {
    if (valid_count(b) == 0) {
      throw ContractError("every key of example " + std::to_string(b) +
                          " is masked");
    }
  }
}

template <typename T>
BasicTensor<T> KeyMask::additive_bias(const Shape& target) const {
  const bool batched = target.size() >= 3;
  const std::size_t batch = batched ? target.front() : 1;
  if (target.empty() || target.back() != length_ || batch != batch_) {
    throw DimensionError("key mask [" + std::to_string(batch_) + "x" +
                         std::to_string(length_) +
                         "] does not fit attention shape " + to_string(target));
  }
  const std::size_t n = element_count(target);
  const std::size_t per_example = n / batch;
  std::vector<T> bias(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = i / per_example;
    if (!valid(b, i % length_)) bias[i] = -std::numeric_limits<T>::infinity();
  }
  return BasicTensor<T>(target, std::move(bias));
}

template <typename T>
BasicTensor<T> KeyMask::mean_weights(std::size_t width) const {
  require_nonempty_rows();
  std::vector<T> w(batch_ * length_ * width, T(0));
  for (std::size_t b = 0; b < batch_; ++b) {
    const T weight = T(1) / static_cast<T>(valid_count(b));
    for (std::size_t j = 0; j < length_; ++j) {
      if (!valid(b, j)) continue;
      for (std::size_t c = 0; c < width; ++c) {
        w[(b * length_ + j) * width + c] = weight;
      }
    }
  }
  return BasicTensor<T>({batch_, length_, width}, std::move(w));
}

template BasicTensor<float> KeyMask::additive_bias<float>(const Shape&) const;
template BasicTensor<double> KeyMask::additive_bias<double>(const Shape&) const;
template BasicTensor<float> KeyMask::mean_weights<float>(std::size_t) const;
template BasicTensor<double> KeyMask::mean_weights<double>(std::size_t) const;

}  // namespace qbn
