#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "qbn/tensor.hpp"

namespace qbn {

// Per-example validity of key positions (true = real token, false = pad).
class KeyMask {
 public:
  KeyMask() = default;
  KeyMask(std::size_t batch, std::size_t length, std::vector<std::uint8_t> valid);

  static KeyMask all_valid(std::size_t batch, std::size_t length);

  std::size_t batch() const { return batch_; }
  std::size_t length() const { return length_; }
  bool valid(std::size_t b, std::size_t j) const {
    return valid_[b * length_ + j] != 0;
  }
  std::size_t valid_count(std::size_t b) const;

  // Throws ContractError if some example has no valid key.
  void require_nonempty_rows() const;

  // Additive 0 / -inf bias shaped like `target`, whose last axis is the key
  // axis. Rank >= 3 targets carry the batch on axis 0; rank-2 targets need a
  // single-example mask.
  template <typename T>
  BasicTensor<T> additive_bias(const Shape& target) const;

  // Row weights valid / count as a [B x length x width] constant, used for
  // masked means over positions.
  template <typename T>
  BasicTensor<T> mean_weights(std::size_t width) const;

 private:
  std::size_t batch_ = 0;
  std::size_t length_ = 0;
  std::vector<std::uint8_t> valid_;
};

}  // namespace qbn
