#pragma once

#include "dyna/core.hpp"
#include "dyna/rng.hpp"

#include <cstddef>
#include <vector>

namespace dyna {

/// Fixed-capacity FIFO with uniform sampling. Index 0 is the oldest element.
template <typename T>
class RingBuffer {
 public:
  explicit RingBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw ConfigError("ring buffer capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity_, 1 << 16));
  }

  void push(T item) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
    } else {
      items_[head_] = std::move(item);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }

  const T& operator[](std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

  const T& sample(Rng& rng) const { return (*this)[rng.below(items_.size())]; }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<T> items_;
};

}  // namespace dyna
