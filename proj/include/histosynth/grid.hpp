#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "histosynth/error.hpp"

namespace histosynth {

/// Dense row-major H×W array.
template <typename T>
class Grid {
public:
  using value_type = T;

  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(checked(height) * checked(width)), fill) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int y, int x) { return data_[index(y, x)]; }
  const T& operator()(int y, int x) const { return data_[index(y, x)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const auto& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  /// Copy of the window [y0, y0+h) × [x0, x0+w); caller guarantees bounds.
  Grid crop(int y0, int x0, int h, int w) const {
    Grid out(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out(y, x) = (*this)(y0 + y, x0 + x);
    return out;
  }

  friend bool operator==(const Grid&, const Grid&) = default;

private:
  static std::ptrdiff_t checked(int n) {
    if (n < 0) throw ValidationError("grid dimension must be non-negative");
    return n;
  }
  std::size_t index(int y, int x) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

using RgbImage = Grid<Rgb>;
/// Per-pixel subtype codes (see Subtype).
using SubtypeMask = Grid<std::uint8_t>;
/// Per-pixel instance ids, 0 = background.
using InstanceMap = Grid<std::uint16_t>;

}  // namespace histosynth
