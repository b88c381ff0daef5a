#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "lkconv/errors.hpp"
#include "lkconv/rng.hpp"

namespace lkc {

using Shape = std::vector<std::int64_t>;

/// Element type tag, numerically identical to the dtype byte of the VOL3 and CKPT formats.
enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};
template <>
struct dtype_of<std::uint8_t> {
  static constexpr DType value = DType::u8;
};

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw DomainError("unknown dtype");
}

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Throws ShapeError unless the shape is nonempty with every dim >= 1.
inline std::size_t checked_numel(const Shape& s) {
  if (s.empty()) throw ShapeError("shape must have at least one axis");
  std::size_t n = 1;
  for (auto d : s) {
    if (d < 1) throw ShapeError("dimension < 1 in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Dense C-order array. Copies are deep; there are no views.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  static constexpr DType dtype = dtype_of<T>::value;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  /// i.i.d. N(0, std^2) samples, drawn in flat order.
  static Tensor randn(Shape shape, Rng& rng, double std = 1.0) {
    static_assert(std::is_floating_point_v<T>);
    if (!(std > 0.0)) throw DomainError("randn: std must be positive");
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(std * rng.normal());
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    static_assert(std::is_floating_point_v<T>);
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * static_cast<std::size_t>(shape_[i]);
    return s;
  }

  std::size_t offset(std::span<const std::int64_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= shape_[i]) throw ShapeError("index out of range");
      off = off * static_cast<std::size_t>(shape_[i]) + static_cast<std::size_t>(idx[i]);
    }
    return off;
  }

  std::vector<std::int64_t> coords(std::size_t flat) const {
    std::vector<std::int64_t> c(shape_.size());
    for (std::size_t i = shape_.size(); i-- > 0;) {
      c[i] = static_cast<std::int64_t>(flat % static_cast<std::size_t>(shape_[i]));
      flat /= static_cast<std::size_t>(shape_[i]);
    }
    return c;
  }

  T& at(std::initializer_list<std::int64_t> idx) { return data_[offset(std::span(idx.begin(), idx.size()))]; }
  const T& at(std::initializer_list<std::int64_t> idx) const {
    return data_[offset(std::span(idx.begin(), idx.size()))];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != data_.size())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T x) { return static_cast<U>(x); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool bitwise_equal(const Tensor& o) const {
    return shape_ == o.shape_ && std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>::zeros(t.shape());
}
template <typename T>
Tensor<T> ones_like(const Tensor<T>& t) {
  return Tensor<T>::ones(t.shape());
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> zip_with(const Tensor<T>& a, const Tensor<T>& b, F f, const char* op) {
  require_same_shape(a.shape(), b.shape(), op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x + y; }, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip_with(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  return map(a, [s](T x) { return static_cast<T>(s * x); });
}

/// a += s * b
template <typename T>
void axpy_inplace(Tensor<T>& a, double s, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<T>(a[i] + s * b[i]);
}

template <typename T>
double sum(const Tensor<T>& a) {
  double s = 0.0;
  for (auto x : a.data()) s += x;
  return s;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (auto x : a.data()) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// max |a - b| scaled by the larger infinity norm of the two (0 when both vanish).
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  const double scale_ = std::max(max_abs(a), max_abs(b));
  const double d = max_abs_diff(a, b);
  return scale_ > 0.0 ? d / scale_ : d;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  for (auto x : a.data())
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

/// Checksum used by benches to keep the optimizer honest: plain sum in double.
template <typename T>
double checksum(const Tensor<T>& a) {
  return sum(a);
}

}  // namespace lkc
