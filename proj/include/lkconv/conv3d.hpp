#pragma once

#include <cstdint>
#include <string>

#include "lkconv/tensor.hpp"

namespace lkc {

/// Per-channel cubic kernel bank, weights laid out (C, k, k, k). k is always odd.
template <typename T>
class DepthwiseKernel {
 public:
  DepthwiseKernel() = default;
  explicit DepthwiseKernel(Tensor<T> weights);

  static DepthwiseKernel zeros(std::int64_t channels, std::int64_t k);
  /// 1 at the center tap of every channel.
  static DepthwiseKernel identity(std::int64_t channels, std::int64_t k);

  std::int64_t channels() const { return weights_.dim(0); }
  std::int64_t k() const { return weights_.dim(1); }
  std::int64_t center() const { return (k() - 1) / 2; }

  const Tensor<T>& weights() const noexcept { return weights_; }
  Tensor<T>& weights() noexcept { return weights_; }

 private:
  Tensor<T> weights_;
};

/// Throws DomainError for even k, ShapeError for anything that is not (C,k,k,k).
void validate_kernel_shape(const Shape& s);

enum class ConvVariant { naive, blocked };

const char* variant_name(ConvVariant v);
ConvVariant parse_variant(const std::string& s);

/// Selects the convolution implementation. Both variants compute the same sums;
/// the blocked one pads each (n, c) slice once, tiles the output and keeps a row of
/// accumulators in registers. Work is split over (n, c) pairs across `threads`.
///
/// Every reduction runs in double in a fixed order, so results do not depend on the
/// thread count. `deterministic` pins the thread count to 1 anyway.
struct ConvImpl {
  ConvVariant variant = ConvVariant::blocked;
  int tile_d = 4;
  int tile_h = 8;
  int tile_w = 0;  // register tile along w: 4, 8, 16, 32, or 0 to pick from the row length
  int threads = 1;
  bool deterministic = false;

  static ConvImpl naive() { return ConvImpl{ConvVariant::naive}; }
  static ConvImpl blocked() { return ConvImpl{}; }
};

/// Process-wide implementation used by the differentiable ops and the networks.
ConvImpl default_conv_impl();
void set_default_conv_impl(const ConvImpl& impl);

/// SAME zero padding, stride 1:
/// out[n,c,d,h,w] = sum_{a,b,e} in[n,c,d+a-p,h+b-p,w+e-p] * W[c,a,b,e], p = (k-1)/2.
template <typename T>
Tensor<T> dwconv3d_forward(const Tensor<T>& input, const Tensor<T>& weights, const ConvImpl& impl = default_conv_impl());

template <typename T>
Tensor<T> dwconv3d_forward(const Tensor<T>& input, const DepthwiseKernel<T>& kernel,
                           const ConvImpl& impl = default_conv_impl()) {
  return dwconv3d_forward(input, kernel.weights(), impl);
}

/// Adjoint of the forward pass in its input: correlation of grad_out with the flipped kernel.
template <typename T>
Tensor<T> dwconv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weights,
                                  const ConvImpl& impl = default_conv_impl());

template <typename T>
Tensor<T> dwconv3d_backward_input(const Tensor<T>& grad_out, const DepthwiseKernel<T>& kernel,
                                  const ConvImpl& impl = default_conv_impl()) {
  return dwconv3d_backward_input(grad_out, kernel.weights(), impl);
}

/// grad_W[c,a,b,e] = sum_{n,d,h,w} in_padded[n,c,d+a,h+b,w+e] * grad_out[n,c,d,h,w].
template <typename T>
Tensor<T> dwconv3d_backward_weight(const Tensor<T>& input, const Tensor<T>& grad_out, std::int64_t k,
                                   const ConvImpl& impl = default_conv_impl());

/// W[c, k-1-a, k-1-b, k-1-e].
template <typename T>
Tensor<T> flip_kernel(const Tensor<T>& weights);

struct BenchReport {
  std::int64_t k = 0;
  std::int64_t size = 0;
  std::int64_t channels = 0;
  std::string impl;
  std::string dtype;
  double median_ms = 0.0;
  double voxels_per_s = 0.0;
  double checksum = 0.0;

  /// {"op":"dwconv3d","k":..,"size":..,"impl":..,"median_ms":..,"voxels_per_s":..,"checksum":..}
  std::string to_json_line() const;
};

/// Times `repeats` forward passes over a (1, channels, size^3) random volume.
template <typename T>
BenchReport bench_conv(std::int64_t k, std::int64_t size, const ConvImpl& impl, int repeats,
                       std::int64_t channels = 1, std::uint64_t seed = 0);

}  // namespace lkc
