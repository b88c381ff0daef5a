#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "lkconv/autodiff.hpp"
#include "lkconv/conv3d.hpp"

// Differentiable ops recorded on a Tape. Activations are N,C,D,H,W throughout.
namespace lkc::ad {

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, double s);

/// Scalar sum of all elements, shape {1}.
template <typename T>
Var<T> sum(Var<T> a);
/// 0.5 * ||a||^2
template <typename T>
Var<T> half_sq_norm(Var<T> a);
/// 0.5 * ||a - target||^2 with a constant target.
template <typename T>
Var<T> half_sq_error(Var<T> a, const Tensor<T>& target);

/// Depth-wise kernel (C,k,k,k) times a constant (k,k,k) grid shared by every channel.
template <typename T>
Var<T> scale_by_grid(Var<T> weights, const Tensor<T>& grid);

/// SAME-padded depth-wise convolution.
template <typename T>
Var<T> dwconv3d(Var<T> input, Var<T> weights, const ConvImpl& impl = default_conv_impl());

/// Per-channel batch statistics of the last training-mode batch norm call.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
  std::int64_t count = 0;   // elements per channel
};

/// Batch norm with statistics over (N, D, H, W). gamma and beta have shape {C}.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, double eps, BatchStats* stats = nullptr);

template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                       const Tensor<T>& running_var, double eps);

/// x * Phi(x) with the erf-based normal CDF.
template <typename T>
Var<T> gelu(Var<T> x);

/// Per-voxel channel mixing: out[n,o,v] = bias[o] + sum_i W[o,i] x[n,i,v]. W is (Co, Ci).
template <typename T>
Var<T> pointwise(Var<T> x, Var<T> weights, Var<T> bias);

/// Stride-2, 2x2x2 convolution that also maps Ci -> Co channels. W is (Co, Ci, 2, 2, 2).
template <typename T>
Var<T> downsample(Var<T> x, Var<T> weights, Var<T> bias);

/// Nearest-neighbour x2 upsampling of every spatial axis.
template <typename T>
Var<T> upsample2(Var<T> x);

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);

/// 1 - mean over classes of soft Dice on softmax(logits), with `smooth` added to
/// numerator and denominator. logits are (N,K,D,H,W), labels (N,D,H,W).
template <typename T>
Var<T> soft_dice_loss(Var<T> logits, const Tensor<std::uint8_t>& labels, double smooth = 1e-5);

/// Sum over channels of x[batch, :, D/2, H/2, W/2].
template <typename T>
Var<T> center_sum(Var<T> x, std::int64_t batch = 0);

}  // namespace lkc::ad

namespace lkc {

// Plain tensor helpers shared by the ops and the metrics.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Argmax over the channel axis: (N,K,D,H,W) -> (N,D,H,W).
template <typename T>
Tensor<std::uint8_t> argmax_channels(const Tensor<T>& logits);

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace lkc
