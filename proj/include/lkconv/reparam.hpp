#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lkconv/autodiff.hpp"
#include "lkconv/conv3d.hpp"
#include "lkconv/optim.hpp"

namespace lkc {

// ---------------------------------------------------------------------------
// Frequency prior

/// Euclidean distance of (x, y, z) from (c, c, c).
double distance(std::int64_t x, std::int64_t y, std::int64_t z, double c);

/// delta[x,y,z] = alpha / (d(x,y,z,c) + alpha) on a k^3 grid with c = (k-1)/2.
struct FrequencyPrior {
  std::int64_t k = 1;
  double alpha = 1.0;
  std::int64_t center = 0;
  Tensor<double> grid{Shape{1, 1, 1}, 1.0};

  template <typename T>
  Tensor<T> grid_as() const {
    return grid.cast<T>();
  }
};

/// DomainError for even or non-positive k and for alpha <= 0.
FrequencyPrior frequency_prior(std::int64_t k, double alpha);

/// V = delta * W' with the same grid for every channel.
template <typename T>
DepthwiseKernel<T> bfr_effective_weight(const DepthwiseKernel<T>& latent, const FrequencyPrior& prior);

/// Loss built on top of a layer output. Used by the single-layer training steps.
template <typename T>
using LayerLoss = std::function<ad::Var<T>(ad::Tape<T>&, ad::Var<T>)>;

// ---------------------------------------------------------------------------
// BFR layer

/// Depth-wise conv whose forward pass always convolves with V = delta * W'.
/// The optimizer sees W' (the latent weight). With `literal_update` the SGD step
/// becomes W' <- delta * W' - lr * dL/dV instead.
template <typename T>
struct BfrConv {
  Tensor<T> latent;
  FrequencyPrior prior;
  bool literal_update = false;

  BfrConv(Tensor<T> latent_weight, FrequencyPrior p);

  std::int64_t channels() const { return latent.dim(0); }
  std::int64_t k() const { return latent.dim(1); }

  Tensor<T> effective() const;
  Tensor<T> forward(const Tensor<T>& x, const ConvImpl& impl = default_conv_impl()) const;
  /// Records the forward pass with the latent weight as a tape variable.
  ad::Var<T> forward(ad::Var<T> x, ad::Var<T> latent_var, const ConvImpl& impl = default_conv_impl()) const;
};

/// Plain kernel that reproduces the BFR layer's forward pass.
template <typename T>
DepthwiseKernel<T> bfr_export(const BfrConv<T>& block);

/// One optimizer step on the latent weight (registered as `name`). Returns the loss
/// before the update.
template <typename T>
double bfr_train_step(BfrConv<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss, Optimizer<T>& opt,
                      const std::string& name = "w");

// ---------------------------------------------------------------------------
// CSLA block and its single-operator counterparts

/// Y = alpha_l * (X * W_L) + alpha_s * (X * W_S), trained with a learning rate per branch.
template <typename T>
struct CslaBlock {
  Tensor<T> w_large;
  Tensor<T> w_small;
  double alpha_large = 1.0;
  double alpha_small = 1.0;
  double lr_large = 0.0003;
  double lr_small = 0.0006;

  void validate() const;
  std::int64_t k_large() const { return w_large.dim(1); }
  std::int64_t k_small() const { return w_small.dim(1); }
};

template <typename T>
Tensor<T> csla_forward(const CslaBlock<T>& block, const Tensor<T>& x, const ConvImpl& impl = default_conv_impl());

template <typename T>
ad::Var<T> csla_forward(ad::Var<T> x, ad::Var<T> w_large, ad::Var<T> w_small, double alpha_large, double alpha_small,
                        const ConvImpl& impl = default_conv_impl());

/// Zero-pads a (C,ks,ks,ks) kernel to (C,k,k,k) keeping it centered.
template <typename T>
Tensor<T> pad_center(const Tensor<T>& w, std::int64_t k);

/// alpha_l * W_L + alpha_s * pad_center(W_S).
template <typename T>
DepthwiseKernel<T> merge_csla(const CslaBlock<T>& block);

/// Per-branch SGD: W_b <- W_b - lr_b * dL/dW_b. Returns the loss before the update.
template <typename T>
double csla_train_step(CslaBlock<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss,
                       const ConvImpl& impl = default_conv_impl());

/// Step-size mask that makes a single kernel follow the merged CSLA trajectory:
/// lr_l * alpha_l^2 everywhere plus lr_s * alpha_s^2 on the centered k_s^3 block.
template <typename T = double>
Tensor<T> gr_mask(std::int64_t k_large, std::int64_t k_small, double alpha_large, double alpha_small, double lr_large,
                  double lr_small);

/// Single operator trained with W' <- W' - mask * dL/dW'.
template <typename T>
struct SoBlock {
  Tensor<T> weight;
  Tensor<T> mask;  // (k,k,k)
};

template <typename T>
double so_train_step(SoBlock<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss,
                     const ConvImpl& impl = default_conv_impl());

// ---------------------------------------------------------------------------
// Equivalence harness

struct EquivalenceConfig {
  std::int64_t k_large = 5;
  std::int64_t k_small = 3;
  std::int64_t channels = 2;
  std::int64_t size = 8;
  std::int64_t batch = 1;
  std::int64_t steps = 100;
  double alpha_large = 1.0;
  double alpha_small = 1.0;
  double lr_large = 0.0003;
  double lr_small = 0.0006;
  std::uint64_t seed = 0;
  /// Negative control: train the single operator with a uniform lr_large mask.
  bool uniform_mask = false;
};

struct EquivalenceRecord {
  std::int64_t step = 0;
  double max_out_dev = 0.0;
  double max_w_dev = 0.0;
  std::string to_json_line() const;
};

struct EquivalenceReport {
  std::vector<EquivalenceRecord> records;  // one per step 0..T
  double max_out_dev() const;
  double max_w_dev() const;
  /// First step whose output deviation exceeds `threshold`, or -1.
  std::int64_t first_step_above(double threshold) const;
};

/// Trains a CSLA block (per-branch SGD) and a masked single operator initialized to
/// its merge on the same data stream. Each step draws X ~ N(0,1) and regresses onto
/// the output of a fixed random teacher kernel with 0.5 * ||Y - target||^2.
/// Record t compares both models after t updates on step t's input.
template <typename T>
EquivalenceReport check_equivalence(const EquivalenceConfig& cfg, const ConvImpl& impl = default_conv_impl());

}  // namespace lkc
