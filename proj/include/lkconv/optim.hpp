#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lkconv/autodiff.hpp"
#include "lkconv/io.hpp"
#include "lkconv/tensor.hpp"

namespace lkc {

/// param - lr * grad
template <typename T>
Tensor<T> sgd_step(const Tensor<T>& param, const Tensor<T>& grad, double lr);

/// param - mask * grad. The mask either matches param's shape or, for a (C,k,k,k)
/// kernel, is a (k,k,k) grid applied to every channel.
template <typename T>
Tensor<T> masked_sgd_step(const Tensor<T>& param, const Tensor<T>& grad, const Tensor<T>& mask);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamWMoments {
  Tensor<T> m;
  Tensor<T> v;
  static AdamWMoments zeros(const Shape& s) { return {Tensor<T>::zeros(s), Tensor<T>::zeros(s)}; }
};

/// One AdamW update with decoupled weight decay. `step` is 1-based and drives the
/// bias correction. Moments are updated in place.
template <typename T>
Tensor<T> adamw_step(const Tensor<T>& param, const Tensor<T>& grad, AdamWMoments<T>& moments, std::int64_t step,
                     double lr, const AdamWConfig& cfg = {});

enum class OptimKind { sgd, adamw };
const char* optim_name(OptimKind k);
OptimKind parse_optim(const std::string& s);

template <typename T>
using ParamRefs = std::vector<std::pair<std::string, Tensor<T>*>>;

/// Optimizer state for a set of named parameters: step counter, a learning rate per
/// parameter (falling back to the default) and AdamW moments.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimKind kind, double lr, AdamWConfig cfg = {});

  OptimKind kind() const { return kind_; }
  std::int64_t step_count() const { return step_; }
  const AdamWConfig& adamw_config() const { return cfg_; }

  void set_lr(const std::string& name, double lr);
  double lr(const std::string& name) const;

  /// Updates every parameter from its gradient. Nothing is modified if any gradient
  /// is non-finite; NonFiniteError then carries the step index that failed.
  void step(const ParamRefs<T>& params, const ad::Gradients<T>& grads);

  void save(Checkpoint& ck) const;
  void load(const Checkpoint& ck);

  const AdamWMoments<T>* moments(const std::string& name) const;

 private:
  OptimKind kind_;
  double default_lr_;
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, double> lrs_;
  std::map<std::string, AdamWMoments<T>> moments_;
};

}  // namespace lkc
