#include "lkconv/optim.hpp"

#include <cmath>

namespace lkc {

namespace {

void require_positive_lr(double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw DomainError("learning rate must be positive, got " + std::to_string(lr));
}

}  // namespace

template <typename T>
Tensor<T> sgd_step(const Tensor<T>& param, const Tensor<T>& grad, double lr) {
  require_positive_lr(lr);
  require_same_shape(param.shape(), grad.shape(), "sgd_step");
  Tensor<T> out(param.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(param[i] - lr * grad[i]);
  return out;
}

template <typename T>
Tensor<T> masked_sgd_step(const Tensor<T>& param, const Tensor<T>& grad, const Tensor<T>& mask) {
  require_same_shape(param.shape(), grad.shape(), "masked_sgd_step");
  const bool per_channel = param.ndim() == 4 && mask.shape() == Shape{param.dim(1), param.dim(2), param.dim(3)};
  if (!per_channel) require_same_shape(param.shape(), mask.shape(), "masked_sgd_step");
  const std::size_t period = mask.size();
  Tensor<T> out(param.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(param[i] - static_cast<double>(mask[i % period]) * grad[i]);
  return out;
}

template <typename T>
Tensor<T> adamw_step(const Tensor<T>& param, const Tensor<T>& grad, AdamWMoments<T>& mo, std::int64_t step, double lr,
                     const AdamWConfig& cfg) {
  require_positive_lr(lr);
  if (step < 1) throw DomainError("adamw step counter is 1-based");
  require_same_shape(param.shape(), grad.shape(), "adamw_step");
  require_same_shape(param.shape(), mo.m.shape(), "adamw_step");
  require_same_shape(param.shape(), mo.v.shape(), "adamw_step");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  Tensor<T> out(param.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
    mo.m[i] = static_cast<T>(m);
    mo.v[i] = static_cast<T>(v);
    const double w = param[i];
    out[i] = static_cast<T>(w - lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps) - lr * cfg.weight_decay * w);
  }
  return out;
}

const char* optim_name(OptimKind k) { return k == OptimKind::sgd ? "sgd" : "adamw"; }

OptimKind parse_optim(const std::string& s) {
  if (s == "sgd") return OptimKind::sgd;
  if (s == "adamw") return OptimKind::adamw;
  throw DomainError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

template <typename T>
Optimizer<T>::Optimizer(OptimKind kind, double lr, AdamWConfig cfg) : kind_(kind), default_lr_(lr), cfg_(cfg) {
  require_positive_lr(lr);
}

template <typename T>
void Optimizer<T>::set_lr(const std::string& name, double lr) {
  require_positive_lr(lr);
  lrs_[name] = lr;
}

template <typename T>
double Optimizer<T>::lr(const std::string& name) const {
  auto it = lrs_.find(name);
  return it == lrs_.end() ? default_lr_ : it->second;
}

template <typename T>
void Optimizer<T>::step(const ParamRefs<T>& params, const ad::Gradients<T>& grads) {
  const std::int64_t next = step_ + 1;
  std::vector<const Tensor<T>*> gs;
  gs.reserve(params.size());
  for (const auto& [name, p] : params) {
    const Tensor<T>& g = grads[name];
    if (!all_finite(g)) throw NonFiniteError(next, "gradient of '" + name + "'");
    gs.push_back(&g);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (kind_ == OptimKind::sgd) {
      *p = sgd_step(*p, *gs[i], lr(name));
    } else {
      auto it = moments_.try_emplace(name, AdamWMoments<T>::zeros(p->shape())).first;
      *p = adamw_step(*p, *gs[i], it->second, next, lr(name), cfg_);
    }
  }
  step_ = next;
}

template <typename T>
void Optimizer<T>::save(Checkpoint& ck) const {
  ck.put("optim/step", Tensor<double>({1}, static_cast<double>(step_)));
  for (const auto& [name, mo] : moments_) {
    ck.put("optim/m/" + name, mo.m);
    ck.put("optim/v/" + name, mo.v);
  }
}

template <typename T>
void Optimizer<T>::load(const Checkpoint& ck) {
  step_ = static_cast<std::int64_t>(ck.get<double>("optim/step")[0]);
  moments_.clear();
  const std::string prefix = "optim/m/";
  for (const auto& [entry, value] : ck.entries()) {
    if (entry.rfind(prefix, 0) != 0) continue;
    const std::string name = entry.substr(prefix.size());
    moments_.emplace(name, AdamWMoments<T>{ck.get<T>(entry), ck.get<T>("optim/v/" + name)});
  }
}

template <typename T>
const AdamWMoments<T>* Optimizer<T>::moments(const std::string& name) const {
  auto it = moments_.find(name);
  return it == moments_.end() ? nullptr : &it->second;
}

#define LKC_INSTANTIATE(T)                                                                                  \
  template Tensor<T> sgd_step(const Tensor<T>&, const Tensor<T>&, double);                                  \
  template Tensor<T> masked_sgd_step(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> adamw_step(const Tensor<T>&, const Tensor<T>&, AdamWMoments<T>&, std::int64_t, double, \
                                const AdamWConfig&);                                                        \
  template class Optimizer<T>;

LKC_INSTANTIATE(float)
LKC_INSTANTIATE(double)
#undef LKC_INSTANTIATE

}  // namespace lkc
