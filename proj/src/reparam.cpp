#include "lkconv/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "lkconv/ops.hpp"

namespace lkc {

double distance(std::int64_t x, std::int64_t y, std::int64_t z, double c) {
  const double dx = static_cast<double>(x) - c;
  const double dy = static_cast<double>(y) - c;
  const double dz = static_cast<double>(z) - c;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

FrequencyPrior frequency_prior(std::int64_t k, double alpha) {
  if (k < 1 || k % 2 == 0) throw DomainError("frequency prior needs an odd positive k, got " + std::to_string(k));
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("frequency prior needs alpha > 0");
  FrequencyPrior p;
  p.k = k;
  p.alpha = alpha;
  p.center = (k - 1) / 2;
  p.grid = Tensor<double>({k, k, k});
  const double c = static_cast<double>(p.center);
  std::size_t i = 0;
  for (std::int64_t x = 0; x < k; ++x)
    for (std::int64_t y = 0; y < k; ++y)
      for (std::int64_t z = 0; z < k; ++z) p.grid[i++] = alpha / (distance(x, y, z, c) + alpha);
  return p;
}

namespace {

template <typename T>
void require_prior_matches(const Tensor<T>& w, const FrequencyPrior& prior) {
  validate_kernel_shape(w.shape());
  if (w.dim(1) != prior.k)
    throw ShapeError("kernel k=" + std::to_string(w.dim(1)) + " does not match prior k=" + std::to_string(prior.k));
}

template <typename T>
Tensor<T> scale_grid(const Tensor<T>& w, const Tensor<double>& grid) {
  Tensor<T> out(w.shape());
  const std::size_t k3 = grid.size();
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<T>(grid[i % k3] * w[i]);
  return out;
}

template <typename T>
ad::Var<T> scalar_loss(const LayerLoss<T>& loss, ad::Tape<T>& tape, ad::Var<T> out) {
  auto l = loss(tape, out);
  if (l.value().size() != 1) throw DomainError("layer loss must be scalar");
  return l;
}

}  // namespace

template <typename T>
DepthwiseKernel<T> bfr_effective_weight(const DepthwiseKernel<T>& latent, const FrequencyPrior& prior) {
  require_prior_matches(latent.weights(), prior);
  return DepthwiseKernel<T>(scale_grid(latent.weights(), prior.grid));
}

template <typename T>
BfrConv<T>::BfrConv(Tensor<T> latent_weight, FrequencyPrior p) : latent(std::move(latent_weight)), prior(std::move(p)) {
  require_prior_matches(latent, prior);
}

template <typename T>
Tensor<T> BfrConv<T>::effective() const {
  return scale_grid(latent, prior.grid);
}

template <typename T>
Tensor<T> BfrConv<T>::forward(const Tensor<T>& x, const ConvImpl& impl) const {
  return dwconv3d_forward(x, effective(), impl);
}

template <typename T>
ad::Var<T> BfrConv<T>::forward(ad::Var<T> x, ad::Var<T> latent_var, const ConvImpl& impl) const {
  return ad::dwconv3d(x, ad::scale_by_grid(latent_var, prior.grid_as<T>()), impl);
}

template <typename T>
DepthwiseKernel<T> bfr_export(const BfrConv<T>& block) {
  return DepthwiseKernel<T>(block.effective());
}

template <typename T>
double bfr_train_step(BfrConv<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss, Optimizer<T>& opt,
                      const std::string& name) {
  ad::Tape<T> tape;
  auto xv = tape.constant(x);
  if (block.literal_update) {
    if (opt.kind() != OptimKind::sgd) throw DomainError("literal BFR update is defined for SGD only");
    auto v = tape.parameter(block.effective(), name);
    auto l = scalar_loss(loss, tape, ad::dwconv3d(xv, v));
    const double value = l.value()[0];
    auto g = tape.backward(l);
    if (!all_finite(g[name])) throw NonFiniteError(opt.step_count() + 1, "BFR gradient");
    block.latent = sgd_step(block.effective(), g[name], opt.lr(name));
    return value;
  }
  auto w = tape.parameter(block.latent, name);
  auto l = scalar_loss(loss, tape, block.forward(xv, w));
  const double value = l.value()[0];
  opt.step({{name, &block.latent}}, tape.backward(l));
  return value;
}

template <typename T>
void CslaBlock<T>::validate() const {
  validate_kernel_shape(w_large.shape());
  validate_kernel_shape(w_small.shape());
  if (w_large.dim(0) != w_small.dim(0)) throw ShapeError("CSLA branches have different channel counts");
  if (k_small() > k_large()) throw ShapeError("CSLA small kernel is larger than the large kernel");
}

template <typename T>
Tensor<T> csla_forward(const CslaBlock<T>& block, const Tensor<T>& x, const ConvImpl& impl) {
  block.validate();
  auto y = scale(dwconv3d_forward(x, block.w_large, impl), block.alpha_large);
  axpy_inplace(y, block.alpha_small, dwconv3d_forward(x, block.w_small, impl));
  return y;
}

template <typename T>
ad::Var<T> csla_forward(ad::Var<T> x, ad::Var<T> w_large, ad::Var<T> w_small, double alpha_large, double alpha_small,
                        const ConvImpl& impl) {
  return ad::add(ad::scale(ad::dwconv3d(x, w_large, impl), alpha_large),
                 ad::scale(ad::dwconv3d(x, w_small, impl), alpha_small));
}

template <typename T>
Tensor<T> pad_center(const Tensor<T>& w, std::int64_t k) {
  validate_kernel_shape(w.shape());
  if (k % 2 == 0) throw DomainError("pad_center: target k must be odd");
  const std::int64_t ks = w.dim(1);
  if (ks > k) throw ShapeError("pad_center: kernel larger than target");
  const std::int64_t off = (k - ks) / 2, c = w.dim(0);
  auto out = Tensor<T>::zeros({c, k, k, k});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t a = 0; a < ks; ++a)
      for (std::int64_t b = 0; b < ks; ++b)
        for (std::int64_t e = 0; e < ks; ++e) out.at({ch, a + off, b + off, e + off}) = w.at({ch, a, b, e});
  return out;
}

template <typename T>
DepthwiseKernel<T> merge_csla(const CslaBlock<T>& block) {
  block.validate();
  auto merged = scale(block.w_large, block.alpha_large);
  axpy_inplace(merged, block.alpha_small, pad_center(block.w_small, block.k_large()));
  return DepthwiseKernel<T>(std::move(merged));
}

template <typename T>
double csla_train_step(CslaBlock<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss, const ConvImpl& impl) {
  block.validate();
  ad::Tape<T> tape;
  auto wl = tape.parameter(block.w_large, "w_large");
  auto ws = tape.parameter(block.w_small, "w_small");
  auto l = scalar_loss(loss, tape, csla_forward(tape.constant(x), wl, ws, block.alpha_large, block.alpha_small, impl));
  const double value = l.value()[0];
  auto g = tape.backward(l);
  if (!all_finite(g["w_large"]) || !all_finite(g["w_small"])) throw NonFiniteError(-1, "CSLA gradient");
  // A zero branch LR freezes that branch.
  if (block.lr_large != 0.0) block.w_large = sgd_step(block.w_large, g["w_large"], block.lr_large);
  if (block.lr_small != 0.0) block.w_small = sgd_step(block.w_small, g["w_small"], block.lr_small);
  return value;
}

template <typename T>
Tensor<T> gr_mask(std::int64_t k_large, std::int64_t k_small, double alpha_large, double alpha_small, double lr_large,
                  double lr_small) {
  if (k_large < 1 || k_small < 1 || k_large % 2 == 0 || k_small % 2 == 0)
    throw DomainError("gr_mask needs odd positive kernel sizes");
  if (k_small > k_large) throw ShapeError("gr_mask: small kernel larger than large kernel");
  const double base = lr_large * alpha_large * alpha_large;
  const double extra = lr_small * alpha_small * alpha_small;
  Tensor<T> m({k_large, k_large, k_large}, static_cast<T>(base));
  const std::int64_t lo = (k_large - k_small) / 2, hi = lo + k_small;
  for (std::int64_t a = lo; a < hi; ++a)
    for (std::int64_t b = lo; b < hi; ++b)
      for (std::int64_t e = lo; e < hi; ++e) m.at({a, b, e}) = static_cast<T>(base + extra);
  return m;
}

template <typename T>
double so_train_step(SoBlock<T>& block, const Tensor<T>& x, const LayerLoss<T>& loss, const ConvImpl& impl) {
  ad::Tape<T> tape;
  auto w = tape.parameter(block.weight, "w");
  auto l = scalar_loss(loss, tape, ad::dwconv3d(tape.constant(x), w, impl));
  const double value = l.value()[0];
  auto g = tape.backward(l);
  if (!all_finite(g["w"])) throw NonFiniteError(-1, "single-operator gradient");
  block.weight = masked_sgd_step(block.weight, g["w"], block.mask);
  return value;
}

std::string EquivalenceRecord::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["max_out_dev"] = max_out_dev;
  j["max_w_dev"] = max_w_dev;
  return j.dump();
}

double EquivalenceReport::max_out_dev() const {
  double m = 0.0;
  for (const auto& r : records) m = std::max(m, r.max_out_dev);
  return m;
}

double EquivalenceReport::max_w_dev() const {
  double m = 0.0;
  for (const auto& r : records) m = std::max(m, r.max_w_dev);
  return m;
}

std::int64_t EquivalenceReport::first_step_above(double threshold) const {
  for (const auto& r : records)
    if (r.max_out_dev > threshold) return r.step;
  return -1;
}

template <typename T>
EquivalenceReport check_equivalence(const EquivalenceConfig& cfg, const ConvImpl& impl) {
  if (cfg.steps < 0) throw DomainError("equivalence: steps must be >= 0");
  Rng init(cfg.seed);
  const std::int64_t c = cfg.channels, kl = cfg.k_large, ks = cfg.k_small;
  CslaBlock<T> csla;
  csla.w_large = Tensor<T>::randn({c, kl, kl, kl}, init, 1.0 / static_cast<double>(kl));
  csla.w_small = Tensor<T>::randn({c, ks, ks, ks}, init, 1.0 / static_cast<double>(ks));
  csla.alpha_large = cfg.alpha_large;
  csla.alpha_small = cfg.alpha_small;
  csla.lr_large = cfg.lr_large;
  csla.lr_small = cfg.lr_small;
  csla.validate();
  const auto teacher = Tensor<T>::randn({c, kl, kl, kl}, init, 1.0 / static_cast<double>(kl));

  SoBlock<T> so;
  so.weight = merge_csla(csla).weights();
  so.mask = cfg.uniform_mask ? Tensor<T>({kl, kl, kl}, static_cast<T>(cfg.lr_large))
                             : gr_mask<T>(kl, ks, cfg.alpha_large, cfg.alpha_small, cfg.lr_large, cfg.lr_small);

  // The data stream depends only on (seed, step), so both models see identical batches.
  auto batch_at = [&](std::int64_t step) {
    Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(step + 1)));
    return Tensor<T>::randn({cfg.batch, c, cfg.size, cfg.size, cfg.size}, rng);
  };

  EquivalenceReport report;
  for (std::int64_t t = 0;; ++t) {
    const auto x = batch_at(t);
    EquivalenceRecord rec;
    rec.step = t;
    rec.max_out_dev = max_abs_diff(csla_forward(csla, x, impl), dwconv3d_forward(x, so.weight, impl));
    rec.max_w_dev = max_abs_diff(merge_csla(csla).weights(), so.weight);
    if (!std::isfinite(rec.max_out_dev) || !std::isfinite(rec.max_w_dev))
      throw NonFiniteError(t, "equivalence run diverged");
    report.records.push_back(rec);
    if (t == cfg.steps) break;

    const auto target = dwconv3d_forward(x, teacher, impl);
    LayerLoss<T> loss = [&target](ad::Tape<T>&, ad::Var<T> y) { return ad::half_sq_error(y, target); };
    try {
      csla_train_step(csla, x, loss, impl);
      so_train_step(so, x, loss, impl);
    } catch (const NonFiniteError&) {
      throw NonFiniteError(t + 1, "equivalence run diverged");
    }
  }
  return report;
}

#define LKC_INSTANTIATE(T)                                                                                           \
  template DepthwiseKernel<T> bfr_effective_weight(const DepthwiseKernel<T>&, const FrequencyPrior&);                \
  template struct BfrConv<T>;                                                                                        \
  template DepthwiseKernel<T> bfr_export(const BfrConv<T>&);                                                         \
  template double bfr_train_step(BfrConv<T>&, const Tensor<T>&, const LayerLoss<T>&, Optimizer<T>&,                  \
                                 const std::string&);                                                                \
  template struct CslaBlock<T>;                                                                                      \
  template Tensor<T> csla_forward(const CslaBlock<T>&, const Tensor<T>&, const ConvImpl&);                           \
  template ad::Var<T> csla_forward(ad::Var<T>, ad::Var<T>, ad::Var<T>, double, double, const ConvImpl&);             \
  template Tensor<T> pad_center(const Tensor<T>&, std::int64_t);                                                     \
  template DepthwiseKernel<T> merge_csla(const CslaBlock<T>&);                                                       \
  template double csla_train_step(CslaBlock<T>&, const Tensor<T>&, const LayerLoss<T>&, const ConvImpl&);            \
  template Tensor<T> gr_mask<T>(std::int64_t, std::int64_t, double, double, double, double);                         \
  template double so_train_step(SoBlock<T>&, const Tensor<T>&, const LayerLoss<T>&, const ConvImpl&);                \
  template EquivalenceReport check_equivalence<T>(const EquivalenceConfig&, const ConvImpl&);

LKC_INSTANTIATE(float)
LKC_INSTANTIATE(double)
#undef LKC_INSTANTIATE

}  // namespace lkc
