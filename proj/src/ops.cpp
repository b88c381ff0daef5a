#include "lkconv/ops.hpp"

#include <algorithm>

namespace lkc {

namespace {

struct Act {
  std::int64_t n, c, d, h, w;
  std::int64_t volume() const { return d * h * w; }
};

Act activation(const Shape& s, const char* op) {
  if (s.size() != 5) throw ShapeError(std::string(op) + ": expected N,C,D,H,W, got " + shape_str(s));
  return {s[0], s[1], s[2], s[3], s[4]};
}

// Sum of f(0..n-1) over 8 interleaved partial sums. The order is fixed, so results do
// not depend on the caller, but the compiler may vectorize the lanes.
template <typename F>
double lane_sum(std::int64_t n, F&& f) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += f(i + l);
  for (int l = 0; i < n; ++i, ++l) acc[l] += f(i);
  return ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
}

}  // namespace

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const Act a = activation(logits.shape(), "softmax");
  const std::int64_t vol = a.volume();
  Tensor<T> p(logits.shape());
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t v = 0; v < vol; ++v) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < a.c; ++c) mx = std::max(mx, static_cast<double>(logits[(n * a.c + c) * vol + v]));
      double z = 0.0;
      for (std::int64_t c = 0; c < a.c; ++c) z += std::exp(static_cast<double>(logits[(n * a.c + c) * vol + v]) - mx);
      for (std::int64_t c = 0; c < a.c; ++c) {
        const auto i = (n * a.c + c) * vol + v;
        p[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - mx) / z);
      }
    }
  return p;
}

template <typename T>
Tensor<std::uint8_t> argmax_channels(const Tensor<T>& logits) {
  const Act a = activation(logits.shape(), "argmax");
  if (a.c > 256) throw DomainError("argmax_channels: more than 256 classes");
  const std::int64_t vol = a.volume();
  Tensor<std::uint8_t> out({a.n, a.d, a.h, a.w});
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t v = 0; v < vol; ++v) {
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < a.c; ++c)
        if (logits[(n * a.c + c) * vol + v] > logits[(n * a.c + best) * vol + v]) best = c;
      out[n * vol + v] = static_cast<std::uint8_t>(best);
    }
  return out;
}

namespace ad {

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return a.tape->record(lkc::add(a.value(), b.value()), {a, b}, [](const BackwardContext<T>& ctx) {
    for (std::size_t j = 0; j < 2; ++j)
      if (auto* g = ctx.grad(j)) axpy_inplace(*g, 1.0, ctx.grad_out);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return a.tape->record(lkc::sub(a.value(), b.value()), {a, b}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0)) axpy_inplace(*g, 1.0, ctx.grad_out);
    if (auto* g = ctx.grad(1)) axpy_inplace(*g, -1.0, ctx.grad_out);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return a.tape->record(lkc::mul(a.value(), b.value()), {a, b}, [](const BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out;
    if (auto* g = ctx.grad(0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * ctx.input(1)[i];
    if (auto* g = ctx.grad(1))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * ctx.input(0)[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
  return a.tape->record(lkc::scale(a.value(), s), {a}, [s](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0)) axpy_inplace(*g, s, ctx.grad_out);
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Tensor<T> out({1}, static_cast<T>(lkc::sum(a.value())));
  return a.tape->record(std::move(out), {a}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0))
      for (auto& x : g->data()) x += ctx.grad_out[0];
  });
}

template <typename T>
Var<T> half_sq_norm(Var<T> a) {
  Tensor<T> out({1}, static_cast<T>(0.5 * dot(a.value(), a.value())));
  return a.tape->record(std::move(out), {a}, [](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0)) axpy_inplace(*g, static_cast<double>(ctx.grad_out[0]), ctx.input(0));
  });
}

template <typename T>
Var<T> half_sq_error(Var<T> a, const Tensor<T>& target) {
  auto diff = lkc::sub(a.value(), target);
  Tensor<T> out({1}, static_cast<T>(0.5 * dot(diff, diff)));
  return a.tape->record(std::move(out), {a}, [diff = std::move(diff)](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0)) axpy_inplace(*g, static_cast<double>(ctx.grad_out[0]), diff);
  });
}

template <typename T>
Var<T> scale_by_grid(Var<T> weights, const Tensor<T>& grid) {
  const Shape& ws = weights.shape();
  validate_kernel_shape(ws);
  if (grid.shape() != Shape{ws[1], ws[2], ws[3]})
    throw ShapeError("scale_by_grid: grid " + shape_str(grid.shape()) + " does not match kernel " + shape_str(ws));
  const std::size_t k3 = grid.size();
  Tensor<T> out(ws);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = weights.value()[i] * grid[i % k3];
  return weights.tape->record(std::move(out), {weights}, [grid, k3](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * grid[i % k3];
  });
}

template <typename T>
Var<T> dwconv3d(Var<T> input, Var<T> weights, const ConvImpl& impl) {
  auto out = dwconv3d_forward(input.value(), weights.value(), impl);
  return input.tape->record(std::move(out), {input, weights}, [impl](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0)) axpy_inplace(*g, 1.0, dwconv3d_backward_input(ctx.grad_out, ctx.input(1), impl));
    if (auto* g = ctx.grad(1))
      axpy_inplace(*g, 1.0, dwconv3d_backward_weight(ctx.input(0), ctx.grad_out, ctx.input(1).dim(1), impl));
  });
}

namespace {

template <typename T>
void require_channel_vector(const Tensor<T>& v, std::int64_t c, const char* what) {
  if (v.shape() != Shape{c}) throw ShapeError(std::string(what) + " must have shape [" + std::to_string(c) + "]");
}

}  // namespace

template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, double eps, BatchStats* stats) {
  if (!(eps > 0.0)) throw DomainError("batch norm eps must be positive");
  const Act a = activation(x.shape(), "batch_norm");
  require_channel_vector(gamma.value(), a.c, "gamma");
  require_channel_vector(beta.value(), a.c, "beta");
  const std::int64_t vol = a.volume();
  const std::int64_t m = a.n * vol;
  const auto& xv = x.value();
  std::vector<double> mean(a.c, 0.0), var(a.c, 0.0), inv(a.c);
  for (std::int64_t c = 0; c < a.c; ++c) {
    double s = 0.0;
    for (std::int64_t n = 0; n < a.n; ++n) {
      const T* src = xv.ptr() + (n * a.c + c) * vol;
      s += lane_sum(vol, [src](std::int64_t v) { return static_cast<double>(src[v]); });
    }
    mean[c] = s / static_cast<double>(m);
    double q = 0.0;
    for (std::int64_t n = 0; n < a.n; ++n) {
      const T* src = xv.ptr() + (n * a.c + c) * vol;
      const double mu = mean[c];
      q += lane_sum(vol, [src, mu](std::int64_t v) {
        const double dlt = src[v] - mu;
        return dlt * dlt;
      });
    }
    var[c] = q / static_cast<double>(m);
    inv[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  Tensor<T> out(x.shape());
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t c = 0; c < a.c; ++c) {
      const double gm = gamma.value()[c], bt = beta.value()[c];
      for (std::int64_t v = 0; v < vol; ++v) {
        const auto i = (n * a.c + c) * vol + v;
        out[i] = static_cast<T>(gm * (xv[i] - mean[c]) * inv[c] + bt);
      }
    }
  if (stats) *stats = BatchStats{mean, var, m};
  return x.tape->record(std::move(out), {x, gamma, beta}, [a, vol, m, mean, inv](const BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out;
    const auto& xin = ctx.input(0);
    for (std::int64_t c = 0; c < a.c; ++c) {
      double sg = 0.0, sgx = 0.0;
      const double mu = mean[c];
      for (std::int64_t n = 0; n < a.n; ++n) {
        const T* gp = go.ptr() + (n * a.c + c) * vol;
        const T* xp = xin.ptr() + (n * a.c + c) * vol;
        sg += lane_sum(vol, [gp](std::int64_t v) { return static_cast<double>(gp[v]); });
        sgx += lane_sum(vol, [gp, xp, mu](std::int64_t v) { return gp[v] * (xp[v] - mu); });
      }
      sgx *= inv[c];
      if (auto* g = ctx.grad(1)) (*g)[c] += static_cast<T>(sgx);
      if (auto* g = ctx.grad(2)) (*g)[c] += static_cast<T>(sg);
      if (auto* g = ctx.grad(0)) {
        const double coef = ctx.input(1)[c] * inv[c] / static_cast<double>(m);
        for (std::int64_t n = 0; n < a.n; ++n)
          for (std::int64_t v = 0; v < vol; ++v) {
            const auto i = (n * a.c + c) * vol + v;
            const double xhat = (xin[i] - mean[c]) * inv[c];
            (*g)[i] += static_cast<T>(coef * (static_cast<double>(m) * go[i] - sg - xhat * sgx));
          }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                       const Tensor<T>& running_var, double eps) {
  const Act a = activation(x.shape(), "batch_norm");
  require_channel_vector(gamma.value(), a.c, "gamma");
  require_channel_vector(beta.value(), a.c, "beta");
  require_channel_vector(running_mean, a.c, "running mean");
  require_channel_vector(running_var, a.c, "running var");
  const std::int64_t vol = a.volume();
  std::vector<double> mean(a.c), inv(a.c);
  for (std::int64_t c = 0; c < a.c; ++c) {
    mean[c] = running_mean[c];
    inv[c] = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
  }
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t c = 0; c < a.c; ++c)
      for (std::int64_t v = 0; v < vol; ++v) {
        const auto i = (n * a.c + c) * vol + v;
        out[i] = static_cast<T>(gamma.value()[c] * (xv[i] - mean[c]) * inv[c] + beta.value()[c]);
      }
  return x.tape->record(std::move(out), {x, gamma, beta}, [a, vol, mean, inv](const BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out;
    for (std::int64_t c = 0; c < a.c; ++c) {
      double sg = 0.0, sgx = 0.0;
      const double coef = ctx.input(1)[c] * inv[c];
      for (std::int64_t n = 0; n < a.n; ++n)
        for (std::int64_t v = 0; v < vol; ++v) {
          const auto i = (n * a.c + c) * vol + v;
          sg += go[i];
          sgx += go[i] * (ctx.input(0)[i] - mean[c]) * inv[c];
          if (auto* g = ctx.grad(0)) (*g)[i] += static_cast<T>(coef * go[i]);
        }
      if (auto* g = ctx.grad(1)) (*g)[c] += static_cast<T>(sgx);
      if (auto* g = ctx.grad(2)) (*g)[c] += static_cast<T>(sg);
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  Tensor<T> slope(xv.shape());
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    out[i] = static_cast<T>(v * cdf);
    slope[i] = static_cast<T>(cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
  }
  if (!x.tape->requires_grad(x)) return x.tape->record(std::move(out), {x}, nullptr);
  return x.tape->record(std::move(out), {x}, [slope = std::move(slope)](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * slope[i];
  });
}

template <typename T>
Var<T> pointwise(Var<T> x, Var<T> weights, Var<T> bias) {
  const Act a = activation(x.shape(), "pointwise");
  const Shape& ws = weights.shape();
  if (ws.size() != 2 || ws[1] != a.c)
    throw ShapeError("pointwise: weights " + shape_str(ws) + " do not match " + std::to_string(a.c) + " input channels");
  const std::int64_t co = ws[0], vol = a.volume();
  require_channel_vector(bias.value(), co, "pointwise bias");
  Tensor<T> out({a.n, co, a.d, a.h, a.w});
  std::vector<double> acc(vol);
  const auto& xv = x.value();
  const auto& wv = weights.value();
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t o = 0; o < co; ++o) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(bias.value()[o]));
      for (std::int64_t i = 0; i < a.c; ++i) {
        const double wt = wv[o * a.c + i];
        const T* src = xv.ptr() + (n * a.c + i) * vol;
        for (std::int64_t v = 0; v < vol; ++v) acc[v] += wt * src[v];
      }
      T* dst = out.ptr() + (n * co + o) * vol;
      for (std::int64_t v = 0; v < vol; ++v) dst[v] = static_cast<T>(acc[v]);
    }
  return x.tape->record(std::move(out), {x, weights, bias}, [a, co, vol](const BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out;
    const auto& xin = ctx.input(0);
    const auto& w = ctx.input(1);
    if (auto* g = ctx.grad(0))
      for (std::int64_t n = 0; n < a.n; ++n)
        for (std::int64_t i = 0; i < a.c; ++i) {
          T* dst = g->ptr() + (n * a.c + i) * vol;
          for (std::int64_t o = 0; o < co; ++o) {
            const double wt = w[o * a.c + i];
            const T* src = go.ptr() + (n * co + o) * vol;
            for (std::int64_t v = 0; v < vol; ++v) dst[v] = static_cast<T>(dst[v] + wt * src[v]);
          }
        }
    if (auto* g = ctx.grad(1))
      for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t i = 0; i < a.c; ++i) {
          double s = 0.0;
          for (std::int64_t n = 0; n < a.n; ++n) {
            const T* gs = go.ptr() + (n * co + o) * vol;
            const T* xs = xin.ptr() + (n * a.c + i) * vol;
            s += lane_sum(vol, [gs, xs](std::int64_t v) { return static_cast<double>(gs[v]) * xs[v]; });
          }
          (*g)[o * a.c + i] += static_cast<T>(s);
        }
    if (auto* g = ctx.grad(2))
      for (std::int64_t o = 0; o < co; ++o) {
        double s = 0.0;
        for (std::int64_t n = 0; n < a.n; ++n) {
          const T* gs = go.ptr() + (n * co + o) * vol;
          s += lane_sum(vol, [gs](std::int64_t v) { return static_cast<double>(gs[v]); });
        }
        (*g)[o] += static_cast<T>(s);
      }
  });
}

template <typename T>
Var<T> downsample(Var<T> x, Var<T> weights, Var<T> bias) {
  const Act a = activation(x.shape(), "downsample");
  if (a.d % 2 || a.h % 2 || a.w % 2) throw ShapeError("downsample: spatial dims must be even, got " + shape_str(x.shape()));
  const Shape& ws = weights.shape();
  if (ws.size() != 5 || ws[1] != a.c || ws[2] != 2 || ws[3] != 2 || ws[4] != 2)
    throw ShapeError("downsample: weights must be (Co," + std::to_string(a.c) + ",2,2,2), got " + shape_str(ws));
  const std::int64_t co = ws[0];
  require_channel_vector(bias.value(), co, "downsample bias");
  const Act o{a.n, co, a.d / 2, a.h / 2, a.w / 2};
  const std::int64_t ovol = o.volume(), ivol = a.volume();
  Tensor<T> out({o.n, o.c, o.d, o.h, o.w});
  const auto& xv = x.value();
  const auto& wv = weights.value();
  // Input offset of tap t for output voxel 0; output voxel (d,h,w) adds 2*(d*H*W + h*W + w).
  auto tap_offset = [a](int t) { return ((t >> 2) * a.h + ((t >> 1) & 1)) * a.w + (t & 1); };
  auto for_each_output = [o, a](auto&& f) {
    for (std::int64_t d = 0; d < o.d; ++d)
      for (std::int64_t h = 0; h < o.h; ++h) {
        const std::int64_t obase = (d * o.h + h) * o.w, ibase = (2 * d * a.h + 2 * h) * a.w;
        for (std::int64_t w = 0; w < o.w; ++w) f(obase + w, ibase + 2 * w);
      }
  };
  std::vector<double> acc(ovol);
  for (std::int64_t n = 0; n < o.n; ++n)
    for (std::int64_t oc = 0; oc < co; ++oc) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(bias.value()[oc]));
      for (std::int64_t i = 0; i < a.c; ++i)
        for (int t = 0; t < 8; ++t) {
          const double wt = wv[(oc * a.c + i) * 8 + t];
          const T* src = xv.ptr() + (n * a.c + i) * ivol + tap_offset(t);
          for_each_output([&](std::int64_t ov, std::int64_t iv) { acc[ov] += wt * src[iv]; });
        }
      T* dst = out.ptr() + (n * co + oc) * ovol;
      for (std::int64_t v = 0; v < ovol; ++v) dst[v] = static_cast<T>(acc[v]);
    }
  return x.tape->record(std::move(out), {x, weights, bias},
                        [a, o, ovol, ivol, tap_offset, for_each_output](const BackwardContext<T>& ctx) {
    const auto& go = ctx.grad_out;
    const auto& xin = ctx.input(0);
    const auto& wv = ctx.input(1);
    if (auto* gx = ctx.grad(0))
      for (std::int64_t n = 0; n < o.n; ++n)
        for (std::int64_t i = 0; i < a.c; ++i)
          for (int t = 0; t < 8; ++t) {
            T* dst = gx->ptr() + (n * a.c + i) * ivol + tap_offset(t);
            for (std::int64_t oc = 0; oc < o.c; ++oc) {
              const double wt = wv[(oc * a.c + i) * 8 + t];
              const T* g = go.ptr() + (n * o.c + oc) * ovol;
              for_each_output([&](std::int64_t ov, std::int64_t iv) { dst[iv] = static_cast<T>(dst[iv] + wt * g[ov]); });
            }
          }
    if (auto* gw = ctx.grad(1))
      for (std::int64_t oc = 0; oc < o.c; ++oc)
        for (std::int64_t i = 0; i < a.c; ++i)
          for (int t = 0; t < 8; ++t) {
            double s = 0.0;
            for (std::int64_t n = 0; n < o.n; ++n) {
              const T* g = go.ptr() + (n * o.c + oc) * ovol;
              const T* src = xin.ptr() + (n * a.c + i) * ivol + tap_offset(t);
              for_each_output([&](std::int64_t ov, std::int64_t iv) { s += static_cast<double>(g[ov]) * src[iv]; });
            }
            (*gw)[(oc * a.c + i) * 8 + t] += static_cast<T>(s);
          }
    if (auto* gb = ctx.grad(2))
      for (std::int64_t oc = 0; oc < o.c; ++oc) {
        double s = 0.0;
        for (std::int64_t n = 0; n < o.n; ++n) {
          const T* g = go.ptr() + (n * o.c + oc) * ovol;
          s += lane_sum(ovol, [g](std::int64_t v) { return static_cast<double>(g[v]); });
        }
        (*gb)[oc] += static_cast<T>(s);
      }
  });
}

template <typename T>
Var<T> upsample2(Var<T> x) {
  const Act a = activation(x.shape(), "upsample2");
  const Act o{a.n, a.c, 2 * a.d, 2 * a.h, 2 * a.w};
  Tensor<T> out({o.n, o.c, o.d, o.h, o.w});
  const auto& xv = x.value();
  for (std::int64_t nc = 0; nc < a.n * a.c; ++nc)
    for (std::int64_t z = 0; z < o.d; ++z)
      for (std::int64_t y = 0; y < o.h; ++y)
        for (std::int64_t w = 0; w < o.w; ++w)
          out[((nc * o.d + z) * o.h + y) * o.w + w] = xv[((nc * a.d + z / 2) * a.h + y / 2) * a.w + w / 2];
  return x.tape->record(std::move(out), {x}, [a, o](const BackwardContext<T>& ctx) {
    auto* g = ctx.grad(0);
    if (!g) return;
    for (std::int64_t nc = 0; nc < a.n * a.c; ++nc)
      for (std::int64_t z = 0; z < o.d; ++z)
        for (std::int64_t y = 0; y < o.h; ++y)
          for (std::int64_t w = 0; w < o.w; ++w)
            (*g)[((nc * a.d + z / 2) * a.h + y / 2) * a.w + w / 2] += ctx.grad_out[((nc * o.d + z) * o.h + y) * o.w + w];
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Act x = activation(a.shape(), "concat");
  const Act y = activation(b.shape(), "concat");
  if (x.n != y.n || x.d != y.d || x.h != y.h || x.w != y.w)
    throw ShapeError("concat: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ outside channels");
  const std::int64_t vol = x.volume(), ct = x.c + y.c;
  Tensor<T> out({x.n, ct, x.d, x.h, x.w});
  for (std::int64_t n = 0; n < x.n; ++n) {
    std::copy_n(a.value().ptr() + n * x.c * vol, x.c * vol, out.ptr() + n * ct * vol);
    std::copy_n(b.value().ptr() + n * y.c * vol, y.c * vol, out.ptr() + (n * ct + x.c) * vol);
  }
  return a.tape->record(std::move(out), {a, b}, [x, y, vol, ct](const BackwardContext<T>& ctx) {
    for (std::int64_t n = 0; n < x.n; ++n) {
      if (auto* g = ctx.grad(0)) {
        const T* src = ctx.grad_out.ptr() + n * ct * vol;
        T* dst = g->ptr() + n * x.c * vol;
        for (std::int64_t i = 0; i < x.c * vol; ++i) dst[i] += src[i];
      }
      if (auto* g = ctx.grad(1)) {
        const T* src = ctx.grad_out.ptr() + (n * ct + x.c) * vol;
        T* dst = g->ptr() + n * y.c * vol;
        for (std::int64_t i = 0; i < y.c * vol; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> soft_dice_loss(Var<T> logits, const Tensor<std::uint8_t>& labels, double smooth) {
  const Act a = activation(logits.shape(), "soft_dice_loss");
  if (labels.shape() != Shape{a.n, a.d, a.h, a.w})
    throw ShapeError("soft_dice_loss: labels " + shape_str(labels.shape()) + " do not match logits " +
                     shape_str(logits.shape()));
  for (auto l : labels.data())
    if (l >= a.c) throw DomainError("soft_dice_loss: label " + std::to_string(l) + " >= class count");
  const std::int64_t vol = a.volume(), k = a.c;
  auto p = softmax_channels(logits.value());
  std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
  for (std::int64_t n = 0; n < a.n; ++n)
    for (std::int64_t c = 0; c < k; ++c)
      for (std::int64_t v = 0; v < vol; ++v) {
        const double pv = p[(n * k + c) * vol + v];
        const bool g = labels[n * vol + v] == c;
        psum[c] += pv;
        if (g) {
          inter[c] += pv;
          gsum[c] += 1.0;
        }
      }
  double mean_dice = 0.0;
  for (std::int64_t c = 0; c < k; ++c) mean_dice += (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth);
  mean_dice /= static_cast<double>(k);
  Tensor<T> out({1}, static_cast<T>(1.0 - mean_dice));
  return logits.tape->record(
      std::move(out), {logits},
      [a, vol, k, smooth, p = std::move(p), labels, inter, psum, gsum](const BackwardContext<T>& ctx) {
        auto* g = ctx.grad(0);
        if (!g) return;
        const double scale_ = ctx.grad_out[0];
        std::vector<double> dp(k);
        for (std::int64_t n = 0; n < a.n; ++n)
          for (std::int64_t v = 0; v < vol; ++v) {
            double sdot = 0.0;
            for (std::int64_t c = 0; c < k; ++c) {
              const double den = psum[c] + gsum[c] + smooth;
              const double gt = labels[n * vol + v] == c ? 1.0 : 0.0;
              dp[c] = -(2.0 * gt * den - (2.0 * inter[c] + smooth)) / (den * den * static_cast<double>(k));
              sdot += dp[c] * p[(n * k + c) * vol + v];
            }
            for (std::int64_t c = 0; c < k; ++c) {
              const auto i = (n * k + c) * vol + v;
              (*g)[i] += static_cast<T>(scale_ * p[i] * (dp[c] - sdot));
            }
          }
      });
}

template <typename T>
Var<T> center_sum(Var<T> x, std::int64_t batch) {
  const Act a = activation(x.shape(), "center_sum");
  if (batch < 0 || batch >= a.n) throw ShapeError("center_sum: batch index out of range");
  const std::int64_t vol = a.volume();
  const std::int64_t center = ((a.d / 2) * a.h + a.h / 2) * a.w + a.w / 2;
  double s = 0.0;
  for (std::int64_t c = 0; c < a.c; ++c) s += x.value()[(batch * a.c + c) * vol + center];
  return x.tape->record(Tensor<T>({1}, static_cast<T>(s)), {x}, [a, vol, center, batch](const BackwardContext<T>& ctx) {
    if (auto* g = ctx.grad(0))
      for (std::int64_t c = 0; c < a.c; ++c) (*g)[(batch * a.c + c) * vol + center] += ctx.grad_out[0];
  });
}

}  // namespace ad

#define LKC_INSTANTIATE(T)                                                                                         \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                                           \
  template Tensor<std::uint8_t> argmax_channels(const Tensor<T>&);                                                 \
  template ad::Var<T> ad::add(ad::Var<T>, ad::Var<T>);                                                             \
  template ad::Var<T> ad::sub(ad::Var<T>, ad::Var<T>);                                                             \
  template ad::Var<T> ad::mul(ad::Var<T>, ad::Var<T>);                                                             \
  template ad::Var<T> ad::scale(ad::Var<T>, double);                                                               \
  template ad::Var<T> ad::sum(ad::Var<T>);                                                                         \
  template ad::Var<T> ad::half_sq_norm(ad::Var<T>);                                                                \
  template ad::Var<T> ad::half_sq_error(ad::Var<T>, const Tensor<T>&);                                             \
  template ad::Var<T> ad::scale_by_grid(ad::Var<T>, const Tensor<T>&);                                             \
  template ad::Var<T> ad::dwconv3d(ad::Var<T>, ad::Var<T>, const ConvImpl&);                                       \
  template ad::Var<T> ad::batch_norm_train(ad::Var<T>, ad::Var<T>, ad::Var<T>, double, ad::BatchStats*);           \
  template ad::Var<T> ad::batch_norm_eval(ad::Var<T>, ad::Var<T>, ad::Var<T>, const Tensor<T>&, const Tensor<T>&, \
                                          double);                                                                 \
  template ad::Var<T> ad::gelu(ad::Var<T>);                                                                        \
  template ad::Var<T> ad::pointwise(ad::Var<T>, ad::Var<T>, ad::Var<T>);                                           \
  template ad::Var<T> ad::downsample(ad::Var<T>, ad::Var<T>, ad::Var<T>);                                          \
  template ad::Var<T> ad::upsample2(ad::Var<T>);                                                                   \
  template ad::Var<T> ad::concat_channels(ad::Var<T>, ad::Var<T>);                                                 \
  template ad::Var<T> ad::soft_dice_loss(ad::Var<T>, const Tensor<std::uint8_t>&, double);                         \
  template ad::Var<T> ad::center_sum(ad::Var<T>, std::int64_t);

LKC_INSTANTIATE(float)
LKC_INSTANTIATE(double)
#undef LKC_INSTANTIATE

}  // namespace lkc
