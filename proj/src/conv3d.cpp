#include "lkconv/conv3d.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <mutex>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace lkc {

namespace {

struct Geometry {
  std::int64_t n, c, d, h, w, k, p;
  std::size_t volume() const { return static_cast<std::size_t>(d * h * w); }
};

Geometry geometry(const Shape& input, const Shape& weights) {
  if (input.size() != 5) throw ShapeError("dwconv3d: input must be N,C,D,H,W, got " + shape_str(input));
  validate_kernel_shape(weights);
  if (input[1] != weights[0])
    throw ShapeError("dwconv3d: input has " + std::to_string(input[1]) + " channels, kernel has " +
                     std::to_string(weights[0]));
  return {input[0], input[1], input[2], input[3], input[4], weights[1], (weights[1] - 1) / 2};
}

template <typename F>
void parallel_for(std::size_t count, int threads, F&& body) {
  const std::size_t nthreads = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&, t] {
      const std::size_t lo = count * t / nthreads;
      const std::size_t hi = count * (t + 1) / nthreads;
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
}

int thread_count(const ConvImpl& impl) {
  if (impl.deterministic) return 1;
  if (impl.threads > 0) return impl.threads;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

// ---------------------------------------------------------------- naive

template <typename T>
void naive_forward(const Geometry& g, const T* in, const T* wt, T* out) {
  const std::int64_t k = g.k;
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t c = 0; c < g.c; ++c) {
      const T* src = in + (n * g.c + c) * g.volume();
      const T* ker = wt + c * k * k * k;
      T* dst = out + (n * g.c + c) * g.volume();
      for (std::int64_t d = 0; d < g.d; ++d)
        for (std::int64_t h = 0; h < g.h; ++h)
          for (std::int64_t w = 0; w < g.w; ++w) {
            double acc = 0.0;
            for (std::int64_t a = 0; a < k; ++a)
              for (std::int64_t b = 0; b < k; ++b)
                for (std::int64_t e = 0; e < k; ++e) {
                  const std::int64_t z = d + a - g.p, y = h + b - g.p, x = w + e - g.p;
                  if (z < 0 || z >= g.d || y < 0 || y >= g.h || x < 0 || x >= g.w) continue;
                  acc += static_cast<double>(src[(z * g.h + y) * g.w + x]) *
                         static_cast<double>(ker[(a * k + b) * k + e]);
                }
            dst[(d * g.h + h) * g.w + w] = static_cast<T>(acc);
          }
    }
}

template <typename T>
void naive_backward_weight(const Geometry& g, const T* in, const T* gout, T* gw) {
  const std::int64_t k = g.k;
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t a = 0; a < k; ++a)
      for (std::int64_t b = 0; b < k; ++b)
        for (std::int64_t e = 0; e < k; ++e) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < g.n; ++n) {
            const T* src = in + (n * g.c + c) * g.volume();
            const T* go = gout + (n * g.c + c) * g.volume();
            for (std::int64_t d = 0; d < g.d; ++d)
              for (std::int64_t h = 0; h < g.h; ++h)
                for (std::int64_t w = 0; w < g.w; ++w) {
                  const std::int64_t z = d + a - g.p, y = h + b - g.p, x = w + e - g.p;
                  if (z < 0 || z >= g.d || y < 0 || y >= g.h || x < 0 || x >= g.w) continue;
                  acc += static_cast<double>(src[(z * g.h + y) * g.w + x]) *
                         static_cast<double>(go[(d * g.h + h) * g.w + w]);
                }
          }
          gw[((c * k + a) * k + b) * k + e] = static_cast<T>(acc);
        }
}

// ---------------------------------------------------------------- blocked

// Output rows computed together by the forward kernel.
constexpr int kRowBlock = 4;

// Four doubles; the compiler maps these onto whatever SIMD registers the target has.
using V4 = double __attribute__((vector_size(32)));

inline V4 load4(const double* p) {
  V4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, V4 v) { std::memcpy(p, &v, sizeof v); }

// One zero-padded (n, c) slice in double. The row length is rounded up so a full
// register tile can always be read without bounds checks, and kRowBlock spare zero
// rows at the bottom let the last row block run unguarded.
struct PaddedSlice {
  std::int64_t dp = 0, hp = 0, wp = 0;
  std::vector<double> buf;

  template <typename T>
  void load(const Geometry& g, const T* src, int tile_w) {
    const std::int64_t wround = (g.w + tile_w - 1) / tile_w * tile_w;
    dp = g.d + 2 * g.p;
    hp = g.h + 2 * g.p + kRowBlock;
    wp = wround + 2 * g.p;
    buf.assign(static_cast<std::size_t>(dp * hp * wp), 0.0);
    for (std::int64_t d = 0; d < g.d; ++d)
      for (std::int64_t h = 0; h < g.h; ++h) {
        const T* s = src + (d * g.h + h) * g.w;
        double* r = row(d + g.p, h + g.p) + g.p;
        for (std::int64_t w = 0; w < g.w; ++w) r[w] = static_cast<double>(s[w]);
      }
  }

  const double* row(std::int64_t z, std::int64_t y) const { return buf.data() + (z * hp + y) * wp; }
  double* row(std::int64_t z, std::int64_t y) { return buf.data() + (z * hp + y) * wp; }
};

// Calls f.template operator()<LO, HI>() for the runtime pair (lo, hi), 0 <= lo <= hi < J,
// so loops over [lo, hi] have compile-time bounds and accumulators stay in registers.
template <int J, int LO = 0, int HI = 0, typename F>
inline void dispatch_row_range(int lo, int hi, F&& f) {
  if constexpr (LO < J) {
    if constexpr (HI < J) {
      if (lo == LO && hi == HI) return f.template operator()<LO, HI>();
      dispatch_row_range<J, LO, HI + 1>(lo, hi, f);
    } else {
      dispatch_row_range<J, LO + 1, LO + 1>(lo, hi, f);
    }
  }
}

// J output rows (d, h..h+J-1) x TW columns. Input row h+y feeds output row h+j
// through kernel row b = y - j, so each load is shared by up to J accumulators. Per
// output element the taps are still summed in (a, b, e) order.
template <int TW, int J>
inline void forward_rows_tile(const PaddedSlice& ps, const double* ker, std::int64_t k, std::int64_t d,
                              std::int64_t h, std::int64_t w0, double (&out)[J][TW]) {
  constexpr int NV = TW / 4;
  V4 acc[J][NV];
  for (int j = 0; j < J; ++j)
    for (int v = 0; v < NV; ++v) acc[j][v] = V4{0.0, 0.0, 0.0, 0.0};
  for (std::int64_t a = 0; a < k; ++a)
    for (std::int64_t y = 0; y < k + J - 1; ++y) {
      const double* row = ps.row(d + a, h + y) + w0;
      const double* kw = ker + (a * k + y) * k;
      const int jlo = static_cast<int>(std::max<std::int64_t>(0, y - k + 1));
      const int jhi = static_cast<int>(std::min<std::int64_t>(J - 1, y));
      dispatch_row_range<J>(jlo, jhi, [&]<int LO, int HI>() {
        for (std::int64_t e = 0; e < k; ++e) {
          V4 r[NV];
          for (int v = 0; v < NV; ++v) r[v] = load4(row + e + 4 * v);
#pragma GCC unroll 8
          for (int j = LO; j <= HI; ++j) {
            const double wt = kw[e - j * k];
#pragma GCC unroll 8
            for (int v = 0; v < NV; ++v) acc[j][v] += wt * r[v];
          }
        }
      });
    }
  for (int j = 0; j < J; ++j)
    for (int v = 0; v < NV; ++v) store4(&out[j][4 * v], acc[j][v]);
}

template <typename T, int TW>
void blocked_forward_slice(const Geometry& g, const ConvImpl& impl, const T* src, const T* wt, T* dst,
                           PaddedSlice& ps) {
  constexpr int J = TW >= 32 ? 2 : kRowBlock;
  const std::int64_t k = g.k;
  ps.load(g, src, TW);
  std::vector<double> ker(static_cast<std::size_t>(k * k * k));
  for (std::size_t i = 0; i < ker.size(); ++i) ker[i] = static_cast<double>(wt[i]);
  const std::int64_t td = std::max(1, impl.tile_d), th = std::max(1, impl.tile_h);
  double tile[J][TW];
  for (std::int64_t d0 = 0; d0 < g.d; d0 += td)
    for (std::int64_t h0 = 0; h0 < g.h; h0 += th)
      for (std::int64_t d = d0; d < std::min(g.d, d0 + td); ++d) {
        const std::int64_t h1 = std::min(g.h, h0 + th);
        for (std::int64_t h = h0; h < h1; h += J) {
          const std::int64_t rows = std::min<std::int64_t>(J, h1 - h);
          for (std::int64_t w0 = 0; w0 < g.w; w0 += TW) {
            forward_rows_tile<TW, J>(ps, ker.data(), k, d, h, w0, tile);
            const std::int64_t n = std::min<std::int64_t>(TW, g.w - w0);
            for (std::int64_t j = 0; j < rows; ++j) {
              T* out_row = dst + (d * g.h + h + j) * g.w;
              for (std::int64_t t = 0; t < n; ++t) out_row[w0 + t] = static_cast<T>(tile[j][t]);
            }
          }
        }
      }
}

// Per-(n,c) weight gradient. Each tap keeps TW lanes of partial sums that sweep the
// volume along w and are reduced in a fixed order at the end, so the result does not
// depend on threading. A gradient chunk stays in registers for kTapGroup taps.
constexpr int kTapGroup = 4;

template <typename T, int TW>
void blocked_weight_slice(const Geometry& g, const ConvImpl& impl, const T* src, const T* go, double* gw,
                          PaddedSlice& ps) {
  const std::int64_t k = g.k;
  const std::int64_t td = std::max(1, impl.tile_d), th = std::max(1, impl.tile_h);
  ps.load(g, src, TW);
  const std::int64_t wround = (g.w + TW - 1) / TW * TW;
  std::vector<double> gpad(static_cast<std::size_t>(g.d * g.h * wround), 0.0);
  for (std::int64_t dh = 0; dh < g.d * g.h; ++dh)
    for (std::int64_t w = 0; w < g.w; ++w) gpad[dh * wround + w] = static_cast<double>(go[dh * g.w + w]);
  // Output rows are visited in (tile_d x tile_h) groups small enough to stay in L1
  // while every tap sweeps them.
  std::vector<double> lanes(static_cast<std::size_t>(k * k * k * TW), 0.0);
  for (std::int64_t d0 = 0; d0 < g.d; d0 += td)
    for (std::int64_t h0 = 0; h0 < g.h; h0 += th) {
      const std::int64_t d1 = std::min(g.d, d0 + td), h1 = std::min(g.h, h0 + th);
      for (std::int64_t a = 0; a < k; ++a)
        for (std::int64_t b = 0; b < k; ++b)
          for (std::int64_t e0 = 0; e0 < k; e0 += kTapGroup) {
            const int taps = static_cast<int>(std::min<std::int64_t>(kTapGroup, k - e0));
            constexpr int NV = TW / 4;
            V4 acc[kTapGroup][NV];
            for (int j = 0; j < kTapGroup; ++j)
              for (int v = 0; v < NV; ++v) acc[j][v] = V4{0.0, 0.0, 0.0, 0.0};
            for (std::int64_t d = d0; d < d1; ++d)
              for (std::int64_t h = h0; h < h1; ++h) {
                const double* r = ps.row(d + a, h + b) + e0;
                const double* gr = gpad.data() + (d * g.h + h) * wround;
                for (std::int64_t w0 = 0; w0 < wround; w0 += TW) {
                  V4 gv[NV];
                  for (int v = 0; v < NV; ++v) gv[v] = load4(gr + w0 + 4 * v);
                  for (int j = 0; j < taps; ++j)
                    for (int v = 0; v < NV; ++v) acc[j][v] += load4(r + w0 + j + 4 * v) * gv[v];
                }
              }
            for (int j = 0; j < taps; ++j) {
              double* lane = lanes.data() + ((a * k + b) * k + e0 + j) * TW;
              for (int v = 0; v < NV; ++v) store4(lane + 4 * v, load4(lane + 4 * v) + acc[j][v]);
            }
          }
    }
  for (std::int64_t i = 0; i < k * k * k; ++i) {
    double s = 0.0;
    for (int t = 0; t < TW; ++t) s += lanes[i * TW + t];
    gw[i] = s;
  }
}

int resolve_tile_w(const ConvImpl& impl, std::int64_t width) {
  if (impl.tile_w != 0) return impl.tile_w;
  if (width <= 8) return 8;
  return 16;
}

template <typename F>
void dispatch_tile(int tile_w, F&& f) {
  switch (tile_w) {
    case 4: f(std::integral_constant<int, 4>{}); break;
    case 8: f(std::integral_constant<int, 8>{}); break;
    case 16: f(std::integral_constant<int, 16>{}); break;
    case 32: f(std::integral_constant<int, 32>{}); break;
    default: throw DomainError("ConvImpl.tile_w must be 0 (auto), 4, 8, 16 or 32");
  }
}

template <typename T>
void blocked_forward(const Geometry& g, const ConvImpl& impl, const T* in, const T* wt, T* out) {
  const std::int64_t k3 = g.k * g.k * g.k;
  dispatch_tile(resolve_tile_w(impl, g.w), [&](auto tw) {
    parallel_for(static_cast<std::size_t>(g.n * g.c), thread_count(impl), [&](std::size_t task) {
      thread_local PaddedSlice ps;
      const std::int64_t c = static_cast<std::int64_t>(task) % g.c;
      blocked_forward_slice<T, decltype(tw)::value>(g, impl, in + task * g.volume(), wt + c * k3,
                                                    out + task * g.volume(), ps);
    });
  });
}

template <typename T>
void blocked_backward_weight(const Geometry& g, const ConvImpl& impl, const T* in, const T* go, T* gw) {
  const std::int64_t k3 = g.k * g.k * g.k;
  std::vector<double> partial(static_cast<std::size_t>(g.n * g.c * k3));
  dispatch_tile(resolve_tile_w(impl, g.w), [&](auto tw) {
    parallel_for(static_cast<std::size_t>(g.n * g.c), thread_count(impl), [&](std::size_t task) {
      thread_local PaddedSlice ps;
      blocked_weight_slice<T, decltype(tw)::value>(g, impl, in + task * g.volume(), go + task * g.volume(),
                                                   partial.data() + task * k3, ps);
    });
  });
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t i = 0; i < k3; ++i) {
      double s = 0.0;
      for (std::int64_t n = 0; n < g.n; ++n) s += partial[(n * g.c + c) * k3 + i];
      gw[c * k3 + i] = static_cast<T>(s);
    }
}

std::mutex& default_impl_mutex() {
  static std::mutex m;
  return m;
}
ConvImpl& default_impl_storage() {
  static ConvImpl impl;
  return impl;
}

}  // namespace

void validate_kernel_shape(const Shape& s) {
  if (s.size() != 4) throw ShapeError("depth-wise kernel must be C,k,k,k, got " + shape_str(s));
  checked_numel(s);
  if (s[1] != s[2] || s[1] != s[3]) throw ShapeError("depth-wise kernel must be cubic, got " + shape_str(s));
  if (s[1] % 2 == 0) throw DomainError("kernel size must be odd, got " + std::to_string(s[1]));
}

template <typename T>
DepthwiseKernel<T>::DepthwiseKernel(Tensor<T> weights) : weights_(std::move(weights)) {
  validate_kernel_shape(weights_.shape());
}

template <typename T>
DepthwiseKernel<T> DepthwiseKernel<T>::zeros(std::int64_t channels, std::int64_t k) {
  return DepthwiseKernel(Tensor<T>::zeros({channels, k, k, k}));
}

template <typename T>
DepthwiseKernel<T> DepthwiseKernel<T>::identity(std::int64_t channels, std::int64_t k) {
  auto kern = zeros(channels, k);
  const auto c = (k - 1) / 2;
  for (std::int64_t ch = 0; ch < channels; ++ch) kern.weights_.at({ch, c, c, c}) = T{1};
  return kern;
}

const char* variant_name(ConvVariant v) { return v == ConvVariant::naive ? "naive" : "blocked"; }

ConvVariant parse_variant(const std::string& s) {
  if (s == "naive") return ConvVariant::naive;
  if (s == "blocked") return ConvVariant::blocked;
  throw DomainError("unknown conv implementation '" + s + "'");
}

ConvImpl default_conv_impl() {
  std::lock_guard lock(default_impl_mutex());
  return default_impl_storage();
}

void set_default_conv_impl(const ConvImpl& impl) {
  std::lock_guard lock(default_impl_mutex());
  default_impl_storage() = impl;
}

template <typename T>
Tensor<T> dwconv3d_forward(const Tensor<T>& input, const Tensor<T>& weights, const ConvImpl& impl) {
  const Geometry g = geometry(input.shape(), weights.shape());
  Tensor<T> out(input.shape());
  if (impl.variant == ConvVariant::naive)
    naive_forward(g, input.ptr(), weights.ptr(), out.ptr());
  else
    blocked_forward(g, impl, input.ptr(), weights.ptr(), out.ptr());
  return out;
}

template <typename T>
Tensor<T> flip_kernel(const Tensor<T>& weights) {
  validate_kernel_shape(weights.shape());
  const std::int64_t c = weights.dim(0), k = weights.dim(1), k3 = k * k * k;
  Tensor<T> out(weights.shape());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < k3; ++i) out[ch * k3 + (k3 - 1 - i)] = weights[ch * k3 + i];
  return out;
}

template <typename T>
Tensor<T> dwconv3d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weights, const ConvImpl& impl) {
  return dwconv3d_forward(grad_out, flip_kernel(weights), impl);
}

template <typename T>
Tensor<T> dwconv3d_backward_weight(const Tensor<T>& input, const Tensor<T>& grad_out, std::int64_t k,
                                   const ConvImpl& impl) {
  require_same_shape(input.shape(), grad_out.shape(), "dwconv3d_backward_weight");
  if (input.ndim() != 5) throw ShapeError("dwconv3d_backward_weight: input must be N,C,D,H,W");
  const Shape wshape{input.dim(1), k, k, k};
  const Geometry g = geometry(input.shape(), wshape);
  Tensor<T> gw(wshape);
  if (impl.variant == ConvVariant::naive)
    naive_backward_weight(g, input.ptr(), grad_out.ptr(), gw.ptr());
  else
    blocked_backward_weight(g, impl, input.ptr(), grad_out.ptr(), gw.ptr());
  return gw;
}

std::string BenchReport::to_json_line() const {
  nlohmann::ordered_json j;
  j["op"] = "dwconv3d";
  j["k"] = k;
  j["size"] = size;
  j["channels"] = channels;
  j["impl"] = impl;
  j["dtype"] = dtype;
  j["median_ms"] = median_ms;
  j["voxels_per_s"] = voxels_per_s;
  j["checksum"] = checksum;
  return j.dump();
}

template <typename T>
BenchReport bench_conv(std::int64_t k, std::int64_t size, const ConvImpl& impl, int repeats, std::int64_t channels,
                       std::uint64_t seed) {
  if (repeats < 3) throw DomainError("bench_conv: repeats must be >= 3");
  Rng rng(seed);
  const auto input = Tensor<T>::randn({1, channels, size, size, size}, rng);
  const auto weights = Tensor<T>::randn({channels, k, k, k}, rng, 1.0 / static_cast<double>(k * k * k));
  std::vector<double> times;
  Tensor<T> out;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    out = dwconv3d_forward(input, weights, impl);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  BenchReport rep;
  rep.k = k;
  rep.size = size;
  rep.channels = channels;
  rep.impl = variant_name(impl.variant);
  rep.dtype = dtype_name(dtype_of<T>::value);
  rep.median_ms = times[times.size() / 2];
  rep.voxels_per_s = static_cast<double>(channels * size * size * size) / (rep.median_ms / 1000.0);
  rep.checksum = checksum(out);
  return rep;
}

#define LKC_INSTANTIATE(T)                                                                                    \
  template class DepthwiseKernel<T>;                                                                          \
  template Tensor<T> dwconv3d_forward(const Tensor<T>&, const Tensor<T>&, const ConvImpl&);                   \
  template Tensor<T> dwconv3d_backward_input(const Tensor<T>&, const Tensor<T>&, const ConvImpl&);            \
  template Tensor<T> dwconv3d_backward_weight(const Tensor<T>&, const Tensor<T>&, std::int64_t,               \
                                              const ConvImpl&);                                               \
  template Tensor<T> flip_kernel(const Tensor<T>&);                                                           \
  template BenchReport bench_conv<T>(std::int64_t, std::int64_t, const ConvImpl&, int, std::int64_t, std::uint64_t);

LKC_INSTANTIATE(float)
LKC_INSTANTIATE(double)
#undef LKC_INSTANTIATE

}  // namespace lkc
