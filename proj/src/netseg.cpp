#include "lkconv/netseg.hpp"

#include <cmath>

namespace lkc {

const char* mode_name(ConvMode m) {
  switch (m) {
    case ConvMode::plain: return "plain";
    case ConvMode::bfr: return "bfr";
    case ConvMode::csla: return "csla";
  }
  return "?";
}

ConvMode parse_mode(const std::string& s) {
  if (s == "plain") return ConvMode::plain;
  if (s == "bfr") return ConvMode::bfr;
  if (s == "csla") return ConvMode::csla;
  throw DomainError("unknown conv mode '" + s + "' (expected plain, bfr or csla)");
}

void SegNetConfig::validate() const {
  if (channels.empty()) throw DomainError("network needs at least one stage");
  if (kernels.size() != channels.size())
    throw DomainError("kernels lists " + std::to_string(kernels.size()) + " stages, channels " +
                      std::to_string(channels.size()));
  for (auto c : channels)
    if (c < 1) throw DomainError("channel counts must be >= 1");
  for (auto k : kernels)
    if (k < 1 || k % 2 == 0) throw DomainError("kernel sizes must be odd and positive, got " + std::to_string(k));
  if (in_channels < 1) throw DomainError("in_channels must be >= 1");
  if (num_classes < 2 || num_classes > 256) throw DomainError("num_classes must be in [2, 256]");
  if (blocks_per_stage < 1) throw DomainError("blocks_per_stage must be >= 1");
  if (!(bn_eps > 0.0)) throw DomainError("bn_eps must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw DomainError("bn_momentum must be in (0, 1]");
  if (mode == ConvMode::bfr && !(alpha > 0.0)) throw DomainError("alpha must be positive");
  if (mode == ConvMode::csla) {
    if (small_k < 1 || small_k % 2 == 0) throw DomainError("small_k must be odd and positive");
    for (auto k : kernels)
      if (small_k > k) throw DomainError("small_k exceeds a stage kernel size");
  }
}

template <typename T>
Tensor<T>& ParamSet<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ShapeError("duplicate entry '" + name + "'");
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

template <typename T>
Tensor<T>& ParamSet<T>::operator[](const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("no entry named '" + name + "'");
  return values_[it->second];
}

template <typename T>
const Tensor<T>& ParamSet<T>::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("no entry named '" + name + "'");
  return values_[it->second];
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
std::string SegNet<T>::block_prefix(std::int64_t stage, std::int64_t j) const {
  return "s" + std::to_string(stage) + ".b" + std::to_string(j);
}

template <typename T>
SegNet<T>::SegNet(SegNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& ch = cfg_.channels;
  const std::size_t s = cfg_.stages();
  auto fan_in = [](std::int64_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  params_.add("stem.w", Tensor<T>::randn({ch[0], cfg_.in_channels}, rng, fan_in(cfg_.in_channels)));
  for (std::size_t i = 0; i < s; ++i) {
    const std::int64_t c = ch[i], k = cfg_.kernels[i];
    for (std::int64_t j = 0; j < cfg_.blocks_per_stage; ++j) {
      const auto p = block_prefix(static_cast<std::int64_t>(i), j);
      params_.add(p + ".bn.gamma", Tensor<T>::ones({c}));
      params_.add(p + ".bn.beta", Tensor<T>::zeros({c}));
      buffers_.add(p + ".bn.mean", Tensor<T>::zeros({c}));
      buffers_.add(p + ".bn.var", Tensor<T>::ones({c}));
      if (cfg_.mode == ConvMode::csla) {
        const std::int64_t ks = cfg_.small_k;
        params_.add(p + ".conv.wl", Tensor<T>::randn({c, k, k, k}, rng, fan_in(k * k * k)));
        params_.add(p + ".conv.ws", Tensor<T>::randn({c, ks, ks, ks}, rng, fan_in(ks * ks * ks)));
      } else {
        params_.add(p + ".conv.w", Tensor<T>::randn({c, k, k, k}, rng, fan_in(k * k * k)));
      }
    }
    if (i + 1 < s) {
      const auto n = std::to_string(i);
      params_.add("down" + n + ".w", Tensor<T>::randn({ch[i + 1], c, 2, 2, 2}, rng, fan_in(8 * c)));
    }
    priors_.push_back(cfg_.mode == ConvMode::bfr ? frequency_prior(k, cfg_.alpha).grid_as<T>() : Tensor<T>({1}));
  }
  for (std::size_t i = s - 1; i-- > 0;) {
    const auto n = std::to_string(i);
    params_.add("up" + n + ".w", Tensor<T>::randn({ch[i], ch[i + 1]}, rng, fan_in(ch[i + 1])));
    params_.add("up" + n + ".b", Tensor<T>::zeros({ch[i]}));
    params_.add("fuse" + n + ".w", Tensor<T>::randn({ch[i], 2 * ch[i]}, rng, fan_in(2 * ch[i])));
    params_.add("fuse" + n + ".b", Tensor<T>::zeros({ch[i]}));
  }
  params_.add("head.w", Tensor<T>::randn({cfg_.num_classes, ch[0]}, rng, fan_in(ch[0])));
  params_.add("head.b", Tensor<T>::zeros({cfg_.num_classes}));
}

template <typename T>
Bound<T> SegNet<T>::bind(ad::Tape<T>& tape) const {
  Bound<T> b;
  for (const auto& n : params_.names()) b.emplace(n, tape.parameter(params_[n], n));
  return b;
}

template <typename T>
Bound<T> SegNet<T>::bind_constant(ad::Tape<T>& tape) const {
  Bound<T> b;
  for (const auto& n : params_.names()) b.emplace(n, tape.constant(params_[n]));
  return b;
}

template <typename T>
std::int64_t SegNet<T>::num_blocks() const {
  return static_cast<std::int64_t>(cfg_.stages()) * cfg_.blocks_per_stage;
}

template <typename T>
ad::Var<T> SegNet<T>::encoder_block(const Bound<T>& p, const std::string& prefix, std::size_t stage, ad::Var<T> z,
                                    bool training, std::vector<ad::BatchStats>* stats) const {
  const auto& gamma = p.at(prefix + ".bn.gamma");
  const auto& beta = p.at(prefix + ".bn.beta");
  ad::Var<T> n;
  if (training) {
    ad::BatchStats st;
    n = ad::batch_norm_train(z, gamma, beta, cfg_.bn_eps, &st);
    if (stats) stats->push_back(std::move(st));
  } else {
    n = ad::batch_norm_eval(z, gamma, beta, buffers_[prefix + ".bn.mean"], buffers_[prefix + ".bn.var"], cfg_.bn_eps);
  }
  ad::Var<T> y;
  switch (cfg_.mode) {
    case ConvMode::plain: y = ad::dwconv3d(n, p.at(prefix + ".conv.w")); break;
    case ConvMode::bfr: y = ad::dwconv3d(n, ad::scale_by_grid(p.at(prefix + ".conv.w"), priors_[stage])); break;
    case ConvMode::csla:
      y = csla_forward(n, p.at(prefix + ".conv.wl"), p.at(prefix + ".conv.ws"), cfg_.alpha_large, cfg_.alpha_small);
      break;
  }
  return ad::gelu(y);
}

template <typename T>
ad::Var<T> SegNet<T>::forward(const Bound<T>& p, ad::Var<T> x, bool training, std::vector<ad::BatchStats>* stats,
                              std::int64_t layer) const {
  const Shape& xs = x.shape();
  if (xs.size() != 5 || xs[1] != cfg_.in_channels)
    throw ShapeError("network input must be (N," + std::to_string(cfg_.in_channels) + ",D,H,W), got " + shape_str(xs));
  const std::int64_t m = cfg_.size_multiple();
  if (xs[2] % m || xs[3] % m || xs[4] % m)
    throw ShapeError("spatial dims of " + shape_str(xs) + " must be divisible by " + std::to_string(m));

  const std::size_t s = cfg_.stages();
  // The stem and the downsampling convs feed batch norm, so they carry no bias.
  auto z = ad::pointwise(x, p.at("stem.w"), x.tape->constant(Tensor<T>::zeros({cfg_.channels[0]})));
  std::vector<ad::Var<T>> skips;
  std::int64_t block = 0;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::int64_t j = 0; j < cfg_.blocks_per_stage; ++j, ++block) {
      z = encoder_block(p, block_prefix(static_cast<std::int64_t>(i), j), i, z, training, stats);
      if (block == layer) return z;
    }
    skips.push_back(z);
    if (i + 1 < s) {
      const auto n = std::to_string(i);
      z = ad::downsample(z, p.at("down" + n + ".w"), x.tape->constant(Tensor<T>::zeros({cfg_.channels[i + 1]})));
    }
  }
  for (std::size_t i = s - 1; i-- > 0;) {
    const auto n = std::to_string(i);
    auto up = ad::upsample2(ad::pointwise(z, p.at("up" + n + ".w"), p.at("up" + n + ".b")));
    z = ad::gelu(ad::pointwise(ad::concat_channels(up, skips[i]), p.at("fuse" + n + ".w"), p.at("fuse" + n + ".b")));
  }
  return ad::pointwise(z, p.at("head.w"), p.at("head.b"));
}

template <typename T>
Tensor<T> SegNet<T>::predict_logits(const Tensor<T>& x) const {
  ad::Tape<T> tape;
  auto p = bind_constant(tape);
  return forward(p, tape.constant(x), false).value();
}

template <typename T>
Tensor<std::uint8_t> SegNet<T>::predict_labels(const Tensor<T>& x) const {
  return argmax_channels(predict_logits(x));
}

template <typename T>
void SegNet<T>::update_running_stats(const std::vector<ad::BatchStats>& stats) {
  if (static_cast<std::int64_t>(stats.size()) != num_blocks())
    throw ShapeError("expected batch statistics for " + std::to_string(num_blocks()) + " blocks");
  const double mo = cfg_.bn_momentum;
  std::size_t b = 0;
  for (std::size_t i = 0; i < cfg_.stages(); ++i)
    for (std::int64_t j = 0; j < cfg_.blocks_per_stage; ++j, ++b) {
      const auto p = block_prefix(static_cast<std::int64_t>(i), j);
      auto& mean = buffers_[p + ".bn.mean"];
      auto& var = buffers_[p + ".bn.var"];
      const auto& st = stats[b];
      const double unbias = st.count > 1 ? static_cast<double>(st.count) / static_cast<double>(st.count - 1) : 1.0;
      for (std::size_t c = 0; c < mean.size(); ++c) {
        mean[c] = static_cast<T>((1.0 - mo) * mean[c] + mo * st.mean[c]);
        var[c] = static_cast<T>((1.0 - mo) * var[c] + mo * st.var[c] * unbias);
      }
    }
}

template <typename T>
ParamRefs<T> SegNet<T>::param_refs() {
  ParamRefs<T> refs;
  for (const auto& n : params_.names()) refs.emplace_back(n, &params_[n]);
  return refs;
}

template <typename T>
std::vector<std::string> SegNet<T>::parallel_params() const {
  std::vector<std::string> out;
  for (const auto& n : params_.names())
    if (n.size() > 3 && n.compare(n.size() - 3, 3, ".ws") == 0) out.push_back(n);
  return out;
}

template <typename T>
Tensor<T> SegNet<T>::export_kernel(std::int64_t block) const {
  if (block < 0 || block >= num_blocks()) throw ShapeError("block index out of range");
  const auto stage = block / cfg_.blocks_per_stage;
  const auto p = block_prefix(stage, block % cfg_.blocks_per_stage);
  switch (cfg_.mode) {
    case ConvMode::plain: return params_[p + ".conv.w"];
    case ConvMode::bfr: {
      const auto& w = params_[p + ".conv.w"];
      const auto& g = priors_[static_cast<std::size_t>(stage)];
      Tensor<T> v(w.shape());
      for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] * g[i % g.size()];
      return v;
    }
    case ConvMode::csla: {
      CslaBlock<T> b{params_[p + ".conv.wl"], params_[p + ".conv.ws"], cfg_.alpha_large, cfg_.alpha_small};
      return merge_csla(b).weights();
    }
  }
  return {};
}

template <typename T>
void SegNet<T>::save(Checkpoint& ck) const {
  for (const auto& n : params_.names()) ck.put("param/" + n, params_[n]);
  for (const auto& n : buffers_.names()) ck.put("buffer/" + n, buffers_[n]);
}

template <typename T>
void SegNet<T>::load(const Checkpoint& ck) {
  auto restore = [&ck](ParamSet<T>& set, const std::string& prefix) {
    for (const auto& n : set.names()) {
      const auto& src = ck.get<T>(prefix + n);
      if (src.shape() != set[n].shape())
        throw ShapeError("checkpoint entry " + prefix + n + " has shape " + shape_str(src.shape()) + ", model expects " +
                         shape_str(set[n].shape()));
      set[n] = src;
    }
  };
  restore(params_, "param/");
  restore(buffers_, "buffer/");
}

namespace {

void check_labels(const Tensor<std::uint8_t>& t, std::int64_t k, const char* what) {
  for (auto v : t.data())
    if (v >= k)
      throw DomainError(std::string(what) + " contains class " + std::to_string(v) + " but only " + std::to_string(k) +
                        " classes exist");
}

}  // namespace

double dice_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, std::int64_t class_id,
                  std::int64_t num_classes) {
  require_same_shape(pred.shape(), gt.shape(), "dice_score");
  if (class_id < 0 || class_id >= num_classes) throw DomainError("unknown class id " + std::to_string(class_id));
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == class_id, b = gt[i] == class_id;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<double> dice_per_class(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                                   std::int64_t num_classes) {
  check_labels(pred, num_classes, "prediction");
  check_labels(gt, num_classes, "ground truth");
  std::vector<double> out;
  for (std::int64_t c = 0; c < num_classes; ++c) out.push_back(dice_score(pred, gt, c, num_classes));
  return out;
}

double mean_dice(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, std::int64_t num_classes) {
  const auto d = dice_per_class(pred, gt, num_classes);
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

template <typename T>
Tensor<T> erf_map(const Model<T>& model, const Tensor<T>& input) {
  if (input.ndim() != 5) throw ShapeError("erf_map input must be N,C,D,H,W");
  ad::Tape<T> tape;
  auto x = tape.parameter(input, "input");
  auto g = tape.backward(ad::center_sum(model(tape, x), 0));
  const auto& gx = g["input"];
  const std::int64_t c = input.dim(1), d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const std::int64_t vol = d * h * w;
  Tensor<T> out = Tensor<T>::zeros({d, h, w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t v = 0; v < vol; ++v) out[v] += std::abs(gx[ch * vol + v]);
  return out;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class SegNet<float>;
template class SegNet<double>;
template Tensor<float> erf_map(const Model<float>&, const Tensor<float>&);
template Tensor<double> erf_map(const Model<double>&, const Tensor<double>&);

}  // namespace lkc
