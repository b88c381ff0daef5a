#include "lkconv/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "lkconv/rng.hpp"

namespace lkc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Sphere {
  double z, y, x, r;
};

constexpr int kPlacementAttempts = 1000;

std::vector<Sphere> place_spheres(Rng& rng, const SynthConfig& cfg) {
  std::vector<Sphere> placed;
  const double s = static_cast<double>(cfg.size);
  for (std::int64_t j = 0; j < cfg.num_spheres; ++j) {
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      Sphere c;
      c.r = rng.uniform(cfg.radius_min, cfg.radius_max);
      c.z = rng.uniform(c.r, s - 1.0 - c.r);
      c.y = rng.uniform(c.r, s - 1.0 - c.r);
      c.x = rng.uniform(c.r, s - 1.0 - c.r);
      ok = true;
      for (const auto& o : placed) {
        const double d = std::sqrt((c.z - o.z) * (c.z - o.z) + (c.y - o.y) * (c.y - o.y) + (c.x - o.x) * (c.x - o.x));
        if (d < c.r + o.r + 1.0) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back(c);
    }
    if (!ok)
      throw DomainError("synth: could not place " + std::to_string(cfg.num_spheres) + " non-overlapping spheres in a " +
                        std::to_string(cfg.size) + "^3 volume");
  }
  return placed;
}

}  // namespace

Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.n <= 0 || cfg.size <= 0) throw DomainError("synth: n and size must be positive");
  if (cfg.num_classes < 2) throw DomainError("synth: need at least 2 classes");
  if (cfg.num_spheres < 1) throw DomainError("synth: need at least one sphere");
  if (!(cfg.radius_min > 0.0) || cfg.radius_max < cfg.radius_min) throw DomainError("synth: bad radius range");
  if (2.0 * cfg.radius_max + 1.0 > static_cast<double>(cfg.size))
    throw DomainError("synth: volume too small for radius " + std::to_string(cfg.radius_max));
  if (!(cfg.noise >= 0.0) || !(cfg.edge > 0.0)) throw DomainError("synth: noise must be >= 0 and edge > 0");

  const std::int64_t s = cfg.size, vol = s * s * s;
  Dataset ds{Tensor<double>({cfg.n, 1, s, s, s}), Tensor<std::uint8_t>({cfg.n, s, s, s})};
  for (std::int64_t n = 0; n < cfg.n; ++n) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(n)));
    const auto spheres = place_spheres(rng, cfg);
    double* img = ds.images.ptr() + n * vol;
    std::uint8_t* lab = ds.labels.ptr() + n * vol;
    std::vector<double> bump(vol, 0.0);
    for (std::size_t j = 0; j < spheres.size(); ++j) {
      const auto& c = spheres[j];
      const auto cls = static_cast<std::uint8_t>(1 + j % static_cast<std::size_t>(cfg.num_classes - 1));
      const auto lo = [&](double ctr) { return std::max<std::int64_t>(0, static_cast<std::int64_t>(ctr - c.r - 4 * cfg.edge)); };
      const auto hi = [&](double ctr) {
        return std::min<std::int64_t>(s - 1, static_cast<std::int64_t>(ctr + c.r + 4 * cfg.edge) + 1);
      };
      for (std::int64_t z = lo(c.z); z <= hi(c.z); ++z)
        for (std::int64_t y = lo(c.y); y <= hi(c.y); ++y)
          for (std::int64_t x = lo(c.x); x <= hi(c.x); ++x) {
            const double dz = z - c.z, dy = y - c.y, dx = x - c.x;
            const double d = std::sqrt(dz * dz + dy * dy + dx * dx);
            const std::int64_t v = (z * s + y) * s + x;
            bump[v] = std::max(bump[v], cfg.amplitude / (1.0 + std::exp((d - c.r) / cfg.edge)));
            if (d <= c.r) lab[v] = cls;
          }
    }
    for (std::int64_t v = 0; v < vol; ++v) img[v] = bump[v] + cfg.noise * rng.normal();
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw DomainError("config: '" + key + "' expects a number, got '" + v + "'");
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw DomainError("config: '" + key + "' expects an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DomainError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DomainError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw DomainError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [key, v] : kv) {
    if (key == "mode") mode = parse_mode(v);
    else if (key == "optimizer") optimizer = parse_optim(v);
    else if (key == "lr") lr = to_double(key, v);
    else if (key == "parallel_lr") parallel_lr = to_double(key, v);
    else if (key == "alpha") alpha = to_double(key, v);
    else if (key == "weight_decay") weight_decay = to_double(key, v);
    else if (key == "k") k = to_int(key, v);
    else if (key == "small_k") small_k = to_int(key, v);
    else if (key == "channels") {
      channels.clear();
      std::istringstream in(v);
      std::string tok;
      while (std::getline(in, tok, ',')) channels.push_back(to_int(key, trim(tok)));
    } else if (key == "steps") steps = to_int(key, v);
    else if (key == "batch") batch = to_int(key, v);
    else if (key == "seed") seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "dtype") dtype = v;
    else if (key == "size") size = to_int(key, v);
    else if (key == "num_classes") num_classes = to_int(key, v);
    else if (key == "num_spheres") num_spheres = to_int(key, v);
    else if (key == "amplitude") amplitude = to_double(key, v);
    else if (key == "noise") noise = to_double(key, v);
    else if (key == "checkpoint_every") checkpoint_every = to_int(key, v);
    else if (key == "deterministic") deterministic = to_bool(key, v);
    else if (key == "threads") threads = static_cast<int>(to_int(key, v));
    else throw DomainError("config: unknown key '" + key + "'");
  }
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  cfg.apply(parse_key_values(text));
  return cfg;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "mode = " << mode_name(mode) << "\n";
  os << "optimizer = " << optim_name(optimizer) << "\n";
  os << "lr = " << fmt_double(lr) << "\n";
  if (parallel_lr) os << "parallel_lr = " << fmt_double(*parallel_lr) << "\n";
  if (alpha) os << "alpha = " << fmt_double(*alpha) << "\n";
  os << "weight_decay = " << fmt_double(weight_decay) << "\n";
  os << "k = " << k << "\n";
  os << "small_k = " << small_k << "\n";
  os << "channels = ";
  for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
  os << "\n";
  os << "steps = " << steps << "\n";
  os << "batch = " << batch << "\n";
  os << "seed = " << seed << "\n";
  os << "dtype = " << dtype << "\n";
  os << "size = " << size << "\n";
  os << "num_classes = " << num_classes << "\n";
  os << "num_spheres = " << num_spheres << "\n";
  os << "amplitude = " << fmt_double(amplitude) << "\n";
  os << "noise = " << fmt_double(noise) << "\n";
  os << "checkpoint_every = " << checkpoint_every << "\n";
  os << "deterministic = " << (deterministic ? "true" : "false") << "\n";
  os << "threads = " << threads << "\n";
  return os.str();
}

void TrainConfig::validate() const {
  if (parallel_lr && mode != ConvMode::csla) throw DomainError("config: parallel_lr is only valid with mode = csla");
  if (alpha && mode != ConvMode::bfr) throw DomainError("config: alpha is only valid with mode = bfr");
  if (!(lr > 0.0)) throw DomainError("config: lr must be positive");
  if (parallel_lr && !(*parallel_lr > 0.0)) throw DomainError("config: parallel_lr must be positive");
  if (alpha && !(*alpha > 0.0)) throw DomainError("config: alpha must be positive");
  if (!(weight_decay >= 0.0)) throw DomainError("config: weight_decay must be >= 0");
  if (steps < 0) throw DomainError("config: steps must be >= 0");
  if (batch < 1) throw DomainError("config: batch must be >= 1");
  if (dtype != "f32" && dtype != "f64") throw DomainError("config: dtype must be f32 or f64");
  if (checkpoint_every < 0) throw DomainError("config: checkpoint_every must be >= 0");
  if (threads < 1) throw DomainError("config: threads must be >= 1");
  if (num_classes > 255) throw DomainError("config: at most 255 classes");
  net_config().validate();
  if (size % net_config().size_multiple() != 0)
    throw ShapeError("config: size " + std::to_string(size) + " must be divisible by " +
                     std::to_string(net_config().size_multiple()));
  // Dry run of the sphere placement so an impossible layout fails before training.
  synth_dataset(synth_config(seed, 1));
}

SegNetConfig TrainConfig::net_config() const {
  SegNetConfig n;
  n.channels = channels;
  n.kernels.assign(channels.size(), k);
  n.num_classes = num_classes;
  n.mode = mode;
  n.alpha = alpha_or_default();
  n.small_k = small_k;
  return n;
}

SynthConfig TrainConfig::synth_config(std::uint64_t s, std::int64_t n) const {
  SynthConfig c;
  c.seed = s;
  c.n = n;
  c.size = size;
  c.num_spheres = num_spheres;
  c.num_classes = num_classes;
  c.amplitude = amplitude;
  c.noise = noise;
  return c;
}

// ---------------------------------------------------------------------------
// Training

std::string MetricsRecord::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["mean_dice"] = mean_dice;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::vector<MetricsRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step").get<std::int64_t>(), j.at("loss").get<double>(), j.at("mean_dice").get<double>(),
                   j.at("wall_ms").get<double>()});
  }
  return out;
}

Dataset training_batch(const TrainConfig& cfg, std::int64_t step) {
  return synth_dataset(cfg.synth_config(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)), cfg.batch));
}

Dataset eval_dataset(const TrainConfig& cfg, std::int64_t n) {
  // Stream index far past any training step so the two never share a seed.
  return synth_dataset(cfg.synth_config(derive_seed(cfg.seed + 1, 0xE7A1ULL << 32), n));
}

namespace {

template <typename T>
void save_state(const fs::path& path, const TrainConfig& cfg, const SegNet<T>& net, const Optimizer<T>& opt,
                std::int64_t step, double best_dice, std::int64_t best_step) {
  Checkpoint ck;
  ck.put_text("config", cfg.to_text());
  net.save(ck);
  opt.save(ck);
  ck.put("train/step", Tensor<double>({1}, static_cast<double>(step)));
  ck.put("train/best_dice", Tensor<double>({1}, best_dice));
  ck.put("train/best_step", Tensor<double>({1}, static_cast<double>(best_step)));
  ck.save(path);
}

template <typename T>
Optimizer<T> make_optimizer(const TrainConfig& cfg, const SegNet<T>& net) {
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  Optimizer<T> opt(cfg.optimizer, cfg.lr, ac);
  for (const auto& n : net.parallel_params()) opt.set_lr(n, cfg.parallel_lr_or_default());
  return opt;
}

void write_metrics_prefix(const fs::path& path, std::int64_t upto) {
  auto kept = read_metrics(path);
  std::ofstream out(path, std::ios::trunc);
  for (const auto& r : kept)
    if (r.step <= upto) out << r.to_json_line() << "\n";
}

template <typename T>
TrainResult train_typed(const TrainConfig& cfg, const fs::path& out, const std::optional<fs::path>& resume) {
  ConvImpl impl = ConvImpl::blocked();
  impl.threads = cfg.threads;
  impl.deterministic = true;
  const ConvImpl previous = default_conv_impl();
  set_default_conv_impl(impl);
  struct Restore {
    ConvImpl prev;
    ~Restore() { set_default_conv_impl(prev); }
  } restore{previous};

  SegNet<T> net(cfg.net_config(), cfg.seed);
  auto opt = make_optimizer(cfg, net);
  std::int64_t start = 0, best_step = 0;
  double best_dice = -1.0;
  if (resume) {
    const auto ck = Checkpoint::load(*resume);
    const auto saved = TrainConfig::from_text(ck.get_text("config"));
    if (saved.net_config().channels != cfg.net_config().channels || saved.mode != cfg.mode || saved.k != cfg.k ||
        saved.dtype != cfg.dtype || saved.num_classes != cfg.num_classes)
      throw DomainError("resume: checkpoint was written for a different model configuration");
    net.load(ck);
    opt.load(ck);
    start = static_cast<std::int64_t>(ck.get<double>("train/step")[0]);
    best_dice = ck.get<double>("train/best_dice")[0];
    best_step = static_cast<std::int64_t>(ck.get<double>("train/best_step")[0]);
    if (start > cfg.steps) throw DomainError("resume: checkpoint step exceeds the configured step count");
  }

  fs::create_directories(out);
  {
    std::ofstream c(out / "config.txt", std::ios::trunc);
    c << cfg.to_text();
  }
  const fs::path metrics_path = out / "metrics.jsonl";
  if (resume) write_metrics_prefix(metrics_path, start);
  else std::ofstream(metrics_path, std::ios::trunc);
  std::ofstream metrics(metrics_path, std::ios::app);

  TrainResult result;
  if (cfg.steps == 0) save_state(out / "init.ckpt", cfg, net, opt, 0, best_dice, best_step);

  for (std::int64_t step = start + 1; step <= cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = training_batch(cfg, step);
    const Tensor<T> x = batch.images.template cast<T>();

    ad::Tape<T> tape;
    const auto bound = net.bind(tape);
    std::vector<ad::BatchStats> stats;
    auto logits = net.forward(bound, tape.constant(x), true, &stats);
    auto loss = ad::soft_dice_loss(logits, batch.labels);
    const double loss_value = static_cast<double>(loss.value()[0]);
    try {
      if (!std::isfinite(loss_value)) throw NonFiniteError(step, "training loss");
      const auto grads = tape.backward(loss);
      opt.step(net.param_refs(), grads);
    } catch (const NonFiniteError&) {
      save_state(out / "last_good.ckpt", cfg, net, opt, step - 1, best_dice, best_step);
      throw;
    }
    net.update_running_stats(stats);

    MetricsRecord rec;
    rec.step = step;
    rec.loss = loss_value;
    rec.mean_dice = mean_dice(argmax_channels(logits.value()), batch.labels, cfg.num_classes);
    const auto t1 = std::chrono::steady_clock::now();
    rec.wall_ms = cfg.deterministic ? 0.0 : std::chrono::duration<double, std::milli>(t1 - t0).count();
    metrics << rec.to_json_line() << "\n";
    metrics.flush();
    result.records.push_back(rec);

    if (rec.mean_dice > best_dice) {
      best_dice = rec.mean_dice;
      best_step = step;
      save_state(out / "best.ckpt", cfg, net, opt, step, best_dice, best_step);
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_state(out / ("step_" + std::to_string(step) + ".ckpt"), cfg, net, opt, step, best_dice, best_step);
    result.final_loss = loss_value;
  }

  if (cfg.steps > 0) save_state(out / "final.ckpt", cfg, net, opt, cfg.steps, best_dice, best_step);
  result.final_step = cfg.steps;
  result.best_dice = best_dice;
  result.best_step = best_step;
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const fs::path& out, const std::optional<fs::path>& resume) {
  cfg.validate();
  if (cfg.dtype == "f32") return train_typed<float>(cfg, out, resume);
  return train_typed<double>(cfg, out, resume);
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
SegNet<T> load_network(const Checkpoint& ck, TrainConfig* cfg_out) {
  const auto cfg = TrainConfig::from_text(ck.get_text("config"));
  SegNet<T> net(cfg.net_config(), cfg.seed);
  net.load(ck);
  if (cfg_out) *cfg_out = cfg;
  return net;
}

template SegNet<float> load_network<float>(const Checkpoint&, TrainConfig*);
template SegNet<double> load_network<double>(const Checkpoint&, TrainConfig*);

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["per_class"] = per_class;
  j["mean"] = mean;
  j["config"] = config_text;
  return j.dump(2);
}

namespace {

template <typename T>
Tensor<T> as_type(const AnyTensor& images) {
  if (auto* f = std::get_if<Tensor<float>>(&images)) return f->template cast<T>();
  if (auto* d = std::get_if<Tensor<double>>(&images)) return d->template cast<T>();
  throw DomainError("eval: images must be f32 or f64");
}

template <typename T>
EvalReport evaluate_typed(const Checkpoint& ck, const AnyTensor& images, const Tensor<std::uint8_t>& labels) {
  TrainConfig cfg;
  const auto net = load_network<T>(ck, &cfg);
  const Tensor<T> x = as_type<T>(images);
  if (x.ndim() != 5 || x.dim(1) != 1) throw ShapeError("eval: images must be (N,1,D,H,W), got " + shape_str(x.shape()));
  if (labels.shape() != Shape{x.dim(0), x.dim(2), x.dim(3), x.dim(4)})
    throw ShapeError("eval: labels " + shape_str(labels.shape()) + " do not match images " + shape_str(x.shape()));
  for (auto l : labels.data())
    if (l >= cfg.num_classes)
      throw DomainError("eval: label " + std::to_string(l) + " but the model has " + std::to_string(cfg.num_classes) +
                        " classes");
  EvalReport r;
  r.per_class = dice_per_class(net.predict_labels(x), labels, cfg.num_classes);
  double s = 0.0;
  for (double d : r.per_class) s += d;
  r.mean = s / static_cast<double>(r.per_class.size());
  r.config_text = cfg.to_text();
  return r;
}

}  // namespace

EvalReport evaluate_checkpoint(const fs::path& checkpoint, const AnyTensor& images,
                               const Tensor<std::uint8_t>& labels) {
  const auto ck = Checkpoint::load(checkpoint);
  const auto cfg = TrainConfig::from_text(ck.get_text("config"));
  if (cfg.dtype == "f32") return evaluate_typed<float>(ck, images, labels);
  return evaluate_typed<double>(ck, images, labels);
}

// ---------------------------------------------------------------------------
// Effective receptive field

Tensor<double> single_layer_erf(ConvMode mode, std::int64_t k, double alpha, std::int64_t size,
                                std::int64_t small_k) {
  if (size < 1) throw DomainError("erf: size must be positive");
  const auto ones = Tensor<double>::ones({1, k, k, k});
  Model<double> model;
  switch (mode) {
    case ConvMode::plain:
      model = [ones](ad::Tape<double>& t, ad::Var<double> x) { return ad::dwconv3d(x, t.constant(ones)); };
      break;
    case ConvMode::bfr: {
      BfrConv<double> block(ones, frequency_prior(k, alpha));
      model = [block](ad::Tape<double>& t, ad::Var<double> x) { return block.forward(x, t.constant(block.latent)); };
      break;
    }
    case ConvMode::csla: {
      const auto small = Tensor<double>::ones({1, small_k, small_k, small_k});
      model = [ones, small](ad::Tape<double>& t, ad::Var<double> x) {
        return csla_forward(x, t.constant(ones), t.constant(small), 1.0, 1.0);
      };
      break;
    }
  }
  return erf_map(model, Tensor<double>::zeros({1, 1, size, size, size}));
}

Tensor<double> checkpoint_erf(const Checkpoint& ck, std::int64_t layer, std::int64_t size, std::uint64_t seed) {
  TrainConfig cfg = TrainConfig::from_text(ck.get_text("config"));
  SegNet<double> net(cfg.net_config(), cfg.seed);
  if (cfg.dtype == "f32") {
    const auto narrow = load_network<float>(ck);
    for (const auto& n : narrow.params().names()) net.params()[n] = narrow.params()[n].cast<double>();
    for (const auto& n : narrow.buffers().names()) net.buffers()[n] = narrow.buffers()[n].cast<double>();
  } else {
    net.load(ck);
  }
  if (layer < 0 || layer > net.num_blocks())
    throw DomainError("erf: layer must be in [0, " + std::to_string(net.num_blocks()) + "]");
  Rng rng(seed);
  const auto x = Tensor<double>::randn({1, 1, size, size, size}, rng);
  Model<double> model = [&net, layer](ad::Tape<double>& t, ad::Var<double> in) {
    return net.forward(net.bind_constant(t), in, false, nullptr, layer == net.num_blocks() ? -1 : layer);
  };
  return erf_map(model, x);
}

}  // namespace lkc
