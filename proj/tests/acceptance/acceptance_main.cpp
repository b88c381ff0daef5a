// Acceptance suite: one PASS/FAIL line per criterion.
//
//   lkconv_acceptance [--out DIR] [--only N]...

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lkconv/checks.hpp"
#include "lkconv/harness.hpp"
#include "lkconv/io.hpp"
#include "lkconv/reparam.hpp"

namespace fs = std::filesystem;
using namespace lkc;

namespace {

// Tolerances.
constexpr double kSpotTol = 1e-9;
constexpr double kGradTol = 1e-5;
constexpr double kGradStep = 1e-5;
constexpr double kMergeTol = 1e-12;
constexpr double kEquivTol = 1e-8;
constexpr double kControlMin = 1e-3;
constexpr double kExportTol = 1e-12;
constexpr double kStepRatioTol = 1e-6;
constexpr double kStepRatioValue = 0.133975;
constexpr double kDiceMin = 0.85;
constexpr double kErfTol = 1e-10;
constexpr double kMinSpeedup = 2.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* title;
  double budget_s;
  std::function<Outcome()> run;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor<double> randn(Shape s, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(s), rng, std);
}

// |a - b| / max|b|, computed here rather than by the library.
double rel_dev(const Tensor<double>& a, const Tensor<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

double prior_oracle(std::int64_t x, std::int64_t y, std::int64_t z, std::int64_t k, double alpha) {
  const double c = (k - 1) / 2.0;
  return alpha / (std::sqrt((x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c)) + alpha);
}

// ---------------------------------------------------------------------------

Outcome prior_correctness() {
  std::int64_t grids = 0;
  for (std::int64_t k : {1, 3, 5, 7, 21})
    for (double alpha : {0.5, 1.0, 8.0}) {
      const auto p = frequency_prior(k, alpha);
      const auto& g = p.grid;
      if (g.shape() != Shape{k, k, k}) return {false, "wrong grid shape for k=" + std::to_string(k)};
      auto at = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return g[(x * k + y) * k + z]; };
      const auto c = p.center;
      if (at(c, c, c) != 1.0) return {false, "center != 1"};
      for (std::int64_t x = 0; x < k; ++x)
        for (std::int64_t y = 0; y < k; ++y)
          for (std::int64_t z = 0; z < k; ++z) {
            const double v = at(x, y, z);
            if (!(v > 0.0 && v <= 1.0)) return {false, "value outside (0,1]"};
            if (std::abs(v - prior_oracle(x, y, z, k, alpha)) > kSpotTol) return {false, "oracle mismatch"};
            const std::int64_t q[3] = {x, y, z};
            constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
            for (const auto& pm : perms)
              for (int refl = 0; refl < 8; ++refl) {
                std::int64_t r[3] = {q[pm[0]], q[pm[1]], q[pm[2]]};
                for (int a = 0; a < 3; ++a)
                  if (refl >> a & 1) r[a] = k - 1 - r[a];
                if (at(r[0], r[1], r[2]) != v) return {false, "symmetry broken"};
              }
            // Moving one step toward the center along any axis strictly increases delta.
            for (int a = 0; a < 3; ++a) {
              if (q[a] == c) continue;
              std::int64_t r[3] = {x, y, z};
              r[a] += q[a] < c ? 1 : -1;
              if (!(at(r[0], r[1], r[2]) > v)) return {false, "not monotone"};
            }
          }
      ++grids;
    }
  struct Spot {
    std::int64_t k;
    double alpha;
    std::int64_t x, y, z;
    double want;
  };
  const Spot spots[] = {{3, 1.0, 0, 0, 0, 1.0 / (1.0 + std::sqrt(3.0))},
                        {3, 1.0, 0, 0, 0, 0.3660254037844386},
                        {3, 8.0, 1, 1, 2, 8.0 / 9.0},
                        {21, 0.5, 10, 10, 10, 1.0},
                        {21, 8.0, 10, 10, 10, 1.0},
                        {1, 1.0, 0, 0, 0, 1.0}};
  double worst = 0.0;
  for (const auto& s : spots) {
    const auto p = frequency_prior(s.k, s.alpha);
    worst = std::max(worst, std::abs(p.grid[(s.x * s.k + s.y) * s.k + s.z] - s.want));
  }
  if (std::abs(distance(0, 0, 0, 10.0) - std::sqrt(300.0)) > kSpotTol) return {false, "distance example"};
  return {worst <= kSpotTol, std::to_string(grids) + " grids, worst spot error " + fmt(worst)};
}

Outcome gradient_suite() {
  const auto suite = gradcheck_suite(kGradStep, kGradTol);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& s : suite) {
    if (s.report.worst() > worst) {
      worst = s.report.worst();
      worst_name = s.name;
    }
    if (!s.report.pass) failed += " " + s.name;
  }
  const bool ok = all_pass(suite);
  std::string d = std::to_string(suite.size()) + " checks, worst " + fmt(worst) + " (" + worst_name + ")";
  if (!ok) d += ", failed:" + failed;
  return {ok, d};
}

Outcome merge_identity() {
  Rng rng(2024);
  double worst = 0.0;
  const ConvImpl naive = ConvImpl::naive();
  for (int i = 0; i < 50; ++i) {
    const std::int64_t k_large = 3 + 2 * static_cast<std::int64_t>(rng.below(4));         // 3..9
    const std::int64_t k_small = 1 + 2 * static_cast<std::int64_t>(rng.below(k_large / 2 + 1));  // 1..k_large
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t d = 4 + static_cast<std::int64_t>(rng.below(6));
    const std::int64_t h = 4 + static_cast<std::int64_t>(rng.below(6));
    const std::int64_t w = 4 + static_cast<std::int64_t>(rng.below(6));
    CslaBlock<double> b;
    b.w_large = randn({c, k_large, k_large, k_large}, 100 + i);
    b.w_small = randn({c, k_small, k_small, k_small}, 200 + i);
    b.alpha_large = rng.uniform(0.25, 2.0);
    b.alpha_small = rng.uniform(0.25, 2.0);
    const auto x = randn({1 + static_cast<std::int64_t>(rng.below(2)), c, d, h, w}, 300 + i);
    const auto merged = dwconv3d_forward(x, merge_csla(b), ConvImpl::blocked());
    const auto branches = csla_forward(b, x, naive);
    worst = std::max(worst, rel_dev(merged, branches));
  }
  return {worst <= kMergeTol, "50 instances, worst relative deviation " + fmt(worst)};
}

Outcome training_equivalence() {
  EquivalenceConfig cfg;
  cfg.steps = 100;
  cfg.lr_large = 0.0003;
  cfg.lr_small = 0.0006;
  const auto unit = check_equivalence<double>(cfg);
  EquivalenceConfig scaled = cfg;
  scaled.alpha_large = 0.7;
  scaled.alpha_small = 1.6;
  scaled.seed = 5;
  const auto nonunit = check_equivalence<double>(scaled);
  EquivalenceConfig control = cfg;
  control.steps = 10;
  control.uniform_mask = true;
  const auto neg = check_equivalence<double>(control);
  const double dev = std::max(unit.max_out_dev(), nonunit.max_out_dev());
  const auto first = neg.first_step_above(kControlMin);
  const bool ok = dev <= kEquivTol && first >= 1 && first <= 10;
  return {ok, "max output deviation " + fmt(dev) + " over 100 steps; uniform-mask control reaches " +
                  fmt(neg.max_out_dev()) + " (first above 1e-3 at step " + std::to_string(first) + ")"};
}

Outcome bfr_export_identity(const fs::path& out) {
  TrainConfig cfg;
  cfg.mode = ConvMode::bfr;
  cfg.alpha = 1.0;
  cfg.channels = {4, 8};
  cfg.k = 7;
  cfg.size = 16;
  cfg.num_spheres = 1;
  cfg.batch = 1;
  cfg.steps = 500;
  cfg.lr = 1e-3;
  cfg.checkpoint_every = 50;
  cfg.deterministic = true;
  const auto dir = out / "c5_bfr";
  fs::remove_all(dir);
  train(cfg, dir);
  const auto probe = eval_dataset(cfg, 2).images;
  double worst = 0.0;
  int checked = 0;
  for (std::int64_t step = 50; step <= cfg.steps; step += 50) {
    const auto ck = Checkpoint::load(dir / ("step_" + std::to_string(step) + ".ckpt"));
    const auto bfr = load_network<double>(ck);
    // A plain network carrying the exported kernels and every other weight unchanged.
    auto net_cfg = bfr.config();
    net_cfg.mode = ConvMode::plain;
    SegNet<double> plain(net_cfg, 0);
    for (const auto& name : bfr.params().names()) plain.params()[name] = bfr.params()[name];
    for (const auto& name : bfr.buffers().names()) plain.buffers()[name] = bfr.buffers()[name];
    for (std::int64_t b = 0; b < bfr.num_blocks(); ++b) {
      const auto stage = b / net_cfg.blocks_per_stage;
      const auto name = "s" + std::to_string(stage) + ".b" + std::to_string(b % net_cfg.blocks_per_stage) + ".conv.w";
      plain.params()[name] = bfr.export_kernel(b);
    }
    worst = std::max(worst, rel_dev(bfr.predict_logits(probe), plain.predict_logits(probe)));
    ++checked;
  }
  return {checked == 10 && worst <= kExportTol,
          std::to_string(checked) + " checkpoints, worst relative deviation " + fmt(worst)};
}

Outcome bfr_step_scaling() {
  // W' = 0 and a unit target under an impulse give the same dL/dV on every tap.
  const auto prior = frequency_prior(3, 1.0);
  BfrConv<double> layer(Tensor<double>::zeros({1, 3, 3, 3}), prior);
  auto x = Tensor<double>::zeros({1, 1, 3, 3, 3});
  x[13] = 1.0;
  const auto target = Tensor<double>::ones({1, 1, 3, 3, 3});
  LayerLoss<double> loss = [&](ad::Tape<double>&, ad::Var<double> y) { return ad::half_sq_error(y, target); };
  const auto v0 = layer.effective();
  Optimizer<double> opt(OptimKind::sgd, 0.05);
  bfr_train_step(layer, x, loss, opt);
  const auto v1 = layer.effective();
  const double ratio = (v1[0] - v0[0]) / (v1[13] - v0[13]);
  const double corner = 1.0 / (1.0 + std::sqrt(3.0));
  const bool ok = std::abs(ratio - corner * corner) <= kStepRatioTol && std::abs(ratio - kStepRatioValue) <= kStepRatioTol;
  return {ok, "corner/center step ratio " + fmt(ratio) + ", expected " + fmt(corner * corner)};
}

Outcome desk_ablation(const fs::path& out) {
  struct Run {
    ConvMode mode;
    double dice = 0.0;
    bool repeatable = false;
  };
  std::vector<Run> runs{{ConvMode::plain}, {ConvMode::csla}, {ConvMode::bfr}};
  bool ok = true;
  std::string detail;
  for (auto& r : runs) {
    TrainConfig cfg;
    cfg.mode = r.mode;
    if (r.mode == ConvMode::bfr) cfg.alpha = 1.0;
    cfg.optimizer = OptimKind::adamw;
    cfg.lr = 0.0001;
    cfg.channels = {4, 8};
    cfg.k = 7;
    cfg.size = 32;
    cfg.batch = 2;
    cfg.steps = 1500;
    cfg.seed = 0;
    cfg.deterministic = true;
    const auto a = out / ("c7_" + std::string(mode_name(r.mode)));
    const auto b = out / ("c7_" + std::string(mode_name(r.mode)) + "_repeat");
    fs::remove_all(a);
    fs::remove_all(b);
    train(cfg, a);
    train(cfg, b);
    r.repeatable = slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl") &&
                   slurp(a / "final.ckpt") == slurp(b / "final.ckpt");
    const auto ds = eval_dataset(cfg, 8);
    r.dice = evaluate_checkpoint(a / "final.ckpt", AnyTensor(ds.images), ds.labels).mean;
    ok = ok && r.repeatable && r.dice >= kDiceMin;
    detail += std::string(detail.empty() ? "" : ", ") + mode_name(r.mode) + " " + fmt(r.dice) +
              (r.repeatable ? "" : " (NOT repeatable)");
  }
  auto order = runs;
  std::stable_sort(order.begin(), order.end(), [](const Run& x, const Run& y) { return x.dice > y.dice; });
  detail += "; ordering:";
  for (const auto& r : order) detail += std::string(" ") + mode_name(r.mode);
  return {ok, "held-out mean Dice " + detail};
}

Outcome erf_property() {
  double worst = 0.0;
  for (std::int64_t k : {3, 7, 21})
    for (double alpha : {0.5, 1.0, 8.0}) {
      const std::int64_t size = k + 4;
      const auto map = single_layer_erf(ConvMode::bfr, k, alpha, size);
      const std::int64_t lo = (size - k) / 2;
      const double center = map[((size / 2) * size + size / 2) * size + size / 2];
      if (!(center > 0.0)) return {false, "empty ERF"};
      for (std::int64_t z = 0; z < size; ++z)
        for (std::int64_t y = 0; y < size; ++y)
          for (std::int64_t x = 0; x < size; ++x) {
            const bool inside = z >= lo && z < lo + k && y >= lo && y < lo + k && x >= lo && x < lo + k;
            const double want = inside ? prior_oracle(z - lo, y - lo, x - lo, k, alpha) : 0.0;
            worst = std::max(worst, std::abs(map[(z * size + y) * size + x] / center - want));
          }
    }
  return {worst <= kErfTol, "9 layers, worst deviation from the prior " + fmt(worst)};
}

Outcome performance(const fs::path& out) {
  const auto naive = bench_conv<double>(21, 32, ConvImpl::naive(), 3, 1, 7);
  const auto blocked = bench_conv<double>(21, 32, ConvImpl::blocked(), 5, 1, 7);
  const double speedup = naive.median_ms / blocked.median_ms;
  const bool same = naive.checksum == blocked.checksum;
  std::ofstream rep(out / "bench.jsonl");
  rep << naive.to_json_line() << "\n" << blocked.to_json_line() << "\n";
  nlohmann::ordered_json s{{"speedup", speedup}, {"checksums_match", same}};
  rep << s.dump() << "\n";
  return {same && speedup >= kMinSpeedup, "naive " + fmt(naive.median_ms) + " ms, blocked " +
                                              fmt(blocked.median_ms) + " ms, speedup " + fmt(speedup) +
                                              (same ? ", checksums identical" : ", checksums differ") + "; report " +
                                              (out / "bench.jsonl").string()};
}

Outcome round_trips(const fs::path& out) {
  const auto dir = out / "c10";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(11);
  auto f64 = Tensor<double>::randn({2, 3, 4, 5}, rng);
  f64[0] = -0.0;
  f64[1] = std::numeric_limits<double>::denorm_min();
  f64[2] = std::numeric_limits<double>::infinity();
  f64[3] = std::numeric_limits<double>::quiet_NaN();
  auto f32 = Tensor<float>::randn({3, 7, 2}, rng);
  f32[0] = -0.0f;
  f32[1] = std::numeric_limits<float>::denorm_min();
  Tensor<std::uint8_t> u8({4, 4, 4});
  for (std::size_t i = 0; i < u8.size(); ++i) u8[i] = static_cast<std::uint8_t>(i * 37);

  write_vol3(dir / "a.vol3", f64);
  write_vol3(dir / "b.vol3", f32);
  write_vol3(dir / "c.vol3", u8);
  bool vol = read_vol3<double>(dir / "a.vol3").bitwise_equal(f64) && read_vol3<float>(dir / "b.vol3").bitwise_equal(f32) &&
             read_vol3<std::uint8_t>(dir / "c.vol3").bitwise_equal(u8);
  write_vol3(dir / "a2.vol3", read_vol3_any(dir / "a.vol3"));
  vol = vol && slurp(dir / "a.vol3") == slurp(dir / "a2.vol3");

  Checkpoint ck;
  ck.put("x/f64", f64);
  ck.put("x/f32", f32);
  ck.put("x/u8", u8);
  ck.put_text("note", "round trip");
  ck.save(dir / "a.ckpt");
  const auto back = Checkpoint::load(dir / "a.ckpt");
  back.save(dir / "a2.ckpt");
  const bool ckpt = back.get<double>("x/f64").bitwise_equal(f64) && back.get<float>("x/f32").bitwise_equal(f32) &&
                    back.get<std::uint8_t>("x/u8").bitwise_equal(u8) && back.get_text("note") == "round trip" &&
                    slurp(dir / "a.ckpt") == slurp(dir / "a2.ckpt");

  bool resume = true;
  for (ConvMode mode : {ConvMode::plain, ConvMode::bfr, ConvMode::csla}) {
    TrainConfig c;
    c.mode = mode;
    c.channels = {4, 8};
    c.k = 5;
    c.size = 16;
    c.num_spheres = 1;
    c.batch = 2;
    c.steps = 12;
    c.lr = 1e-3;
    c.checkpoint_every = 4;
    c.deterministic = true;
    const auto full = dir / (std::string("full_") + mode_name(mode));
    const auto part = dir / (std::string("part_") + mode_name(mode));
    train(c, full);
    auto first = c;
    first.steps = 5;
    train(first, part);
    train(c, part, part / "step_4.ckpt");
    resume = resume && slurp(full / "final.ckpt") == slurp(part / "final.ckpt") &&
             slurp(full / "metrics.jsonl") == slurp(part / "metrics.jsonl");
  }
  return {vol && ckpt && resume, std::string("vol3 ") + (vol ? "bitwise" : "MISMATCH") + ", ckpt " +
                                     (ckpt ? "bitwise" : "MISMATCH") + ", resume " +
                                     (resume ? "bitwise in 3 modes" : "MISMATCH")};
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"lkconv acceptance suite"};
  std::string out_dir = "acceptance_out";
  std::vector<int> only;
  app.add_option("--out", out_dir, "Scratch and report directory");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const fs::path out(out_dir);
  fs::create_directories(out);

  const std::vector<Criterion> criteria{
      {1, "prior correctness", 1, prior_correctness},
      {2, "gradient suite", 120, gradient_suite},
      {3, "merge identity", 30, merge_identity},
      {4, "training equivalence", 60, training_equivalence},
      {5, "bfr export identity", 120, [&] { return bfr_export_identity(out); }},
      {6, "bfr step scaling", 1, bfr_step_scaling},
      {7, "desk-scale ablation", 1800, [&] { return desk_ablation(out); }},
      {8, "erf property", 5, erf_property},
      {9, "performance", 0, [&] { return performance(out); }},
      {10, "round trips", 60, [&] { return round_trips(out); }},
  };

  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream time;
    time.precision(3);
    time << secs << " s";
    if (c.budget_s > 0) time << ", budget " << c.budget_s << " s";
    std::cout << "criterion " << c.id << " [" << c.title << "]: " << (r.pass ? "PASS" : "FAIL") << " - " << r.detail
              << " (" << time.str() << ")" << std::endl;
    summary.push_back(
        {{"criterion", c.id}, {"title", c.title}, {"pass", r.pass}, {"detail", r.detail}, {"seconds", secs}});
    if (!r.pass) ++failures;
  }
  std::ofstream(out / "acceptance.json") << summary.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
