// lkconv command line: synth, train, eval, check, bench, prior-dump, erf.
//
// Exit codes: 0 ok, 1 a check failed, 2 bad arguments or config, 3 I/O error,
// 4 non-finite values during training.

#include <algorithm>
#include <fstream>
#include <iostream>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <nlohmann/json.hpp>
#include <sstream>

#include "CLI11.hpp"
#include "lkconv/checks.hpp"
#include "lkconv/harness.hpp"

namespace fs = std::filesystem;
using namespace lkc;

namespace {

struct Shared {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string dtype = "f64";
  bool deterministic = false;
  std::string out;
};

void add_shared(CLI::App* cmd, Shared& s, bool with_config = false) {
  if (with_config) cmd->add_option("--config", s.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", s.seed, "random seed");
  cmd->add_option("--dtype", s.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_flag("--deterministic", s.deterministic, "bitwise-reproducible output (wall times logged as 0)");
  cmd->add_option("--out", s.out, "output directory or file");
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::ordered_json& config,
                    const std::vector<std::string>& files) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = config;
  j["files"] = files;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

std::string fmt_alpha(double a) {
  std::ostringstream os;
  os << a;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Activation buffers are allocated and freed every step; keep them in the heap
  // instead of returning them to the kernel each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Large-kernel depth-wise 3D convolution toolkit"};
  app.require_subcommand(1);

  // synth
  Shared synth_s;
  SynthConfig synth_cfg;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic sphere segmentation dataset");
  add_shared(synth, synth_s);
  synth->add_option("--n", synth_cfg.n, "number of volumes");
  synth->add_option("--size", synth_cfg.size, "volume edge length");
  synth->add_option("--num-spheres", synth_cfg.num_spheres, "spheres per volume");
  synth->add_option("--classes", synth_cfg.num_classes, "class count including background");
  synth->add_option("--noise", synth_cfg.noise, "Gaussian noise std");
  synth->add_option("--amplitude", synth_cfg.amplitude, "sphere intensity");

  // train
  Shared train_s;
  std::vector<std::string> sets;
  std::string resume;
  std::map<std::string, std::string> train_flags;
  std::map<std::string, CLI::Option*> train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train the segmentation network");
  add_shared(train_cmd, train_s, true);
  train_cmd->add_option("--set", sets, "config override key=value (repeatable)");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  for (const char* key : {"mode", "optimizer", "lr", "parallel_lr", "alpha", "k", "steps", "batch", "size",
                          "channels", "num_classes"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    train_opts[key] = train_cmd->add_option(flag, train_flags[key], std::string("config key ") + key);
  }

  // eval
  Shared eval_s;
  std::string eval_ckpt, eval_images, eval_labels;
  auto* eval = app.add_subcommand("eval", "Per-class Dice of a checkpoint on a labelled set");
  add_shared(eval, eval_s);
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--images", eval_images, "VOL3 (N,1,D,H,W)")->required()->check(CLI::ExistingFile);
  eval->add_option("--labels", eval_labels, "VOL3 u8 (N,D,H,W)")->required()->check(CLI::ExistingFile);

  // check
  Shared check_s;
  double check_tol = -1.0, check_h = 1e-5;
  EquivalenceConfig eq_cfg;
  auto* check = app.add_subcommand("check", "Numerical self-checks");
  check->require_subcommand(1);
  auto* gradcheck = check->add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_shared(gradcheck, check_s);
  gradcheck->add_option("--tol", check_tol, "relative error tolerance (default 1e-5)");
  gradcheck->add_option("--step", check_h, "central-difference step h");
  auto* equivalence = check->add_subcommand("equivalence", "Two-branch training vs masked single kernel");
  add_shared(equivalence, check_s);
  equivalence->add_option("--tol", check_tol, "max output deviation (default 1e-8)");
  equivalence->add_option("--steps", eq_cfg.steps);
  equivalence->add_option("--k-large", eq_cfg.k_large);
  equivalence->add_option("--k-small", eq_cfg.k_small);
  equivalence->add_option("--lr-large", eq_cfg.lr_large);
  equivalence->add_option("--lr-small", eq_cfg.lr_small);
  equivalence->add_option("--alpha-large", eq_cfg.alpha_large);
  equivalence->add_option("--alpha-small", eq_cfg.alpha_small);
  equivalence->add_flag("--uniform-mask", eq_cfg.uniform_mask, "negative control without the branch mask");

  // bench
  Shared bench_s;
  std::int64_t bench_k = 21, bench_size = 32, bench_channels = 1;
  int bench_repeats = 5, bench_threads = 1;
  auto* bench = app.add_subcommand("bench", "Time naive vs blocked depth-wise conv");
  add_shared(bench, bench_s);
  bench->add_option("--k", bench_k);
  bench->add_option("--size", bench_size);
  bench->add_option("--channels", bench_channels);
  bench->add_option("--repeats", bench_repeats);
  bench->add_option("--threads", bench_threads);

  // prior-dump
  Shared prior_s;
  std::int64_t prior_k = 21;
  std::vector<double> prior_alphas{1.0};
  auto* prior = app.add_subcommand("prior-dump", "Write frequency-prior grids as VOL3");
  add_shared(prior, prior_s);
  prior->add_option("--k", prior_k);
  prior->add_option("--alpha", prior_alphas, "one or more alpha values");

  // erf
  Shared erf_s;
  std::string erf_ckpt, erf_mode = "bfr";
  std::int64_t erf_layer = 0, erf_k = 21, erf_size = 32;
  double erf_alpha = 1.0;
  auto* erf = app.add_subcommand("erf", "Effective receptive field map as VOL3");
  add_shared(erf, erf_s);
  erf->add_option("--checkpoint", erf_ckpt, "trained network; otherwise a single all-ones layer")
      ->check(CLI::ExistingFile);
  erf->add_option("--layer", erf_layer, "encoder block index (checkpoint mode)");
  erf->add_option("--mode", erf_mode, "plain, bfr or csla (single-layer mode)");
  erf->add_option("--k", erf_k);
  erf->add_option("--alpha", erf_alpha);
  erf->add_option("--size", erf_size);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      synth_cfg.seed = synth_s.seed;
      const fs::path out = synth_s.out.empty() ? "synth" : synth_s.out;
      const auto ds = synth_dataset(synth_cfg);
      fs::create_directories(out);
      if (synth_s.dtype == "f32") write_vol3(out / "images.vol3", ds.images.cast<float>());
      else write_vol3(out / "images.vol3", ds.images);
      write_vol3(out / "labels.vol3", ds.labels);
      std::size_t fg = 0;
      for (auto l : ds.labels.data()) fg += l != 0;
      nlohmann::ordered_json c{{"seed", synth_cfg.seed},        {"n", synth_cfg.n},
                               {"size", synth_cfg.size},        {"num_spheres", synth_cfg.num_spheres},
                               {"num_classes", synth_cfg.num_classes}, {"noise", synth_cfg.noise},
                               {"amplitude", synth_cfg.amplitude}, {"dtype", synth_s.dtype},
                               {"foreground_fraction", static_cast<double>(fg) / ds.labels.size()}};
      write_manifest(out, "synth", c, {"images.vol3", "labels.vol3"});
      std::cout << c.dump() << "\n";
      return 0;
    }

    if (*train_cmd) {
      TrainConfig cfg;
      if (!train_s.config_path.empty()) cfg.apply(parse_key_values(read_text(train_s.config_path)));
      std::map<std::string, std::string> overrides;
      for (const auto& [key, opt] : train_opts)
        if (opt->count()) overrides[key] = train_flags[key];
      for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw DomainError("--set expects key=value, got '" + s + "'");
        overrides[s.substr(0, eq)] = s.substr(eq + 1);
      }
      if (train_cmd->count("--seed")) overrides["seed"] = std::to_string(train_s.seed);
      if (train_cmd->count("--dtype")) overrides["dtype"] = train_s.dtype;
      if (train_s.deterministic) overrides["deterministic"] = "true";
      cfg.apply(parse_key_values([&] {
        std::string text;
        for (const auto& [k, v] : overrides) text += k + " = " + v + "\n";
        return text;
      }()));
      const fs::path out = train_s.out.empty() ? "run" : train_s.out;
      std::optional<fs::path> resume_path;
      if (!resume.empty()) resume_path = resume;
      const auto r = train(cfg, out, resume_path);
      nlohmann::ordered_json j{{"final_step", r.final_step}, {"final_loss", r.final_loss},
                               {"best_dice", r.best_dice},   {"best_step", r.best_step},
                               {"out", out.string()}};
      std::cout << j.dump() << "\n";
      return 0;
    }

    if (*eval) {
      const auto labels_any = read_vol3_any(eval_labels);
      const auto* labels = std::get_if<Tensor<std::uint8_t>>(&labels_any);
      if (!labels) throw DomainError("eval: labels must be u8");
      const auto report = evaluate_checkpoint(eval_ckpt, read_vol3_any(eval_images), *labels);
      const std::string json = report.to_json();
      if (!eval_s.out.empty()) write_text(eval_s.out, json + "\n");
      std::cout << json << "\n";
      return 0;
    }

    if (*gradcheck) {
      const double tol = check_tol < 0 ? 1e-5 : check_tol;
      const auto suite = gradcheck_suite(check_h, tol);
      const auto json = suite_json(suite);
      if (!check_s.out.empty()) write_text(check_s.out, json + "\n");
      std::cout << json << "\n";
      return all_pass(suite) ? 0 : 1;
    }

    if (*equivalence) {
      const double tol = check_tol < 0 ? 1e-8 : check_tol;
      eq_cfg.seed = check_s.seed;
      const auto report = check_equivalence<double>(eq_cfg);
      std::ostringstream lines;
      for (const auto& r : report.records) lines << r.to_json_line() << "\n";
      const bool pass = report.max_out_dev() <= tol;
      nlohmann::ordered_json j{{"check", "equivalence"},           {"steps", eq_cfg.steps},
                               {"uniform_mask", eq_cfg.uniform_mask}, {"max_out_dev", report.max_out_dev()},
                               {"max_w_dev", report.max_w_dev()},   {"tol", tol},
                               {"pass", pass}};
      if (!check_s.out.empty()) write_text(check_s.out, lines.str() + j.dump() + "\n");
      std::cout << j.dump() << "\n";
      return pass ? 0 : 1;
    }

    if (*bench) {
      std::ostringstream lines;
      ConvImpl naive = ConvImpl::naive(), blocked = ConvImpl::blocked();
      naive.threads = blocked.threads = bench_threads;
      BenchReport a, b;
      if (bench_s.dtype == "f32") {
        a = bench_conv<float>(bench_k, bench_size, naive, bench_repeats, bench_channels, bench_s.seed);
        b = bench_conv<float>(bench_k, bench_size, blocked, bench_repeats, bench_channels, bench_s.seed);
      } else {
        a = bench_conv<double>(bench_k, bench_size, naive, bench_repeats, bench_channels, bench_s.seed);
        b = bench_conv<double>(bench_k, bench_size, blocked, bench_repeats, bench_channels, bench_s.seed);
      }
      lines << a.to_json_line() << "\n" << b.to_json_line() << "\n";
      nlohmann::ordered_json s{{"op", "summary"},
                               {"speedup", a.median_ms / b.median_ms},
                               {"checksums_match", a.checksum == b.checksum}};
      lines << s.dump() << "\n";
      if (!bench_s.out.empty()) write_text(bench_s.out, lines.str());
      std::cout << lines.str();
      return 0;
    }

    if (*prior) {
      const fs::path out = prior_s.out.empty() ? "priors" : prior_s.out;
      fs::create_directories(out);
      std::vector<std::string> files;
      for (double a : prior_alphas) {
        const auto p = frequency_prior(prior_k, a);
        const std::string name = "prior_k" + std::to_string(prior_k) + "_a" + fmt_alpha(a) + ".vol3";
        if (prior_s.dtype == "f32") write_vol3(out / name, p.grid.cast<float>());
        else write_vol3(out / name, p.grid);
        files.push_back(name);
      }
      nlohmann::ordered_json c{{"k", prior_k}, {"alpha", prior_alphas}, {"dtype", prior_s.dtype}};
      write_manifest(out, "prior-dump", c, files);
      std::cout << nlohmann::ordered_json{{"out", out.string()}, {"files", files}}.dump() << "\n";
      return 0;
    }

    if (*erf) {
      const fs::path out = erf_s.out.empty() ? "erf" : erf_s.out;
      Tensor<double> map;
      nlohmann::ordered_json c;
      if (!erf_ckpt.empty()) {
        const auto ck = Checkpoint::load(erf_ckpt);
        map = checkpoint_erf(ck, erf_layer, erf_size, erf_s.seed);
        c = {{"checkpoint", erf_ckpt}, {"layer", erf_layer}, {"size", erf_size}, {"seed", erf_s.seed},
             {"train_config", ck.get_text("config")}};
      } else {
        map = single_layer_erf(parse_mode(erf_mode), erf_k, erf_alpha, erf_size);
        c = {{"mode", erf_mode}, {"k", erf_k}, {"alpha", erf_alpha}, {"size", erf_size}};
      }
      fs::create_directories(out);
      if (erf_s.dtype == "f32") write_vol3(out / "erf.vol3", map.cast<float>());
      else write_vol3(out / "erf.vol3", map);
      write_manifest(out, "erf", c, {"erf.vol3"});
      std::cout << nlohmann::ordered_json{{"out", (out / "erf.vol3").string()}, {"max", max_abs(map)}}.dump() << "\n";
      return 0;
    }
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
