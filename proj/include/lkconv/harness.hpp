#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lkconv/netseg.hpp"

namespace lkc {

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::uint64_t seed = 0;
  std::int64_t n = 1;
  std::int64_t size = 32;
  std::int64_t num_spheres = 2;
  std::int64_t num_classes = 2;
  double radius_min = 4.0;
  double radius_max = 7.0;
  double amplitude = 1.0;  // peak of the intensity bump
  double noise = 0.5;      // std of the additive Gaussian noise
  double edge = 1.0;       // width of the soft sphere boundary, in voxels
};

struct Dataset {
  Tensor<double> images;           // (N,1,S,S,S)
  Tensor<std::uint8_t> labels;     // (N,S,S,S)
};

/// Gaussian noise on top of non-overlapping soft spheres (the brightest sphere wins where
/// tails meet). Sphere j is labelled 1 + j % (num_classes - 1); everything else is 0.
/// Deterministic per seed.
Dataset synth_dataset(const SynthConfig& cfg);

// ---------------------------------------------------------------------------
// Configuration

/// Flat `key = value` text with `#` comments.
std::map<std::string, std::string> parse_key_values(const std::string& text);

struct TrainConfig {
  ConvMode mode = ConvMode::plain;
  OptimKind optimizer = OptimKind::adamw;
  double lr = 0.0001;
  std::optional<double> parallel_lr;  // csla only
  std::optional<double> alpha;        // bfr only
  double weight_decay = 0.01;
  std::int64_t k = 7;
  std::int64_t small_k = 3;
  std::vector<std::int64_t> channels{8, 16};
  std::int64_t steps = 1500;
  std::int64_t batch = 2;
  std::uint64_t seed = 0;
  std::string dtype = "f64";
  std::int64_t size = 32;
  std::int64_t num_classes = 2;
  std::int64_t num_spheres = 2;
  double amplitude = 1.0;
  double noise = 0.5;
  std::int64_t checkpoint_every = 0;  // 0: only final and best
  bool deterministic = false;
  int threads = 1;

  /// Applies key/value overrides; unknown keys and malformed values throw DomainError.
  void apply(const std::map<std::string, std::string>& kv);
  static TrainConfig from_text(const std::string& text);
  /// Canonical text form; from_text(to_text()) reproduces the config.
  std::string to_text() const;
  void validate() const;

  double alpha_or_default() const { return alpha.value_or(1.0); }
  double parallel_lr_or_default() const { return parallel_lr.value_or(lr); }
  SegNetConfig net_config() const;
  SynthConfig synth_config(std::uint64_t seed, std::int64_t n) const;
};

// ---------------------------------------------------------------------------
// Training and evaluation

struct MetricsRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double mean_dice = 0.0;
  double wall_ms = 0.0;
  std::string to_json_line() const;
};

struct TrainResult {
  std::int64_t final_step = 0;
  double final_loss = 0.0;
  double best_dice = 0.0;
  std::int64_t best_step = 0;
  std::vector<MetricsRecord> records;  // records written by this invocation
};

/// The batch used at a given step depends only on (seed, step).
Dataset training_batch(const TrainConfig& cfg, std::int64_t step);
/// Held-out set generated from seed + 1.
Dataset eval_dataset(const TrainConfig& cfg, std::int64_t n);

/// Runs the loop, writing metrics.jsonl, config.txt, final.ckpt and best.ckpt (and
/// step_<i>.ckpt every checkpoint_every steps) into `out`. With `resume`, training
/// continues from that checkpoint; metrics past its step are dropped first. A
/// non-finite loss or gradient writes last_good.ckpt and rethrows NonFiniteError.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out,
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

struct EvalReport {
  std::vector<double> per_class;
  double mean = 0.0;
  std::string config_text;
  std::string to_json() const;
};

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const AnyTensor& images,
                               const Tensor<std::uint8_t>& labels);

/// Rebuilds the network stored in a checkpoint (config echo plus weights).
template <typename T>
SegNet<T> load_network(const Checkpoint& ck, TrainConfig* cfg_out = nullptr);

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Effective receptive field

/// ERF of one depth-wise layer with all-ones weights (latent weights in bfr mode, both
/// branches in csla mode) on a (1,1,size^3) zero volume.
Tensor<double> single_layer_erf(ConvMode mode, std::int64_t k, double alpha, std::int64_t size,
                                std::int64_t small_k = 3);

/// ERF at encoder block `layer` (or the logits for layer == num_blocks()) of a trained
/// network, probed with a seeded Gaussian volume in eval mode.
Tensor<double> checkpoint_erf(const Checkpoint& ck, std::int64_t layer, std::int64_t size, std::uint64_t seed);

}  // namespace lkc
