#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lkconv/io.hpp"
#include "lkconv/ops.hpp"
#include "lkconv/optim.hpp"
#include "lkconv/reparam.hpp"

namespace lkc {

enum class ConvMode { plain, bfr, csla };
const char* mode_name(ConvMode m);
ConvMode parse_mode(const std::string& s);

struct SegNetConfig {
  std::vector<std::int64_t> channels{8, 16};  // one entry per stage
  std::vector<std::int64_t> kernels{7, 7};    // depth-wise k per stage
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 2;
  std::int64_t blocks_per_stage = 2;
  ConvMode mode = ConvMode::plain;
  double alpha = 1.0;        // bfr prior shape
  std::int64_t small_k = 3;  // csla small branch
  double alpha_large = 1.0;
  double alpha_small = 1.0;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t stages() const { return channels.size(); }
  /// Throws DomainError / ShapeError when the config cannot build a network.
  void validate() const;
  /// Spatial sizes must be divisible by this.
  std::int64_t size_multiple() const { return std::int64_t{1} << (stages() - 1); }
};

/// Ordered name -> tensor table.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value);
  Tensor<T>& operator[](const std::string& name);
  const Tensor<T>& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t numel() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
using Bound = std::map<std::string, ad::Var<T>>;

/// Any differentiable map from an input batch to an output on the same tape.
template <typename T>
using Model = std::function<ad::Var<T>(ad::Tape<T>&, ad::Var<T>)>;

/// Encoder-decoder for volumetric segmentation. Each stage runs `blocks_per_stage`
/// encoder blocks z <- GeLU(DWC(BN(z))) followed (except in the last stage) by a
/// stride-2 channel-expanding conv. The decoder upsamples, concatenates the stage's
/// skip and fuses with a pointwise conv. Logits have the input's spatial size.
template <typename T>
class SegNet {
 public:
  SegNet(SegNetConfig cfg, std::uint64_t seed);

  const SegNetConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& buffers() { return buffers_; }
  const ParamSet<T>& buffers() const { return buffers_; }

  /// Registers every parameter on the tape.
  Bound<T> bind(ad::Tape<T>& tape) const;
  /// Same, but as constants (no gradients), e.g. for input-gradient probes.
  Bound<T> bind_constant(ad::Tape<T>& tape) const;

  /// Encoder blocks are layers 0 .. num_blocks()-1; layer num_blocks() is the logits.
  std::int64_t num_blocks() const;
  ad::Var<T> forward(const Bound<T>& p, ad::Var<T> x, bool training, std::vector<ad::BatchStats>* stats = nullptr,
                     std::int64_t layer = -1) const;
  Tensor<T> predict_logits(const Tensor<T>& x) const;
  Tensor<std::uint8_t> predict_labels(const Tensor<T>& x) const;

  /// Running mean/var update from the batch statistics of one training forward.
  void update_running_stats(const std::vector<ad::BatchStats>& stats);

  ParamRefs<T> param_refs();
  /// Parameters of the small CSLA branches; they take the parallel learning rate.
  std::vector<std::string> parallel_params() const;
  /// Plain depth-wise kernel of one encoder block as used at inference.
  Tensor<T> export_kernel(std::int64_t block) const;

  void save(Checkpoint& ck) const;
  void load(const Checkpoint& ck);

 private:
  std::string block_prefix(std::int64_t stage, std::int64_t j) const;
  ad::Var<T> encoder_block(const Bound<T>& p, const std::string& prefix, std::size_t stage, ad::Var<T> z,
                           bool training, std::vector<ad::BatchStats>* stats) const;

  SegNetConfig cfg_;
  ParamSet<T> params_;
  ParamSet<T> buffers_;
  std::vector<Tensor<T>> priors_;  // per stage, bfr mode only
};

/// 2|P and G| / (|P| + |G|) for one class; 1.0 when the class is absent from both.
double dice_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, std::int64_t class_id,
                  std::int64_t num_classes);
std::vector<double> dice_per_class(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                                   std::int64_t num_classes);
double mean_dice(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, std::int64_t num_classes);

/// Effective receptive field: |d center_sum(model(x)) / dx| summed over input channels,
/// for batch element 0. Returns (D,H,W).
template <typename T>
Tensor<T> erf_map(const Model<T>& model, const Tensor<T>& input);

}  // namespace lkc
