#pragma once

#include "reusegate/checkpoint.hpp"
#include "reusegate/metrics.hpp"
#include "reusegate/ops.hpp"
#include "reusegate/optim.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace reusegate {

double logit(double p);

struct ModelConfig {
  std::array<int, 2> stem_channels{16, 32};  // f4, f8
  std::array<int, 2> deep_channels{64, 64};  // f16, f32
  int c_f = 32;                              // template / dissimilarity width
  int c_r = 32;                              // refined-feature width
  int gate_channels = 32;                    // hidden width of the gate head
  int score_hidden = 64;                     // hidden width of the score generator
  int deep_units = 4;                        // residual units per deep stage
  double gate_bias_init = logit(0.15);

  void validate() const;
  std::map<std::string, std::string> to_meta() const;
  static ModelConfig from_meta(const std::map<std::string, std::string>& meta);
  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct Conv {
  Tensor<S> weight;
  Tensor<S> bias;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, stride, padding, dilation); }
  int in_channels() const { return weight.shape().c; }
  int out_channels() const { return weight.shape().n; }
  int kernel() const { return weight.shape().h; }
};

template <typename S>
struct ScoreMap {
  Tensor<S> logits;  // (1, 1, H/8, W/8)
};

template <typename S>
struct Template {
  Tensor<S> features;  // (1, c_f, H/8, W/8)
};

template <typename S>
struct DissimilarityFeature {
  Tensor<S> d;
};

template <typename S>
struct DeltaMap {
  Tensor<S> delta;
};

template <typename S>
struct RefinedFeature {
  Tensor<S> r8;
};

/// f16/f32 stay undefined on frames that took the reuse path.
template <typename S>
struct FeaturePyramid {
  Tensor<S> f4, f8, f16, f32;
  bool has_deep() const { return f16.defined() && f32.defined(); }
};

template <typename S>
struct FullDecode {
  Tensor<S> mask_logits;
  RefinedFeature<S> r8;
};

/// Image-to-mask network with both inference paths. Layers and the
/// parameter registry alias the same tensors.
template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg = {}, std::uint64_t seed = 0);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// Deep copy of the weights; optimizer moments start fresh.
  Model clone() const;

  const ModelConfig& config() const { return cfg_; }

  FeaturePyramid<S> stem_forward(const Tensor<S>& frame) const;
  void deep_forward(FeaturePyramid<S>& pyr) const;
  ScoreMap<S> score_generate(const FeaturePyramid<S>& pyr) const;
  Template<S> build_template(const Tensor<S>& f8_0, const ScoreMap<S>& s0) const;
  DissimilarityFeature<S> match_dissimilarity(const Tensor<S>& f8, const ScoreMap<S>& s_prev,
                                              const Template<S>& tmpl) const;
  /// (1, 1, 1, 1) probability that the previous state can be reused.
  Tensor<S> gate_probability(const DissimilarityFeature<S>& d) const;
  DeltaMap<S> generate_delta(const DissimilarityFeature<S>& d) const;
  RefinedFeature<S> refine_translate(const RefinedFeature<S>& r8_prev, const DeltaMap<S>& delta) const;
  FullDecode<S> decode_full(const FeaturePyramid<S>& pyr, const ScoreMap<S>& score) const;
  Tensor<S> decode_reuse(const RefinedFeature<S>& r8_hat, const FeaturePyramid<S>& pyr,
                         const ScoreMap<S>& s_hat) const;

  /// Shared tail of both decoders: R4 block plus mask head.
  Tensor<S> decode_r4(const Tensor<S>& f4, const Tensor<S>& r8, const ScoreMap<S>& score) const;
  Tensor<S> decode_block(const std::array<Conv<S>, 2>& block, const Tensor<S>& x) const;

  std::vector<Parameter<S>*> parameters();
  std::vector<const Parameter<S>*> parameters() const;
  /// Parameters whose name starts with `prefix`.
  std::vector<Parameter<S>*> parameters(const std::string& prefix);
  Parameter<S>& parameter(const std::string& name);
  void zero_grad();

  Checkpoint to_checkpoint() const;
  static Model from_checkpoint(const Checkpoint& ckpt);

  // Layers are public so tests and training can address them directly.
  struct ResidualUnit {
    Conv<S> a, b;
  };
  struct DeepStage {
    Conv<S> down;
    std::vector<ResidualUnit> units;
  };

  Conv<S> stem1, stem2;
  DeepStage deep16, deep32;
  Conv<S> score1, score2;
  Conv<S> query, compare;
  Conv<S> gate1, gate2;
  Conv<S> delta;
  Conv<S> refine_d1, refine_d2, refine_d4, refine_merge, refine_res_a, refine_res_b;
  std::array<Conv<S>, 2> r16, r8, r8_reuse, r4;
  Conv<S> head;

 private:
  Conv<S> make_conv(const std::string& name, int c_in, int c_out, int k, int stride, int padding, int dilation,
                    double init_scale, std::mt19937_64& rng);
  Tensor<S> run_deep_stage(const DeepStage& stage, const Tensor<S>& x) const;

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter<S>> params_;
};

/// Area-fraction downsampling by `factor` to a (1, 1, H/f, W/f) tensor.
template <typename S>
Tensor<S> mask_area_fraction(const BinaryMask& m, int factor = 8);

/// S_0: 8x8 area fraction mapped through logit(clamp(p, 0.01, 0.99)).
template <typename S>
ScoreMap<S> init_score_from_mask(const BinaryMask& m);

/// Probability target for the score generator: the clamped 8x8 area
/// fraction, so sigmoid(S_0) is the exact BCE optimum.
template <typename S>
Tensor<S> score_target_from_mask(const BinaryMask& m);

/// (1, 1, H, W) tensor of 0/1.
template <typename S>
Tensor<S> mask_tensor(const BinaryMask& m);

/// Foreground where logit >= 0.
template <typename S>
BinaryMask mask_from_logits(const Tensor<S>& logits);

}  // namespace reusegate
