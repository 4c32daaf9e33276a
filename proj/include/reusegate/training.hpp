#pragma once

#include "reusegate/image.hpp"
#include "reusegate/metrics.hpp"
#include "reusegate/network.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reusegate {

struct TrainConfig {
  double lr = 5e-4;
  int batch = 8;
  int seq_len = 6;
  long steps = 1000;
  double m1_final = 1.0;
  double m2 = 0.0;
  std::optional<long> ramp_steps;  // default 20% of steps
  double tau_train = 0.5;
  double pretrain_fraction = 0.25;  // leading share of steps with the gate forced off
  double score_weight = 1.0;        // BCE of the score map against the downsampled mask, full frames
  std::uint64_t seed = 0;

  long ramp() const { return ramp_steps ? *ramp_steps : steps / 5; }
  long pretrain_steps() const { return long(double(steps) * pretrain_fraction); }
  void validate() const;
};

enum class ShapeKind { square, disk };

struct SynthConfig {
  int height = 64;
  int width = 64;
  std::vector<ShapeKind> shapes{ShapeKind::square, ShapeKind::disk};
  int size_min = 10;  // side or diameter, pixels
  int size_max = 20;
  int velocity_min = 0;  // integer pixels per frame along each moving axis
  int velocity_max = 5;
  double static_probability = 0.3;
  bool axis_aligned = false;  // otherwise diagonal directions are allowed too
  int distractor_count = 0;
  double background_noise = 0.03;  // uniform amplitude, in [0, 1] intensity units
  int seq_len = 6;

  void validate() const;
};

struct SynthSequence {
  std::vector<RgbImage> frames;
  std::vector<BinaryMask> masks;
  int vx = 0, vy = 0;
};

/// Deterministic for a given (cfg, seed). Throws invalid_argument when the
/// largest shape at the fastest speed cannot stay inside the frame.
SynthSequence synth_sequence(const SynthConfig& cfg, std::uint64_t seed);

/// Linear ramp m1_final * min(1, step / ramp).
double margin_at(long step, const TrainConfig& cfg);

/// max(m1, IoU(gt_prev, gt_cur)).
double gate_target(const BinaryMask& gt_prev, const BinaryMask& gt_cur, double m1_current);

/// max(m2, |p - target|)^2 on a (1,1,1,1) gate probability.
template <typename S>
Tensor<S> loss_gp(const Tensor<S>& p_gate, double p_target, double m2);

/// Score-resolution target: 8x8 area fraction through logit(clamp(., .01, .99)).
template <typename S>
ScoreMap<S> downsample_mask(const BinaryMask& y);

/// l2_mean(delta, y_small - s_prev) with s_prev held constant.
template <typename S>
Tensor<S> loss_delta(const DeltaMap<S>& delta, const ScoreMap<S>& y_small, const ScoreMap<S>& s_prev);

template <typename S>
struct DeltaTerms {
  DeltaMap<S> delta;
  ScoreMap<S> y_small;
  ScoreMap<S> s_prev;
};

template <typename S>
struct LossTerms {
  Tensor<S> total;
  Tensor<S> gp;
  Tensor<S> delta;  // undefined on full-path frames
  Tensor<S> bce;
};

template <typename S>
LossTerms<S> loss_total(const Tensor<S>& mask_logits, const BinaryMask& y, const Tensor<S>& p_gate, double p_target,
                        double m2, const DeltaTerms<S>* delta_terms);

struct StepStats {
  long step = 0;
  double loss = 0;
  double loss_gp = 0;
  double loss_delta = 0;
  double bce = 0;
  double loss_score = 0;
  double mean_p_gate = 0;
  double reuse_fraction = 0;
  double m1_current = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimizer step over a batch of sequences. Each sequence starts from its
/// frame 0 without fine-tuning; frames 1.. pick their path by
/// p_gate >= tau_train (forced Full during pretraining). Cross-frame state is
/// detached. Full-path frames add score_weight * BCE(score map, clamped
/// downsampled mask) so generated score maps live on the same scale as S_0. Throws NonFiniteLoss before updating when the loss is not finite.
template <typename S>
StepStats train_step(Model<S>& model, std::span<const SynthSequence> batch, const TrainConfig& cfg, long step);

/// Sequences for one step, seeded from (cfg.seed, step).
std::vector<SynthSequence> training_batch(const TrainConfig& cfg, const SynthConfig& synth, long step);

using StepCallback = std::function<void(const StepStats&)>;

/// Full training loop; writes one JSON line per step to `log` when given.
template <typename S>
std::vector<StepStats> train(Model<S>& model, const TrainConfig& cfg, const SynthConfig& synth, std::ostream* log,
                             const StepCallback& on_step = {});

std::string stats_json_line(const StepStats& s);

/// Config document: {"train": {...}, "synth": {...}, "model": {...}}; absent
/// keys keep their defaults, unknown keys are rejected.
struct ExperimentConfig {
  TrainConfig train;
  SynthConfig synth;
  ModelConfig model;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
std::string experiment_config_json(const ExperimentConfig& cfg);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace reusegate
