#pragma once

#include "reusegate/metrics.hpp"
#include "reusegate/network.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace reusegate {

enum class GateMode { dynamic, always_full, copy, fusion };
enum class Decision { Full, Reuse, Copy };

const char* to_string(GateMode m);
const char* to_string(Decision d);
GateMode parse_gate_mode(const std::string& s);

struct GateConfig {
  double tau = 0.7;
  std::optional<double> tau2;
  GateMode mode = GateMode::dynamic;

  void validate() const;
};

/// Threshold rule on P_gate. Reuse when p_gate >= tau (dynamic); copy and
/// fusion substitute Copy for the top band.
Decision decide(double p_gate, const GateConfig& cfg);

struct LayerFlops {
  std::string layer;
  std::uint64_t flops = 0;
};

/// Analytic per-layer arithmetic for one path at one frame size.
struct PathFlops {
  Decision path = Decision::Full;
  std::vector<LayerFlops> layers;
  std::uint64_t total() const;
};

PathFlops count_flops(Decision path, const ModelConfig& cfg, int height, int width);

struct DecisionRecord {
  int frame_index = 0;
  int object_id = 0;
  double p_gate = 0;
  Decision decision = Decision::Full;
  std::uint64_t flops = 0;
};

/// Accumulates executed-path costs per frame and per (layer, path).
class FlopLedger {
 public:
  void add(const DecisionRecord& rec, const PathFlops& path);

  std::uint64_t video_total() const { return total_; }
  const std::map<int, std::uint64_t>& per_frame() const { return per_frame_; }
  const std::map<std::pair<std::string, std::string>, std::uint64_t>& per_layer() const { return per_layer_; }

 private:
  std::uint64_t total_ = 0;
  std::map<int, std::uint64_t> per_frame_;
  std::map<std::pair<std::string, std::string>, std::uint64_t> per_layer_;  // (layer, path)
};

double reuse_rate(std::span<const DecisionRecord> records);

struct TrackerOptions {
  int fine_tune_steps = 0;
  double fine_tune_lr = 1e-3;
  bool refresh = false;
  int refresh_interval = 8;  // full-path frames between score-generator refreshes
  int refresh_steps = 5;
  double refresh_lr = 1e-3;
  std::size_t history = 8;  // stored (f16, pseudo-label) pairs
};

template <typename S>
struct RefreshSample {
  Tensor<S> f16;
  Tensor<S> label;  // 1/8-resolution foreground fraction of the predicted mask
};

template <typename S>
struct ObjectState {
  bool initialized = false;
  int object_id = 1;
  int frame_index = 0;
  Template<S> tmpl;
  ScoreMap<S> s_prev;
  RefinedFeature<S> r8_prev;
  BinaryMask last_mask;
  Tensor<S> last_logits;
  int frames_since_full = 0;
  int full_frames_seen = 0;
  std::vector<RefreshSample<S>> history;
};

template <typename S>
struct StepResult {
  BinaryMask mask;
  Tensor<S> logits;  // (1, 1, H, W); the previous logits on Copy frames
  DecisionRecord record;
};

/// Fits the score generator to the frame-0 mask for `fine_tune_steps` Adam
/// steps, builds the template, and runs the full path on frame 0 with S_0 to
/// seed r8_prev.
template <typename S>
ObjectState<S> init_video(Model<S>& model, const Tensor<S>& frame0, const BinaryMask& mask0,
                          const TrackerOptions& opts = {}, int object_id = 1);

template <typename S>
StepResult<S> step(Model<S>& model, ObjectState<S>& state, const Tensor<S>& frame, const GateConfig& cfg,
                   const TrackerOptions& opts = {});

/// Runs the gate for bookkeeping but executes `decision` regardless of it.
template <typename S>
StepResult<S> step_with_decision(Model<S>& model, ObjectState<S>& state, const Tensor<S>& frame, Decision decision,
                                 const TrackerOptions& opts = {});

/// Adam steps on the score generator's second layer only, fitting stored
/// pseudo-labels. No-op on empty history. Returns the BCE before each step.
template <typename S>
std::vector<double> refresh_score_generator(Model<S>& model, ObjectState<S>& state, int steps, double lr);

/// Full path with the generated score map (no stored state).
template <typename S>
Tensor<S> predict_full(const Model<S>& model, const Tensor<S>& frame);

/// Reference segmenter with the gate, matcher, delta-generator and
/// refine-translator removed.
template <typename S>
BinaryMask baseline_segment(const Model<S>& model, const Tensor<S>& frame);

struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<int> labels;  // 0 = background

  LabelMap() = default;
  LabelMap(int w, int h) : width(w), height(h), labels(std::size_t(w) * h, 0) {}
  int max_label() const;
  BinaryMask object_mask(int id) const;
  bool operator==(const LabelMap&) const = default;
};

/// Per-pixel argmax over {background logit 0} and the object logits. Lower
/// ids win ties; background loses ties.
template <typename S>
LabelMap merge_objects(std::span<const Tensor<S>> per_object_logits);

template <typename S>
struct VideoInput {
  std::string name;
  std::vector<Tensor<S>> frames;  // (1, 3, H, W)
  std::vector<LabelMap> labels;   // labels[0] required; later ones used for scoring
};

struct ObjectResult {
  int object_id = 0;
  std::vector<DecisionRecord> records;  // frames 1..T-1
  std::vector<double> gt_iou_prev;      // IoU(gt[t-1], gt[t]) aligned with records
  double j = 0, f = 0, jf = 0, reuse = 0;
};

struct VideoResult {
  std::string name;
  std::vector<ObjectResult> objects;
  std::vector<LabelMap> predicted;
  FlopLedger ledger;
  double j = 0, f = 0, jf = 0, reuse = 0;
  std::uint64_t flops = 0;
  std::uint64_t full_flops = 0;  // cost of the same frames on the full path
  double flop_ratio() const { return full_flops ? double(flops) / double(full_flops) : 0.0; }
};

struct EvalOptions {
  GateConfig gate;
  TrackerOptions tracker;
  std::optional<double> boundary_tol;  // default ceil(0.008 * diagonal)
};

/// Tracks every object independently on a private copy of the weights, then
/// merges per-frame label maps and scores them against the ground truth.
template <typename S>
VideoResult evaluate_video(const Model<S>& model, const VideoInput<S>& video, const EvalOptions& opts);

}  // namespace reusegate
