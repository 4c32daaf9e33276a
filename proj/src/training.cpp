#include "reusegate/training.hpp"

#include "reusegate/ops.hpp"
#include "reusegate/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <set>

namespace reusegate {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("train.lr must be positive");
  if (batch < 1) throw std::invalid_argument("train.batch must be at least 1");
  if (seq_len < 2) throw std::invalid_argument("train.seq_len must be at least 2");
  if (steps < 1) throw std::invalid_argument("train.steps must be at least 1");
  if (!(m1_final > 0 && m1_final <= 1)) throw std::invalid_argument("train.m1_final must lie in (0, 1]");
  if (!(m2 >= 0 && m2 < 1)) throw std::invalid_argument("train.m2 must lie in [0, 1)");
  if (ramp() < 0 || ramp() > steps) throw std::invalid_argument("train.ramp_steps must lie in [0, steps]");
  if (!(tau_train >= 0 && tau_train <= 1)) throw std::invalid_argument("train.tau_train must lie in [0, 1]");
  if (!(pretrain_fraction >= 0 && pretrain_fraction <= 1)) {
    throw std::invalid_argument("train.pretrain_fraction must lie in [0, 1]");
  }
  if (!(score_weight >= 0)) throw std::invalid_argument("train.score_weight must be non-negative");
}

void SynthConfig::validate() const {
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw std::invalid_argument("synth frame size must be a positive multiple of 32");
  }
  if (shapes.empty()) throw std::invalid_argument("synth.shapes must not be empty");
  if (size_min < 1 || size_max < size_min) throw std::invalid_argument("synth size range is empty");
  if (velocity_min < 0 || velocity_max < velocity_min) throw std::invalid_argument("synth velocity range is empty");
  if (!(static_probability >= 0 && static_probability <= 1)) {
    throw std::invalid_argument("synth.static_probability must lie in [0, 1]");
  }
  if (distractor_count < 0) throw std::invalid_argument("synth.distractor_count must be non-negative");
  if (!(background_noise >= 0 && background_noise <= 0.5)) {
    throw std::invalid_argument("synth.background_noise must lie in [0, 0.5]");
  }
  if (seq_len < 1) throw std::invalid_argument("synth.seq_len must be at least 1");
  const long travel = long(velocity_max) * (seq_len - 1);
  if (size_max + travel > std::min(height, width)) {
    throw std::invalid_argument("synth geometry infeasible: size " + std::to_string(size_max) + " moving " +
                                std::to_string(velocity_max) + " px/frame over " + std::to_string(seq_len) +
                                " frames leaves the frame");
  }
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

struct Sprite {
  ShapeKind kind = ShapeKind::square;
  int size = 0;
  int x0 = 0, y0 = 0, vx = 0, vy = 0;
  std::array<double, 3> color{};

  bool covers(int t, int x, int y) const {
    const int px = x0 + vx * t, py = y0 + vy * t;
    if (kind == ShapeKind::square) return x >= px && x < px + size && y >= py && y < py + size;
    const double r = size / 2.0;
    const double dx = x + 0.5 - (px + r), dy = y + 0.5 - (py + r);
    return dx * dx + dy * dy <= r * r;
  }
};

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Sprite sample_sprite(const SynthConfig& cfg, std::mt19937_64& rng, const std::array<double, 3>& background) {
  Sprite s;
  s.kind = cfg.shapes[std::size_t(uniform_int(rng, 0, int(cfg.shapes.size()) - 1))];
  s.size = uniform_int(rng, cfg.size_min, cfg.size_max);
  const bool still = std::bernoulli_distribution(cfg.static_probability)(rng);
  const int speed = still ? 0 : uniform_int(rng, cfg.velocity_min, cfg.velocity_max);
  static constexpr int dirs[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  const int d = uniform_int(rng, 0, cfg.axis_aligned ? 3 : 7);
  s.vx = dirs[d][0] * speed;
  s.vy = dirs[d][1] * speed;
  const int span = cfg.seq_len - 1;
  auto start = [&](int v, int dim) {
    const int lo = v < 0 ? -v * span : 0;
    const int hi = dim - s.size - (v > 0 ? v * span : 0);
    return uniform_int(rng, lo, hi);
  };
  s.x0 = start(s.vx, cfg.width);
  s.y0 = start(s.vy, cfg.height);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (;;) {
    for (auto& c : s.color) c = unit(rng);
    double gap = 0;
    for (int c = 0; c < 3; ++c) gap = std::max(gap, std::abs(s.color[c] - background[c]));
    if (gap >= 0.35) break;
  }
  return s;
}

}  // namespace

SynthSequence synth_sequence(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::array<double, 3> background{};
  for (auto& c : background) c = 0.1 + 0.8 * unit(rng);

  std::vector<Sprite> distractors;
  for (int i = 0; i < cfg.distractor_count; ++i) distractors.push_back(sample_sprite(cfg, rng, background));
  const Sprite target = sample_sprite(cfg, rng, background);

  SynthSequence seq;
  seq.vx = target.vx;
  seq.vy = target.vy;
  std::uniform_real_distribution<double> noise(-cfg.background_noise, cfg.background_noise);
  for (int t = 0; t < cfg.seq_len; ++t) {
    RgbImage img(cfg.width, cfg.height);
    BinaryMask mask(cfg.width, cfg.height);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const std::array<double, 3>* color = &background;
        for (const Sprite& d : distractors) {
          if (d.covers(t, x, y)) color = &d.color;
        }
        if (target.covers(t, x, y)) {
          color = &target.color;
          mask.set(x, y, true);
        }
        std::uint8_t* px = img.pixel(x, y);
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp((*color)[c] + noise(rng), 0.0, 1.0);
          px[c] = std::uint8_t(std::lround(v * 255.0));
        }
      }
    }
    seq.frames.push_back(std::move(img));
    seq.masks.push_back(std::move(mask));
  }
  return seq;
}

double margin_at(long step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("margin_at: negative step");
  const long ramp = cfg.ramp();
  if (ramp <= 0) return cfg.m1_final;
  return cfg.m1_final * std::min(1.0, double(step) / double(ramp));
}

double gate_target(const BinaryMask& gt_prev, const BinaryMask& gt_cur, double m1_current) {
  if (gt_prev.width != gt_cur.width || gt_prev.height != gt_cur.height) {
    throw std::invalid_argument("gate_target: mask dimensions differ");
  }
  return std::max(m1_current, iou(gt_prev, gt_cur));
}

template <typename S>
Tensor<S> loss_gp(const Tensor<S>& p_gate, double p_target, double m2) {
  if (p_gate.numel() != 1) throw std::invalid_argument("loss_gp: p_gate must be a single value");
  if (!(p_target >= 0 && p_target <= 1)) throw std::invalid_argument("loss_gp: p_target must lie in [0, 1]");
  if (!(m2 >= 0 && m2 < 1)) throw std::invalid_argument("loss_gp: m2 must lie in [0, 1)");
  const Tensor<S> diff = abs(sub(p_gate, Tensor<S>::full(p_gate.shape(), S(p_target))));
  return square(clamp_min(diff, S(m2)));
}

template <typename S>
ScoreMap<S> downsample_mask(const BinaryMask& y) {
  return init_score_from_mask<S>(y);
}

template <typename S>
Tensor<S> loss_delta(const DeltaMap<S>& delta, const ScoreMap<S>& y_small, const ScoreMap<S>& s_prev) {
  if (!(delta.delta.shape() == y_small.logits.shape()) || !(delta.delta.shape() == s_prev.logits.shape())) {
    throw std::invalid_argument("loss_delta: shapes differ (" + delta.delta.shape().str() + ", " +
                                y_small.logits.shape().str() + ", " + s_prev.logits.shape().str() + ")");
  }
  return l2_mean(delta.delta, sub(y_small.logits.detach(), s_prev.logits.detach()));
}

template <typename S>
LossTerms<S> loss_total(const Tensor<S>& mask_logits, const BinaryMask& y, const Tensor<S>& p_gate, double p_target,
                        double m2, const DeltaTerms<S>* delta_terms) {
  LossTerms<S> out;
  out.bce = bce_with_logits(mask_logits, mask_tensor<S>(y));
  out.gp = loss_gp(p_gate, p_target, m2);
  out.total = add(out.gp, out.bce);
  if (delta_terms) {
    out.delta = loss_delta(delta_terms->delta, delta_terms->y_small, delta_terms->s_prev);
    out.total = add(out.total, out.delta);
  }
  return out;
}

template <typename S>
StepStats train_step(Model<S>& model, std::span<const SynthSequence> batch, const TrainConfig& cfg, long step) {
  cfg.validate();
  const auto params = model.parameters();
  if (params.empty() || std::any_of(params.begin(), params.end(), [](auto* p) { return !p->value.requires_grad(); })) {
    throw invalid_state("train_step: model parameters are not trainable");
  }
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

  StepStats st;
  st.step = step;
  st.m1_current = margin_at(step, cfg);
  const bool pretrain = step < cfg.pretrain_steps();
  std::size_t frames = 0;
  for (const auto& seq : batch) frames += seq.frames.size() - 1;
  const S weight = S(1) / S(frames);
  auto& tape = Tape<S>::current();
  tape.clear();
  model.zero_grad();

  std::size_t reused = 0;
  for (const SynthSequence& seq : batch) {
    if (seq.frames.size() < 2 || seq.frames.size() != seq.masks.size()) {
      throw std::invalid_argument("train_step: each sequence needs >= 2 frames with masks");
    }
    FeaturePyramid<S> pyr0 = model.stem_forward(image_to_tensor<S>(seq.frames[0]));
    const Template<S> tmpl = model.build_template(pyr0.f8, init_score_from_mask<S>(seq.masks[0]));
    ScoreMap<S> s_prev = init_score_from_mask<S>(seq.masks[0]);
    RefinedFeature<S> r8_prev;
    {
      NoGradGuard ng;
      model.deep_forward(pyr0);
      r8_prev = model.decode_full(pyr0, s_prev).r8;
    }
    std::size_t last_full = 0;
    Tensor<S> seq_loss;
    for (std::size_t t = 1; t < seq.frames.size(); ++t) {
      FeaturePyramid<S> pyr = model.stem_forward(image_to_tensor<S>(seq.frames[t]));
      const DissimilarityFeature<S> d = model.match_dissimilarity(pyr.f8, s_prev, tmpl);
      const Tensor<S> p = model.gate_probability(d);
      const double target = gate_target(seq.masks[last_full], seq.masks[t], st.m1_current);
      const bool reuse = !pretrain && double(p.item()) >= cfg.tau_train;
      LossTerms<S> terms;
      if (!reuse) {
        model.deep_forward(pyr);
        const ScoreMap<S> score = model.score_generate(pyr);
        const FullDecode<S> fd = model.decode_full(pyr, score);
        terms = loss_total(fd.mask_logits, seq.masks[t], p, target, cfg.m2, static_cast<const DeltaTerms<S>*>(nullptr));
        if (cfg.score_weight > 0) {
          const Tensor<S> ls = bce_with_logits(score.logits, score_target_from_mask<S>(seq.masks[t]));
          st.loss_score += double(ls.item());
          terms.total = add(terms.total, scale(ls, S(cfg.score_weight)));
        }
        s_prev = ScoreMap<S>{score.logits.detach()};
        r8_prev = RefinedFeature<S>{fd.r8.r8.detach()};
        last_full = t;
      } else {
        const DeltaMap<S> delta = model.generate_delta(d);
        const ScoreMap<S> s_hat{add(s_prev.logits, delta.delta)};
        const RefinedFeature<S> r8_hat = model.refine_translate(r8_prev, delta);
        const Tensor<S> logits = model.decode_reuse(r8_hat, pyr, s_hat);
        const DeltaTerms<S> dt{delta, downsample_mask<S>(seq.masks[t]), s_prev};
        terms = loss_total(logits, seq.masks[t], p, target, cfg.m2, &dt);
        st.loss_delta += double(terms.delta.item());
        ++reused;
      }
      st.loss_gp += double(terms.gp.item());
      st.bce += double(terms.bce.item());
      st.mean_p_gate += double(p.item());
      st.loss += double(terms.total.item());
      seq_loss = seq_loss.defined() ? add(seq_loss, terms.total) : terms.total;
    }
    if (!std::isfinite(double(seq_loss.item()))) {
      tape.clear();
      model.zero_grad();
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
    }
    backward(scale(seq_loss, weight));
    tape.clear();
  }

  const double n = double(frames);
  st.loss /= n;
  st.loss_gp /= n;
  st.loss_delta /= n;
  st.bce /= n;
  st.loss_score /= n;
  st.mean_p_gate /= n;
  st.reuse_fraction = double(reused) / n;

  AdamConfig adam;
  adam.lr = cfg.lr;
  adam_step<S>(params, adam);
  return st;
}

std::vector<SynthSequence> training_batch(const TrainConfig& cfg, const SynthConfig& synth, long step) {
  SynthConfig sc = synth;
  sc.seq_len = cfg.seq_len;
  std::vector<SynthSequence> out;
  for (int b = 0; b < cfg.batch; ++b) {
    out.push_back(synth_sequence(sc, mix_seed(cfg.seed, std::uint64_t(step) * std::uint64_t(cfg.batch) + b)));
  }
  return out;
}

std::string stats_json_line(const StepStats& s) {
  ordered_json j;
  j["step"] = s.step;
  j["loss"] = s.loss;
  j["loss_gp"] = s.loss_gp;
  j["loss_delta"] = s.loss_delta;
  j["bce"] = s.bce;
  j["loss_score"] = s.loss_score;
  j["mean_p_gate"] = s.mean_p_gate;
  j["reuse_fraction"] = s.reuse_fraction;
  j["m1_current"] = s.m1_current;
  return j.dump();
}

template <typename S>
std::vector<StepStats> train(Model<S>& model, const TrainConfig& cfg, const SynthConfig& synth, std::ostream* log,
                             const StepCallback& on_step) {
  cfg.validate();
  SynthConfig sc = synth;
  sc.seq_len = cfg.seq_len;
  sc.validate();
  std::vector<StepStats> history;
  for (long step = 0; step < cfg.steps; ++step) {
    const auto batch = training_batch(cfg, sc, step);
    StepStats st = train_step(model, std::span<const SynthSequence>(batch), cfg, step);
    if (log) *log << stats_json_line(st) << '\n';
    if (on_step) on_step(st);
    history.push_back(st);
  }
  if (log) log->flush();
  return history;
}

// ---------------------------------------------------------------------------
// Config documents

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& section) {
  if (!obj.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown config key '" + section + "." + key + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

const char* shape_name(ShapeKind k) { return k == ShapeKind::square ? "square" : "disk"; }

ShapeKind parse_shape(const std::string& s) {
  if (s == "square") return ShapeKind::square;
  if (s == "disk") return ShapeKind::disk;
  throw std::invalid_argument("unknown shape '" + s + "'");
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  json doc;
  try {
    doc = json::parse(text);
    reject_unknown(doc, {"train", "synth", "model"}, "root");
    if (doc.contains("train")) {
      const json& t = doc["train"];
      reject_unknown(t, {"lr", "batch", "seq_len", "steps", "m1_final", "m2", "ramp_steps", "tau_train",
                         "pretrain_fraction", "score_weight", "seed"},
                     "train");
      read(t, "lr", cfg.train.lr);
      read(t, "batch", cfg.train.batch);
      read(t, "seq_len", cfg.train.seq_len);
      read(t, "steps", cfg.train.steps);
      read(t, "m1_final", cfg.train.m1_final);
      read(t, "m2", cfg.train.m2);
      if (t.contains("ramp_steps")) cfg.train.ramp_steps = t["ramp_steps"].get<long>();
      read(t, "tau_train", cfg.train.tau_train);
      read(t, "pretrain_fraction", cfg.train.pretrain_fraction);
      read(t, "score_weight", cfg.train.score_weight);
      read(t, "seed", cfg.train.seed);
    }
    if (doc.contains("synth")) {
      const json& s = doc["synth"];
      reject_unknown(s, {"height", "width", "shapes", "size_min", "size_max", "velocity_min", "velocity_max",
                         "static_probability", "axis_aligned", "distractor_count", "background_noise"},
                     "synth");
      read(s, "height", cfg.synth.height);
      read(s, "width", cfg.synth.width);
      if (s.contains("shapes")) {
        cfg.synth.shapes.clear();
        for (const auto& v : s["shapes"]) cfg.synth.shapes.push_back(parse_shape(v.get<std::string>()));
      }
      read(s, "size_min", cfg.synth.size_min);
      read(s, "size_max", cfg.synth.size_max);
      read(s, "velocity_min", cfg.synth.velocity_min);
      read(s, "velocity_max", cfg.synth.velocity_max);
      read(s, "static_probability", cfg.synth.static_probability);
      read(s, "axis_aligned", cfg.synth.axis_aligned);
      read(s, "distractor_count", cfg.synth.distractor_count);
      read(s, "background_noise", cfg.synth.background_noise);
    }
    if (doc.contains("model")) {
      const json& m = doc["model"];
      reject_unknown(m, {"stem_channels", "deep_channels", "c_f", "c_r", "gate_channels", "score_hidden",
                         "deep_units", "gate_bias_init"},
                     "model");
      read(m, "stem_channels", cfg.model.stem_channels);
      read(m, "deep_channels", cfg.model.deep_channels);
      read(m, "c_f", cfg.model.c_f);
      read(m, "c_r", cfg.model.c_r);
      read(m, "gate_channels", cfg.model.gate_channels);
      read(m, "score_hidden", cfg.model.score_hidden);
      read(m, "deep_units", cfg.model.deep_units);
      read(m, "gate_bias_init", cfg.model.gate_bias_init);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed config: ") + e.what());
  }
  cfg.synth.seq_len = cfg.train.seq_len;
  cfg.train.validate();
  cfg.synth.validate();
  cfg.model.validate();
  return cfg;
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  ordered_json doc;
  auto& t = doc["train"];
  t["lr"] = cfg.train.lr;
  t["batch"] = cfg.train.batch;
  t["seq_len"] = cfg.train.seq_len;
  t["steps"] = cfg.train.steps;
  t["m1_final"] = cfg.train.m1_final;
  t["m2"] = cfg.train.m2;
  t["ramp_steps"] = cfg.train.ramp();
  t["tau_train"] = cfg.train.tau_train;
  t["pretrain_fraction"] = cfg.train.pretrain_fraction;
  t["score_weight"] = cfg.train.score_weight;
  t["seed"] = cfg.train.seed;
  auto& s = doc["synth"];
  s["height"] = cfg.synth.height;
  s["width"] = cfg.synth.width;
  s["shapes"] = ordered_json::array();
  for (ShapeKind k : cfg.synth.shapes) s["shapes"].push_back(shape_name(k));
  s["size_min"] = cfg.synth.size_min;
  s["size_max"] = cfg.synth.size_max;
  s["velocity_min"] = cfg.synth.velocity_min;
  s["velocity_max"] = cfg.synth.velocity_max;
  s["static_probability"] = cfg.synth.static_probability;
  s["axis_aligned"] = cfg.synth.axis_aligned;
  s["distractor_count"] = cfg.synth.distractor_count;
  s["background_noise"] = cfg.synth.background_noise;
  auto& m = doc["model"];
  m["stem_channels"] = cfg.model.stem_channels;
  m["deep_channels"] = cfg.model.deep_channels;
  m["c_f"] = cfg.model.c_f;
  m["c_r"] = cfg.model.c_r;
  m["gate_channels"] = cfg.model.gate_channels;
  m["score_hidden"] = cfg.model.score_hidden;
  m["deep_units"] = cfg.model.deep_units;
  m["gate_bias_init"] = cfg.model.gate_bias_init;
  return doc.dump(2);
}

#define REUSEGATE_INSTANTIATE_TRAINING(S)                                                                             \
  template Tensor<S> loss_gp(const Tensor<S>&, double, double);                                                        \
  template ScoreMap<S> downsample_mask(const BinaryMask&);                                                             \
  template Tensor<S> loss_delta(const DeltaMap<S>&, const ScoreMap<S>&, const ScoreMap<S>&);                          \
  template LossTerms<S> loss_total(const Tensor<S>&, const BinaryMask&, const Tensor<S>&, double, double,             \
                                   const DeltaTerms<S>*);                                                              \
  template StepStats train_step(Model<S>&, std::span<const SynthSequence>, const TrainConfig&, long);                  \
  template std::vector<StepStats> train(Model<S>&, const TrainConfig&, const SynthConfig&, std::ostream*,             \
                                        const StepCallback&);

REUSEGATE_INSTANTIATE_TRAINING(float)
REUSEGATE_INSTANTIATE_TRAINING(double)

}  // namespace reusegate
