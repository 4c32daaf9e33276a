#include "reusegate/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reusegate {

const char* to_string(GateMode m) {
  switch (m) {
    case GateMode::dynamic: return "dynamic";
    case GateMode::always_full: return "always_full";
    case GateMode::copy: return "copy";
    case GateMode::fusion: return "fusion";
  }
  return "?";
}

const char* to_string(Decision d) {
  switch (d) {
    case Decision::Full: return "Full";
    case Decision::Reuse: return "Reuse";
    case Decision::Copy: return "Copy";
  }
  return "?";
}

GateMode parse_gate_mode(const std::string& s) {
  if (s == "dynamic") return GateMode::dynamic;
  if (s == "always_full") return GateMode::always_full;
  if (s == "copy") return GateMode::copy;
  if (s == "fusion") return GateMode::fusion;
  throw std::invalid_argument("unknown gate mode '" + s + "'");
}

void GateConfig::validate() const {
  if (!(tau >= 0 && tau <= 1)) throw std::invalid_argument("tau must lie in [0, 1]");
  if (mode == GateMode::fusion) {
    if (!tau2) throw std::invalid_argument("fusion mode requires tau2");
    if (!(*tau2 > tau && *tau2 <= 1)) throw std::invalid_argument("fusion mode requires tau < tau2 <= 1");
  }
}

Decision decide(double p_gate, const GateConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case GateMode::always_full: return Decision::Full;
    case GateMode::dynamic: return p_gate >= cfg.tau ? Decision::Reuse : Decision::Full;
    case GateMode::copy: return p_gate >= cfg.tau ? Decision::Copy : Decision::Full;
    case GateMode::fusion:
      if (p_gate >= *cfg.tau2) return Decision::Copy;
      return p_gate >= cfg.tau ? Decision::Reuse : Decision::Full;
  }
  throw std::invalid_argument("unknown gate mode");
}

// ---------------------------------------------------------------------------
// FLOP accounting

namespace {

struct FlopBuilder {
  std::vector<LayerFlops>& out;
  int H, W;

  std::uint64_t px(int div) const { return std::uint64_t(H / div) * std::uint64_t(W / div); }
  void conv(const std::string& name, int k, int c_in, int c_out, int div) {
    out.push_back({name, 2ull * k * k * c_in * c_out * px(div)});
  }
  // pooling / resampling: one op per output element
  void elem(const std::string& name, int channels, int div) { out.push_back({name, std::uint64_t(channels) * px(div)}); }
};

void gate_chain(FlopBuilder& b, const ModelConfig& m) {
  const int c0 = m.stem_channels[0], c1 = m.stem_channels[1];
  b.conv("stem.conv1", 3, 3, c0, 2);
  b.elem("stem.pool", c0, 4);
  b.conv("stem.conv2", 3, c0, c1, 8);
  b.conv("matcher.query", 1, c1 + 1, m.c_f, 8);
  b.conv("matcher.compare", 3, 2 * m.c_f, m.c_f, 8);
  b.elem("gate.pool1", m.c_f, 16);
  b.conv("gate.conv1", 3, m.c_f, m.gate_channels, 16);
  b.elem("gate.pool2", m.gate_channels, 32);
  b.conv("gate.conv2", 3, m.gate_channels, 1, 32);
  b.elem("gate.avgpool", 1, 32);  // averages the (H/32, W/32) map
}

void r4_and_head(FlopBuilder& b, const ModelConfig& m) {
  const int c0 = m.stem_channels[0];
  b.elem("decoder.r4.upsample_r8", m.c_r, 4);
  b.elem("decoder.r4.upsample_score", 1, 4);
  b.conv("decoder.r4.conv_a", 3, c0 + m.c_r + 1, m.c_r, 4);
  b.conv("decoder.r4.conv_b", 3, m.c_r, m.c_r, 4);
  b.conv("decoder.head", 1, m.c_r, 1, 4);
  b.elem("decoder.head.upsample1", 1, 2);
  b.elem("decoder.head.upsample2", 1, 1);
}

}  // namespace

std::uint64_t PathFlops::total() const {
  std::uint64_t t = 0;
  for (const auto& l : layers) t += l.flops;
  return t;
}

PathFlops count_flops(Decision path, const ModelConfig& m, int height, int width) {
  m.validate();
  if (height % 32 != 0 || width % 32 != 0 || height <= 0 || width <= 0) {
    throw std::invalid_argument("count_flops: frame dimensions must be positive multiples of 32");
  }
  PathFlops pf;
  pf.path = path;
  FlopBuilder b{pf.layers, height, width};
  gate_chain(b, m);
  const int c1 = m.stem_channels[1], d0 = m.deep_channels[0], d1 = m.deep_channels[1];
  if (path == Decision::Full) {
    b.conv("deep.s16.down", 3, c1, d0, 16);
    for (int u = 0; u < m.deep_units; ++u) {
      b.conv("deep.s16.unit" + std::to_string(u) + ".conv_a", 3, d0, d0, 16);
      b.conv("deep.s16.unit" + std::to_string(u) + ".conv_b", 3, d0, d0, 16);
    }
    b.conv("deep.s32.down", 3, d0, d1, 32);
    for (int u = 0; u < m.deep_units; ++u) {
      b.conv("deep.s32.unit" + std::to_string(u) + ".conv_a", 3, d1, d1, 32);
      b.conv("deep.s32.unit" + std::to_string(u) + ".conv_b", 3, d1, d1, 32);
    }
    b.conv("score.conv1", 3, d0, m.score_hidden, 16);
    b.conv("score.conv2", 3, m.score_hidden, 1, 16);
    b.elem("score.upsample", 1, 8);
    b.elem("decoder.r16.upsample_f32", d1, 16);
    b.elem("decoder.r16.pool_score", 1, 16);
    b.conv("decoder.r16.conv_a", 3, d0 + d1 + 1, m.c_r, 16);
    b.conv("decoder.r16.conv_b", 3, m.c_r, m.c_r, 16);
    b.elem("decoder.r8.upsample_r16", m.c_r, 8);
    b.conv("decoder.r8.conv_a", 3, c1 + m.c_r + 1, m.c_r, 8);
    b.conv("decoder.r8.conv_b", 3, m.c_r, m.c_r, 8);
    r4_and_head(b, m);
  } else if (path == Decision::Reuse) {
    const int half = m.c_r / 2;
    b.conv("delta.conv", 3, m.c_f, 1, 8);
    b.conv("refine.branch_d1", 3, m.c_r + 1, half, 8);
    b.conv("refine.branch_d2", 3, m.c_r + 1, half, 8);
    b.conv("refine.branch_d4", 3, m.c_r + 1, half, 8);
    b.conv("refine.merge", 1, 3 * half, m.c_r, 8);
    b.conv("refine.res_a", 3, m.c_r, m.c_r, 8);
    b.conv("refine.res_b", 3, m.c_r, m.c_r, 8);
    b.conv("decoder.r8_reuse.conv_a", 3, c1 + m.c_r + 1, m.c_r, 8);
    b.conv("decoder.r8_reuse.conv_b", 3, m.c_r, m.c_r, 8);
    r4_and_head(b, m);
  }
  return pf;
}

void FlopLedger::add(const DecisionRecord& rec, const PathFlops& path) {
  const std::uint64_t t = path.total();
  total_ += t;
  per_frame_[rec.frame_index] += t;
  for (const auto& l : path.layers) per_layer_[{l.layer, to_string(path.path)}] += l.flops;
}

double reuse_rate(std::span<const DecisionRecord> records) {
  if (records.empty()) throw std::invalid_argument("reuse_rate: no records");
  const auto reused =
      std::count_if(records.begin(), records.end(), [](const DecisionRecord& r) { return r.decision != Decision::Full; });
  return double(reused) / double(records.size());
}

// ---------------------------------------------------------------------------
// Tracking

namespace {

template <typename S>
void check_frame(const Tensor<S>& frame, const BinaryMask* mask) {
  const Shape& s = frame.shape();
  if (s.n != 1 || s.c != 3) throw std::invalid_argument("frame must be (1, 3, H, W), got " + s.str());
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw std::invalid_argument("frame dimensions must be positive multiples of 32, got " + s.str());
  }
  if (mask && (mask->width != s.w || mask->height != s.h)) {
    throw std::invalid_argument("mask dimensions do not match the frame");
  }
}

template <typename S>
void remember_full_frame(ObjectState<S>& state, const FeaturePyramid<S>& pyr, const BinaryMask& mask,
                         const TrackerOptions& opts) {
  if (opts.history == 0) return;
  state.history.push_back({pyr.f16.detach(), score_target_from_mask<S>(mask)});
  if (state.history.size() > opts.history) state.history.erase(state.history.begin());
}

}  // namespace

template <typename S>
ObjectState<S> init_video(Model<S>& model, const Tensor<S>& frame0, const BinaryMask& mask0,
                          const TrackerOptions& opts, int object_id) {
  check_frame(frame0, &mask0);
  if (opts.fine_tune_steps > 0) {
    FeaturePyramid<S> pyr0;
    {
      NoGradGuard ng;
      pyr0 = model.stem_forward(frame0);
      model.deep_forward(pyr0);
    }
    const Tensor<S> target = score_target_from_mask<S>(mask0);
    auto params = model.parameters("score.");
    AdamConfig adam;
    adam.lr = opts.fine_tune_lr;
    for (int i = 0; i < opts.fine_tune_steps; ++i) {
      Tensor<S> loss = bce_with_logits(model.score_generate(pyr0).logits, target);
      backward(loss);
      Tape<S>::current().clear();
      adam_step<S>(params, adam);
    }
  }

  NoGradGuard ng;
  ObjectState<S> st;
  FeaturePyramid<S> pyr = model.stem_forward(frame0);
  const ScoreMap<S> s0 = init_score_from_mask<S>(mask0);
  st.tmpl = model.build_template(pyr.f8, s0);
  model.deep_forward(pyr);
  FullDecode<S> fd = model.decode_full(pyr, s0);
  st.s_prev = s0;
  st.r8_prev = fd.r8;
  st.last_mask = mask0;
  st.last_logits = fd.mask_logits;
  st.object_id = object_id;
  st.frame_index = 1;
  st.frames_since_full = 0;
  st.full_frames_seen = 1;
  remember_full_frame(st, pyr, mask0, opts);
  st.initialized = true;
  return st;
}

namespace {

template <typename S>
StepResult<S> run_step(Model<S>& model, ObjectState<S>& state, const Tensor<S>& frame,
                       const std::optional<GateConfig>& cfg, Decision forced, const TrackerOptions& opts) {
  if (!state.initialized) throw invalid_state("step: object state is not initialized");
  check_frame(frame, &state.last_mask);
  const int H = frame.shape().h, W = frame.shape().w;

  StepResult<S> res;
  bool refresh_due = false;
  {
    NoGradGuard ng;
    FeaturePyramid<S> pyr = model.stem_forward(frame);
    const DissimilarityFeature<S> d = model.match_dissimilarity(pyr.f8, state.s_prev, state.tmpl);
    const double p = double(model.gate_probability(d).item());
    const Decision decision = cfg ? decide(p, *cfg) : forced;

    switch (decision) {
      case Decision::Full: {
        model.deep_forward(pyr);
        ScoreMap<S> score = model.score_generate(pyr);
        FullDecode<S> fd = model.decode_full(pyr, score);
        res.logits = fd.mask_logits;
        res.mask = mask_from_logits(res.logits);
        state.s_prev = score;
        state.r8_prev = fd.r8;
        state.frames_since_full = 0;
        state.full_frames_seen += 1;
        remember_full_frame(state, pyr, res.mask, opts);
        refresh_due = opts.refresh && opts.refresh_interval > 0 && state.full_frames_seen % opts.refresh_interval == 0;
        break;
      }
      case Decision::Reuse: {
        const DeltaMap<S> delta = model.generate_delta(d);
        const ScoreMap<S> s_hat{add(state.s_prev.logits, delta.delta)};
        const RefinedFeature<S> r8_hat = model.refine_translate(state.r8_prev, delta);
        res.logits = model.decode_reuse(r8_hat, pyr, s_hat);
        res.mask = mask_from_logits(res.logits);
        state.frames_since_full += 1;
        break;
      }
      case Decision::Copy:
        res.logits = state.last_logits;
        res.mask = state.last_mask;
        state.frames_since_full += 1;
        break;
    }
    res.record = {state.frame_index, state.object_id, p, decision, count_flops(decision, model.config(), H, W).total()};
  }
  state.last_mask = res.mask;
  state.last_logits = res.logits;
  state.frame_index += 1;
  if (refresh_due) refresh_score_generator(model, state, opts.refresh_steps, opts.refresh_lr);
  return res;
}

}  // namespace

template <typename S>
StepResult<S> step(Model<S>& model, ObjectState<S>& state, const Tensor<S>& frame, const GateConfig& cfg,
                   const TrackerOptions& opts) {
  cfg.validate();
  return run_step(model, state, frame, std::optional<GateConfig>(cfg), Decision::Full, opts);
}

template <typename S>
StepResult<S> step_with_decision(Model<S>& model, ObjectState<S>& state, const Tensor<S>& frame, Decision decision,
                                 const TrackerOptions& opts) {
  return run_step(model, state, frame, std::nullopt, decision, opts);
}

template <typename S>
std::vector<double> refresh_score_generator(Model<S>& model, ObjectState<S>& state, int steps, double lr) {
  std::vector<double> losses;
  if (state.history.empty() || steps <= 0) return losses;
  std::vector<Tensor<S>> hidden;
  {
    NoGradGuard ng;
    for (const auto& s : state.history) hidden.push_back(relu(model.score1(s.f16)));
  }
  auto params = model.parameters("score.conv2.");
  AdamConfig adam;
  adam.lr = lr;
  for (int i = 0; i < steps; ++i) {
    Tensor<S> total;
    for (std::size_t k = 0; k < hidden.size(); ++k) {
      Tensor<S> l = bce_with_logits(upsample_bilinear2x(model.score2(hidden[k])), state.history[k].label);
      total = total.defined() ? add(total, l) : l;
    }
    total = scale(total, S(1) / S(hidden.size()));
    losses.push_back(double(total.item()));
    backward(total);
    Tape<S>::current().clear();
    adam_step<S>(params, adam);
  }
  return losses;
}

template <typename S>
Tensor<S> predict_full(const Model<S>& model, const Tensor<S>& frame) {
  NoGradGuard ng;
  FeaturePyramid<S> pyr = model.stem_forward(frame);
  model.deep_forward(pyr);
  return model.decode_full(pyr, model.score_generate(pyr)).mask_logits;
}

template <typename S>
BinaryMask baseline_segment(const Model<S>& model, const Tensor<S>& frame) {
  check_frame(frame, nullptr);
  return mask_from_logits(predict_full(model, frame));
}

int LabelMap::max_label() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

BinaryMask LabelMap::object_mask(int id) const {
  BinaryMask m(width, height);
  for (std::size_t i = 0; i < labels.size(); ++i) m.bits[i] = labels[i] == id ? 1 : 0;
  return m;
}

template <typename S>
LabelMap merge_objects(std::span<const Tensor<S>> logits) {
  if (logits.empty()) throw std::invalid_argument("merge_objects: no objects");
  const Shape s = logits.front().shape();
  for (const auto& l : logits) {
    if (!(l.shape() == s) || s.n != 1 || s.c != 1) {
      throw std::invalid_argument("merge_objects: logit maps must all be (1, 1, H, W) of equal size");
    }
  }
  LabelMap out(s.w, s.h);
  for (Eigen::Index i = 0; i < s.numel(); ++i) {
    int label = 0;
    S best = S(0);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      const S v = logits[k].data()(i);
      if (label == 0 ? v >= best : v > best) {
        best = v;
        label = int(k) + 1;
      }
    }
    out.labels[std::size_t(i)] = label;
  }
  return out;
}

template <typename S>
VideoResult evaluate_video(const Model<S>& model, const VideoInput<S>& video, const EvalOptions& opts) {
  opts.gate.validate();
  if (video.frames.empty() || video.labels.empty()) throw std::invalid_argument("video has no frames or no mask0");
  if (video.labels.size() != video.frames.size()) {
    throw std::invalid_argument("video '" + video.name + "': every frame needs a ground-truth label map");
  }
  const int H = video.frames.front().shape().h, W = video.frames.front().shape().w;
  for (const auto& l : video.labels) {
    if (l.width != W || l.height != H) throw std::invalid_argument("video '" + video.name + "': dimension mismatch");
  }
  const int objects = video.labels.front().max_label();
  if (objects < 1) throw std::invalid_argument("video '" + video.name + "': mask0 has no objects");

  VideoResult res;
  res.name = video.name;
  const std::size_t T = video.frames.size();
  std::vector<std::vector<Tensor<S>>> logits(T);  // [t][object]
  const std::uint64_t full_cost = count_flops(Decision::Full, model.config(), H, W).total();

  for (int id = 1; id <= objects; ++id) {
    Model<S> local = model.clone();
    ObjectResult obj;
    obj.object_id = id;
    ObjectState<S> st = init_video(local, video.frames[0], video.labels[0].object_mask(id), opts.tracker, id);
    logits[0].push_back(mask_tensor<S>(video.labels[0].object_mask(id)));
    logits[0].back().data() = logits[0].back().data() * S(2) - S(1);  // given mask as +-1 logits
    for (std::size_t t = 1; t < T; ++t) {
      StepResult<S> r = step(local, st, video.frames[t], opts.gate, opts.tracker);
      logits[t].push_back(r.logits);
      obj.records.push_back(r.record);
      obj.gt_iou_prev.push_back(iou(video.labels[t - 1].object_mask(id), video.labels[t].object_mask(id)));
      res.ledger.add(r.record, count_flops(r.record.decision, model.config(), H, W));
      res.flops += r.record.flops;
      res.full_flops += full_cost;
    }
    res.objects.push_back(std::move(obj));
  }

  for (std::size_t t = 0; t < T; ++t) {
    res.predicted.push_back(t == 0 ? video.labels[0] : merge_objects<S>(logits[t]));
  }
  const double tol = opts.boundary_tol ? *opts.boundary_tol : default_boundary_tolerance(W, H);
  std::vector<DecisionRecord> all;
  for (auto& obj : res.objects) {
    std::vector<BinaryMask> pred, gt;
    for (std::size_t t = 0; t < T; ++t) {
      pred.push_back(res.predicted[t].object_mask(obj.object_id));
      gt.push_back(video.labels[t].object_mask(obj.object_id));
    }
    if (T > 1) {
      obj.j = jaccard_mean(pred, gt);
      obj.f = boundary_f_mean(pred, gt, tol);
      obj.jf = jf_mean(obj.j, obj.f);
      obj.reuse = reuse_rate(obj.records);
    }
    res.j += obj.j / objects;
    res.f += obj.f / objects;
    all.insert(all.end(), obj.records.begin(), obj.records.end());
  }
  res.jf = jf_mean(res.j, res.f);
  res.reuse = all.empty() ? 0.0 : reuse_rate(all);
  return res;
}

#define REUSEGATE_INSTANTIATE_PIPELINE(S)                                                                            \
  template ObjectState<S> init_video(Model<S>&, const Tensor<S>&, const BinaryMask&, const TrackerOptions&, int);     \
  template StepResult<S> step(Model<S>&, ObjectState<S>&, const Tensor<S>&, const GateConfig&, const TrackerOptions&); \
  template StepResult<S> step_with_decision(Model<S>&, ObjectState<S>&, const Tensor<S>&, Decision,                   \
                                            const TrackerOptions&);                                                   \
  template std::vector<double> refresh_score_generator(Model<S>&, ObjectState<S>&, int, double);                      \
  template Tensor<S> predict_full(const Model<S>&, const Tensor<S>&);                                                \
  template BinaryMask baseline_segment(const Model<S>&, const Tensor<S>&);                                           \
  template LabelMap merge_objects(std::span<const Tensor<S>>);                                                       \
  template VideoResult evaluate_video(const Model<S>&, const VideoInput<S>&, const EvalOptions&);

REUSEGATE_INSTANTIATE_PIPELINE(float)
REUSEGATE_INSTANTIATE_PIPELINE(double)

}  // namespace reusegate
