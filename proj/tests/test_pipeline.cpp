#include "support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace rgtest;

namespace {

GateConfig gate(double tau, GateMode mode = GateMode::dynamic, std::optional<double> tau2 = std::nullopt) {
  GateConfig g;
  g.tau = tau;
  g.mode = mode;
  g.tau2 = tau2;
  return g;
}

SynthSequence moving_sequence(std::uint64_t seed, int len = 5) {
  SynthConfig sc;
  sc.seq_len = len;
  sc.static_probability = 0.0;
  sc.velocity_min = 2;
  sc.velocity_max = 3;
  return synth_sequence(sc, seed);
}

TEST(Decide, ThresholdTable) {
  EXPECT_EQ(decide(0.71, gate(0.7)), Decision::Reuse);
  EXPECT_EQ(decide(0.7, gate(0.7)), Decision::Reuse);
  EXPECT_EQ(decide(0.69, gate(0.7)), Decision::Full);
  EXPECT_EQ(decide(0.999999, gate(1.0)), Decision::Full);
  EXPECT_EQ(decide(0.99, gate(0.3, GateMode::always_full)), Decision::Full);
  EXPECT_EQ(decide(0.8, gate(0.7, GateMode::copy)), Decision::Copy);
  EXPECT_EQ(decide(0.6, gate(0.7, GateMode::copy)), Decision::Full);
  const GateConfig f = gate(0.5, GateMode::fusion, 0.8);
  EXPECT_EQ(decide(0.9, f), Decision::Copy);
  EXPECT_EQ(decide(0.8, f), Decision::Copy);
  EXPECT_EQ(decide(0.6, f), Decision::Reuse);
  EXPECT_EQ(decide(0.3, f), Decision::Full);
}

TEST(Decide, InvalidConfigurations) {
  EXPECT_THROW(decide(0.5, gate(1.2)), std::invalid_argument);
  EXPECT_THROW(decide(0.5, gate(-0.1)), std::invalid_argument);
  EXPECT_THROW(decide(0.5, gate(0.5, GateMode::fusion)), std::invalid_argument);
  EXPECT_THROW(decide(0.5, gate(0.5, GateMode::fusion, 0.5)), std::invalid_argument);
  EXPECT_THROW(decide(0.5, gate(0.5, GateMode::fusion, 1.1)), std::invalid_argument);
  EXPECT_THROW(parse_gate_mode("sometimes"), std::invalid_argument);
}

TEST(Decide, ReuseSetsNestAcrossThresholds) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(200);
  for (auto& v : p) v = u(rng);
  std::set<std::size_t> prev;
  for (std::size_t i = 0; i < p.size(); ++i) prev.insert(i);
  for (double tau = 0.0; tau <= 1.0; tau += 0.05) {
    std::set<std::size_t> cur;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (decide(p[i], gate(tau)) == Decision::Reuse) cur.insert(i);
    EXPECT_TRUE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
    prev = cur;
  }
}

TEST(CountFlops, PathOrderingAndCopyIsGateChainOnly) {
  const ModelConfig mc;
  const PathFlops full = count_flops(Decision::Full, mc, 64, 64);
  const PathFlops reuse = count_flops(Decision::Reuse, mc, 64, 64);
  const PathFlops copy = count_flops(Decision::Copy, mc, 64, 64);
  EXPECT_LT(copy.total(), reuse.total());
  EXPECT_LT(reuse.total(), full.total());
  EXPECT_LT(double(reuse.total()) / double(full.total()), 0.7);
  for (const auto& l : copy.layers) {
    EXPECT_TRUE(l.layer.starts_with("stem.") || l.layer.starts_with("matcher.") || l.layer.starts_with("gate."))
        << l.layer;
  }
  for (const auto& l : reuse.layers) {
    EXPECT_FALSE(l.layer.starts_with("deep.") || l.layer.starts_with("score.") || l.layer.starts_with("decoder.r16."))
        << l.layer;
  }
}

TEST(CountFlops, ScalesWithArea) {
  for (const ModelConfig& mc : {ModelConfig{}, tiny_config()}) {
    for (Decision d : {Decision::Full, Decision::Reuse, Decision::Copy}) {
      EXPECT_EQ(count_flops(d, mc, 128, 128).total(), 4 * count_flops(d, mc, 64, 64).total());
      EXPECT_EQ(count_flops(d, mc, 64, 128).total(), 2 * count_flops(d, mc, 64, 64).total());
    }
  }
  EXPECT_THROW(count_flops(Decision::Full, ModelConfig{}, 48, 64), std::invalid_argument);
}

class InstrumentedFlops : public ::testing::TestWithParam<Decision> {};

TEST_P(InstrumentedFlops, ExecutedOpsMatchAnalyticCount) {
  Model<float> m(ModelConfig{}, 4);
  const SynthSequence seq = moving_sequence(4, 3);
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0]);
  reset_instrumented_flops();
  const StepResult<float> r = step_with_decision(m, st, image_to_tensor<float>(seq.frames[1]), GetParam());
  const std::uint64_t measured = instrumented_flops();
  EXPECT_EQ(r.record.flops, count_flops(GetParam(), m.config(), 64, 64).total());
  EXPECT_NEAR(double(measured), double(r.record.flops), 1e-3 * double(r.record.flops));
}

INSTANTIATE_TEST_SUITE_P(Paths, InstrumentedFlops,
                         ::testing::Values(Decision::Full, Decision::Reuse, Decision::Copy),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(ReuseRate, CountsCopyAsReused) {
  auto recs = [](std::initializer_list<Decision> ds) {
    std::vector<DecisionRecord> out;
    for (Decision d : ds) out.push_back({0, 1, 0.5, d, 0});
    return out;
  };
  EXPECT_DOUBLE_EQ(reuse_rate(recs({Decision::Full, Decision::Full})), 0.0);
  EXPECT_DOUBLE_EQ(reuse_rate(recs({Decision::Full, Decision::Reuse, Decision::Reuse, Decision::Full})), 0.5);
  EXPECT_DOUBLE_EQ(reuse_rate(recs({Decision::Copy, Decision::Full})), 0.5);
  EXPECT_THROW(reuse_rate(std::span<const DecisionRecord>()), std::invalid_argument);
}

TEST(Step, UninitializedStateIsRejected) {
  Model<float> m(tiny_config(), 1);
  ObjectState<float> st;
  EXPECT_THROW(step(m, st, Tensor<float>({1, 3, 64, 64}), gate(0.5)), invalid_state);
}

TEST(Step, FrameSizeMustMatch) {
  Model<float> m(tiny_config(), 1);
  const SynthSequence seq = moving_sequence(2, 2);
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0]);
  EXPECT_THROW(step(m, st, Tensor<float>({1, 3, 32, 64}), gate(0.5)), std::invalid_argument);
}

TEST(Step, StateUpdatesOnlyOnFullFrames) {
  Model<double> m(tiny_config(), 2);
  const SynthSequence seq = moving_sequence(5, 4);
  ObjectState<double> st = init_video(m, image_to_tensor<double>(seq.frames[0]), seq.masks[0]);
  EXPECT_EQ(st.frames_since_full, 0);
  std::vector<Eigen::ArrayXd> s_hist{st.s_prev.logits.data()}, r_hist{st.r8_prev.r8.data()};
  const Decision trace[] = {Decision::Reuse, Decision::Reuse, Decision::Full};
  for (int t = 1; t <= 3; ++t) {
    step_with_decision(m, st, image_to_tensor<double>(seq.frames[t]), trace[t - 1]);
    s_hist.push_back(st.s_prev.logits.data());
    r_hist.push_back(st.r8_prev.r8.data());
  }
  EXPECT_TRUE((s_hist[1] == s_hist[0]).all());
  EXPECT_TRUE((s_hist[2] == s_hist[0]).all());
  EXPECT_FALSE((s_hist[3] == s_hist[0]).all());
  EXPECT_TRUE((r_hist[2] == r_hist[0]).all());
  EXPECT_FALSE((r_hist[3] == r_hist[0]).all());
  EXPECT_EQ(st.frames_since_full, 0);
  EXPECT_EQ(st.full_frames_seen, 2);
}

TEST(Step, CopyReturnsPreviousMaskAtGateCost) {
  Model<float> m(tiny_config(), 3);
  m.gate2.weight.data().setZero();
  m.gate2.bias.data().setConstant(5.f);  // p ~ 0.993
  const SynthSequence seq = moving_sequence(6, 4);
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0]);
  const StepResult<float> r1 = step(m, st, image_to_tensor<float>(seq.frames[1]), gate(0.7, GateMode::copy));
  EXPECT_EQ(r1.record.decision, Decision::Copy);
  EXPECT_EQ(r1.mask, seq.masks[0]);
  EXPECT_EQ(r1.record.flops, count_flops(Decision::Copy, m.config(), 64, 64).total());
  const StepResult<float> r2 = step(m, st, image_to_tensor<float>(seq.frames[2]), gate(0.7, GateMode::copy));
  EXPECT_EQ(r2.mask, r1.mask);
  EXPECT_EQ(st.frames_since_full, 2);
}

TEST(Step, AlwaysFullIsDeterministicOnIdenticalFrames) {
  Model<float> m(tiny_config(), 7);
  const SynthSequence seq = moving_sequence(7, 2);
  const Tensor<float> f = image_to_tensor<float>(seq.frames[1]);
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0]);
  const StepResult<float> a = step(m, st, f, gate(0.5, GateMode::always_full));
  const StepResult<float> b = step(m, st, f, gate(0.5, GateMode::always_full));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.record.flops, b.record.flops);
  EXPECT_EQ(a.record.decision, Decision::Full);
}

TEST(InitVideo, ZeroFineTuneLeavesWeightsAndTemplateIsReproducible) {
  Model<float> m(tiny_config(), 8);
  const Model<float> ref = m.clone();
  const SynthSequence seq = moving_sequence(8, 2);
  const Tensor<float> f0 = image_to_tensor<float>(seq.frames[0]);
  ObjectState<float> a = init_video(m, f0, seq.masks[0]);
  ObjectState<float> b = init_video(m, f0, seq.masks[0]);
  EXPECT_TRUE((a.tmpl.features.data() == b.tmpl.features.data()).all());
  const auto pm = m.parameters();
  const auto pr = ref.parameters();
  for (std::size_t i = 0; i < pm.size(); ++i) EXPECT_TRUE((pm[i]->value.data() == pr[i]->value.data()).all());
  EXPECT_EQ(a.last_mask, seq.masks[0]);
  EXPECT_EQ(a.frames_since_full, 0);
}

TEST(InitVideo, RejectsMismatchedMask) {
  Model<float> m(tiny_config(), 8);
  EXPECT_THROW(init_video(m, Tensor<float>({1, 3, 64, 64}), BinaryMask(32, 32)), std::invalid_argument);
  EXPECT_THROW(init_video(m, Tensor<float>({1, 3, 48, 48}), BinaryMask(48, 48)), std::invalid_argument);
}

TEST(InitVideo, FineTuningOnlyTouchesScoreGenerator) {
  Model<float> m(tiny_config(), 9);
  const Model<float> ref = m.clone();
  const SynthSequence seq = moving_sequence(9, 2);
  TrackerOptions opts;
  opts.fine_tune_steps = 5;
  init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0], opts);
  const auto pm = m.parameters();
  const auto pr = ref.parameters();
  bool score_changed = false;
  for (std::size_t i = 0; i < pm.size(); ++i) {
    const bool same = (pm[i]->value.data() == pr[i]->value.data()).all();
    if (pm[i]->name.starts_with("score.")) score_changed |= !same;
    else EXPECT_TRUE(same) << pm[i]->name;
  }
  EXPECT_TRUE(score_changed);
}

TEST(Refresh, OnlySecondScoreLayerMovesAndZeroStepsIsNoop) {
  Model<float> m(tiny_config(), 10);
  const SynthSequence seq = moving_sequence(10, 2);
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0]);
  const Model<float> ref = m.clone();
  EXPECT_TRUE(refresh_score_generator(m, st, 0, 1e-3).empty());
  const auto pm = m.parameters();
  const auto pr = ref.parameters();
  for (std::size_t i = 0; i < pm.size(); ++i) EXPECT_TRUE((pm[i]->value.data() == pr[i]->value.data()).all());
  EXPECT_EQ(refresh_score_generator(m, st, 5, 1e-3).size(), 5u);
  for (std::size_t i = 0; i < pm.size(); ++i) {
    const bool same = (pm[i]->value.data() == pr[i]->value.data()).all();
    EXPECT_EQ(same, !pm[i]->name.starts_with("score.conv2.")) << pm[i]->name;
  }
  ObjectState<float> empty = st;
  empty.history.clear();
  EXPECT_TRUE(refresh_score_generator(m, empty, 5, 1e-3).empty());
}

TEST(Refresh, BceDescendsInMostTrials) {
  int monotone = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    Model<double> m(tiny_config(), 100 + t);
    const SynthSequence seq = moving_sequence(100 + t, 4);
    ObjectState<double> st = init_video(m, image_to_tensor<double>(seq.frames[0]), seq.masks[0]);
    for (int f = 1; f < 4; ++f) step_with_decision(m, st, image_to_tensor<double>(seq.frames[f]), Decision::Full);
    std::vector<double> l = refresh_score_generator(m, st, 5, 1e-3);
    l.push_back(0);  // closing value: BCE after the last update
    {
      std::vector<double> after = refresh_score_generator(m, st, 1, 0.0);
      l.back() = after.front();
    }
    monotone += std::is_sorted(l.rbegin(), l.rend()) ? 1 : 0;
  }
  EXPECT_GE(monotone, int(0.9 * trials));
}

TEST(Refresh, TriggeredEveryEighthFullFrame) {
  Model<float> m(tiny_config(), 12);
  const SynthSequence seq = moving_sequence(12, 9);
  TrackerOptions opts;
  opts.refresh = true;
  ObjectState<float> st = init_video(m, image_to_tensor<float>(seq.frames[0]), seq.masks[0], opts);
  const float before = m.parameter("score.conv2.bias").value.data()(0);
  for (int f = 1; f <= 6; ++f) step(m, st, image_to_tensor<float>(seq.frames[f]), gate(1.0), opts);
  EXPECT_EQ(st.full_frames_seen, 7);
  EXPECT_EQ(m.parameter("score.conv2.bias").value.data()(0), before);
  step(m, st, image_to_tensor<float>(seq.frames[7]), gate(1.0), opts);
  EXPECT_NE(m.parameter("score.conv2.bias").value.data()(0), before);
}

TEST(Merge, SingleDisjointAndOverlap) {
  Eigen::ArrayXd a(4), b(4);
  a << 1.0, -1.0, 2.0, 0.0;
  b << -1.0, 1.0, 3.0, 0.0;
  const TD ta({1, 1, 2, 2}, a), tb({1, 1, 2, 2}, b);
  const std::vector<TD> one{ta};
  const LabelMap l1 = merge_objects<double>(one);
  EXPECT_EQ(l1.labels, (std::vector<int>{1, 0, 1, 1}));
  const std::vector<TD> two{ta, tb};
  const LabelMap l2 = merge_objects<double>(two);
  EXPECT_EQ(l2.labels, (std::vector<int>{1, 2, 2, 1}));  // last pixel: tie at 0 goes to object 1
  const std::vector<TD> bad{ta, TD({1, 1, 2, 3})};
  EXPECT_THROW(merge_objects<double>(bad), std::invalid_argument);
  EXPECT_THROW(merge_objects<double>(std::span<const TD>()), std::invalid_argument);
}

TEST(Evaluate, BaselineEquivalenceAndLedgerConsistency) {
  Model<float> m(tiny_config(), 13);
  const SynthSequence seq = moving_sequence(13, 5);
  const VideoInput<float> v = video_from_sequence<float>(seq, "v");
  EvalOptions opts;
  opts.gate = gate(0.5, GateMode::always_full);
  const VideoResult r = evaluate_video(m, v, opts);
  EXPECT_DOUBLE_EQ(r.reuse, 0.0);
  EXPECT_DOUBLE_EQ(r.flop_ratio(), 1.0);
  for (std::size_t t = 1; t < v.frames.size(); ++t) {
    EXPECT_EQ(r.predicted[t].object_mask(1), baseline_segment(m, v.frames[t])) << t;
  }
  std::uint64_t per_frame = 0;
  for (const auto& [_, f] : r.ledger.per_frame()) per_frame += f;
  EXPECT_EQ(per_frame, r.ledger.video_total());
  EXPECT_EQ(r.ledger.video_total(), r.flops);
}

TEST(Evaluate, MultiObjectTracksIndependently) {
  Model<float> m(tiny_config(), 14);
  SynthSequence seq = moving_sequence(14, 3);
  VideoInput<float> v = video_from_sequence<float>(seq, "two");
  for (auto& l : v.labels) {
    for (int y = 50; y < 60; ++y)
      for (int x = 2; x < 12; ++x)
        if (l.labels[std::size_t(y) * 64 + x] == 0) l.labels[std::size_t(y) * 64 + x] = 2;
  }
  EvalOptions opts;
  opts.gate = gate(0.5);
  const VideoResult r = evaluate_video(m, v, opts);
  ASSERT_EQ(r.objects.size(), 2u);
  EXPECT_EQ(r.objects[1].records.size(), 2u);
  EXPECT_EQ(r.predicted[0], v.labels[0]);
  EXPECT_EQ(r.full_flops, 2 * 2 * count_flops(Decision::Full, m.config(), 64, 64).total());
}

TEST(Evaluate, RejectsMissingObjectsAndMismatchedLabels) {
  Model<float> m(tiny_config(), 15);
  const SynthSequence seq = moving_sequence(15, 3);
  VideoInput<float> v = video_from_sequence<float>(seq, "bad");
  EvalOptions opts;
  VideoInput<float> empty = v;
  for (auto& x : empty.labels[0].labels) x = 0;
  EXPECT_THROW(evaluate_video(m, empty, opts), std::invalid_argument);
  VideoInput<float> short_labels = v;
  short_labels.labels.pop_back();
  EXPECT_THROW(evaluate_video(m, short_labels, opts), std::invalid_argument);
  VideoInput<float> wrong = v;
  wrong.labels[1] = LabelMap(32, 32);
  EXPECT_THROW(evaluate_video(m, wrong, opts), std::invalid_argument);
}

}  // namespace
