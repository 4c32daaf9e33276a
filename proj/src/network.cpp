#include "reusegate/network.hpp"

#include "reusegate/format.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reusegate {

double logit(double p) { return std::log(p / (1.0 - p)); }

void ModelConfig::validate() const {
  for (int c : {stem_channels[0], stem_channels[1], deep_channels[0], deep_channels[1], c_f, c_r, gate_channels,
                score_hidden}) {
    if (c < 1) throw std::invalid_argument("model channel counts must be >= 1");
  }
  if (c_r % 2 != 0) throw std::invalid_argument("c_r must be even (refine-translator branches use c_r/2)");
  if (deep_units < 0) throw std::invalid_argument("deep_units must be >= 0");
  if (!std::isfinite(gate_bias_init)) throw std::invalid_argument("gate_bias_init must be finite");
}

std::map<std::string, std::string> ModelConfig::to_meta() const {
  return {
      {"model.stem_channels", std::to_string(stem_channels[0]) + "," + std::to_string(stem_channels[1])},
      {"model.deep_channels", std::to_string(deep_channels[0]) + "," + std::to_string(deep_channels[1])},
      {"model.c_f", std::to_string(c_f)},
      {"model.c_r", std::to_string(c_r)},
      {"model.gate_channels", std::to_string(gate_channels)},
      {"model.score_hidden", std::to_string(score_hidden)},
      {"model.deep_units", std::to_string(deep_units)},
      {"model.gate_bias_init", format_double(gate_bias_init)},
  };
}

ModelConfig ModelConfig::from_meta(const std::map<std::string, std::string>& meta) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::runtime_error("checkpoint meta lacks '" + key + "'");
    return it->second;
  };
  auto pair = [&](const std::string& key) {
    const auto parts = split(get(key), ',');
    if (parts.size() != 2) throw std::runtime_error("checkpoint meta '" + key + "' must hold two integers");
    return std::array<int, 2>{std::stoi(parts[0]), std::stoi(parts[1])};
  };
  ModelConfig cfg;
  cfg.stem_channels = pair("model.stem_channels");
  cfg.deep_channels = pair("model.deep_channels");
  cfg.c_f = std::stoi(get("model.c_f"));
  cfg.c_r = std::stoi(get("model.c_r"));
  cfg.gate_channels = std::stoi(get("model.gate_channels"));
  cfg.score_hidden = std::stoi(get("model.score_hidden"));
  cfg.deep_units = std::stoi(get("model.deep_units"));
  cfg.gate_bias_init = parse_double(get("model.gate_bias_init"));
  cfg.validate();
  return cfg;
}

template <typename S>
Conv<S> Model<S>::make_conv(const std::string& name, int c_in, int c_out, int k, int stride, int padding,
                            int dilation, double init_scale, std::mt19937_64& rng) {
  Conv<S> conv;
  conv.stride = stride;
  conv.padding = padding;
  conv.dilation = dilation;
  conv.weight = Tensor<S>({c_out, c_in, k, k});
  conv.bias = Tensor<S>({1, c_out, 1, 1});
  std::normal_distribution<double> normal(0.0, init_scale * std::sqrt(2.0 / double(c_in * k * k)));
  for (Eigen::Index i = 0; i < conv.weight.numel(); ++i) conv.weight.data()(i) = S(normal(rng));
  params_.emplace_back(name + ".weight", conv.weight);
  params_.emplace_back(name + ".bias", conv.bias);
  return conv;
}

template <typename S>
Model<S>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int c0 = cfg_.stem_channels[0], c1 = cfg_.stem_channels[1];
  const int d0 = cfg_.deep_channels[0], d1 = cfg_.deep_channels[1];
  const int cf = cfg_.c_f, cr = cfg_.c_r, half = cfg_.c_r / 2;

  stem1 = make_conv("stem.conv1", 3, c0, 3, 2, 1, 1, 1.0, rng);
  stem2 = make_conv("stem.conv2", c0, c1, 3, 2, 1, 1, 1.0, rng);

  auto make_stage = [&](const std::string& name, int c_in, int c_out) {
    DeepStage st;
    st.down = make_conv(name + ".down", c_in, c_out, 3, 2, 1, 1, 1.0, rng);
    for (int u = 0; u < cfg_.deep_units; ++u) {
      const std::string un = name + ".unit" + std::to_string(u);
      ResidualUnit ru;
      ru.a = make_conv(un + ".conv_a", c_out, c_out, 3, 1, 1, 1, 1.0, rng);
      ru.b = make_conv(un + ".conv_b", c_out, c_out, 3, 1, 1, 1, 0.5, rng);
      st.units.push_back(ru);
    }
    return st;
  };
  deep16 = make_stage("deep.s16", c1, d0);
  deep32 = make_stage("deep.s32", d0, d1);

  score1 = make_conv("score.conv1", d0, cfg_.score_hidden, 3, 1, 1, 1, 1.0, rng);
  score2 = make_conv("score.conv2", cfg_.score_hidden, 1, 3, 1, 1, 1, 1.0, rng);

  query = make_conv("matcher.query", c1 + 1, cf, 1, 1, 0, 1, 1.0, rng);
  compare = make_conv("matcher.compare", 2 * cf, cf, 3, 1, 1, 1, 1.0, rng);

  gate1 = make_conv("gate.conv1", cf, cfg_.gate_channels, 3, 1, 1, 1, 1.0, rng);
  gate2 = make_conv("gate.conv2", cfg_.gate_channels, 1, 3, 1, 1, 1, 0.05, rng);
  gate2.bias.data().setConstant(S(cfg_.gate_bias_init));

  delta = make_conv("delta.conv", cf, 1, 3, 1, 1, 1, 0.1, rng);

  refine_d1 = make_conv("refine.branch_d1", cr + 1, half, 3, 1, 1, 1, 1.0, rng);
  refine_d2 = make_conv("refine.branch_d2", cr + 1, half, 3, 1, 2, 2, 1.0, rng);
  refine_d4 = make_conv("refine.branch_d4", cr + 1, half, 3, 1, 4, 4, 1.0, rng);
  refine_merge = make_conv("refine.merge", 3 * half, cr, 1, 1, 0, 1, 1.0, rng);
  refine_res_a = make_conv("refine.res_a", cr, cr, 3, 1, 1, 1, 1.0, rng);
  refine_res_b = make_conv("refine.res_b", cr, cr, 3, 1, 1, 1, 0.5, rng);

  auto make_block = [&](const std::string& name, int c_in) {
    return std::array<Conv<S>, 2>{make_conv(name + ".conv_a", c_in, cr, 3, 1, 1, 1, 1.0, rng),
                                  make_conv(name + ".conv_b", cr, cr, 3, 1, 1, 1, 1.0, rng)};
  };
  r16 = make_block("decoder.r16", d0 + d1 + 1);
  r8 = make_block("decoder.r8", c1 + cr + 1);
  r8_reuse = make_block("decoder.r8_reuse", c1 + cr + 1);
  r4 = make_block("decoder.r4", c0 + cr + 1);
  head = make_conv("decoder.head", cr, 1, 1, 1, 0, 1, 1.0, rng);
}

template <typename S>
Model<S> Model<S>::clone() const {
  Model m(cfg_, seed_);
  for (std::size_t i = 0; i < params_.size(); ++i) m.params_[i].value.data() = params_[i].value.data();
  return m;
}

template <typename S>
FeaturePyramid<S> Model<S>::stem_forward(const Tensor<S>& frame) const {
  const Shape& s = frame.shape();
  if (s.c != 3) throw std::invalid_argument("stem_forward: frame must have 3 channels, got " + s.str());
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw std::invalid_argument("stem_forward: frame dimensions must be positive multiples of 32, got " + s.str());
  }
  FeaturePyramid<S> pyr;
  pyr.f4 = maxpool2d(relu(stem1(frame)), 2, 2);
  pyr.f8 = relu(stem2(pyr.f4));
  return pyr;
}

template <typename S>
Tensor<S> Model<S>::run_deep_stage(const DeepStage& stage, const Tensor<S>& x) const {
  Tensor<S> y = relu(stage.down(x));
  for (const auto& u : stage.units) y = relu(add(y, u.b(relu(u.a(y)))));
  return y;
}

template <typename S>
void Model<S>::deep_forward(FeaturePyramid<S>& pyr) const {
  if (!pyr.f8.defined()) throw invalid_state("deep_forward: f8 missing");
  pyr.f16 = run_deep_stage(deep16, pyr.f8);
  pyr.f32 = run_deep_stage(deep32, pyr.f16);
}

template <typename S>
ScoreMap<S> Model<S>::score_generate(const FeaturePyramid<S>& pyr) const {
  if (!pyr.f16.defined()) throw invalid_state("score_generate: f16 missing (reuse-path frame)");
  return {upsample_bilinear2x(score2(relu(score1(pyr.f16))))};
}

template <typename S>
Template<S> Model<S>::build_template(const Tensor<S>& f8_0, const ScoreMap<S>& s0) const {
  return {relu(query(concat_channels<S>({f8_0, s0.logits})))};
}

template <typename S>
DissimilarityFeature<S> Model<S>::match_dissimilarity(const Tensor<S>& f8, const ScoreMap<S>& s_prev,
                                                      const Template<S>& tmpl) const {
  Tensor<S> q = relu(query(concat_channels<S>({f8, s_prev.logits})));
  if (!(q.shape() == tmpl.features.shape())) {
    throw std::invalid_argument("match_dissimilarity: template shape " + tmpl.features.shape().str() +
                                " does not match query " + q.shape().str());
  }
  return {relu(compare(concat_channels<S>({q, abs(sub(q, tmpl.features))})))};
}

template <typename S>
Tensor<S> Model<S>::gate_probability(const DissimilarityFeature<S>& d) const {
  const Shape& s = d.d.shape();
  if (s.h < 4 || s.w < 4) throw std::invalid_argument("gate_probability: input smaller than 4x4: " + s.str());
  Tensor<S> x = gate1(maxpool2d(d.d, 2, 2));
  x = gate2(maxpool2d(x, 2, 2));
  return sigmoid(global_avg_pool(x));
}

template <typename S>
DeltaMap<S> Model<S>::generate_delta(const DissimilarityFeature<S>& d) const {
  return {delta(d.d)};
}

template <typename S>
RefinedFeature<S> Model<S>::refine_translate(const RefinedFeature<S>& r8_prev, const DeltaMap<S>& dm) const {
  Tensor<S> x = concat_channels<S>({r8_prev.r8, dm.delta});
  Tensor<S> m = refine_merge(concat_channels<S>({relu(refine_d1(x)), relu(refine_d2(x)), relu(refine_d4(x))}));
  return {add(m, refine_res_b(relu(refine_res_a(m))))};
}

template <typename S>
Tensor<S> Model<S>::decode_block(const std::array<Conv<S>, 2>& block, const Tensor<S>& x) const {
  return relu(block[1](relu(block[0](x))));
}

template <typename S>
Tensor<S> Model<S>::decode_r4(const Tensor<S>& f4, const Tensor<S>& r8_feat, const ScoreMap<S>& score) const {
  Tensor<S> r4_feat =
      decode_block(r4, concat_channels<S>({f4, upsample_bilinear2x(r8_feat), upsample_bilinear2x(score.logits)}));
  return upsample_bilinear2x(upsample_bilinear2x(head(r4_feat)));
}

template <typename S>
FullDecode<S> Model<S>::decode_full(const FeaturePyramid<S>& pyr, const ScoreMap<S>& score) const {
  if (!pyr.has_deep()) throw invalid_state("decode_full: f16/f32 missing");
  if (!(score.logits.shape().h == pyr.f8.shape().h && score.logits.shape().w == pyr.f8.shape().w)) {
    throw std::invalid_argument("decode_full: score map is not at 1/8 resolution");
  }
  Tensor<S> r16_feat = decode_block(
      r16, concat_channels<S>({pyr.f16, upsample_bilinear2x(pyr.f32), avgpool2d(score.logits, 2)}));
  Tensor<S> r8_feat = decode_block(r8, concat_channels<S>({pyr.f8, upsample_bilinear2x(r16_feat), score.logits}));
  return {decode_r4(pyr.f4, r8_feat, score), {r8_feat}};
}

template <typename S>
Tensor<S> Model<S>::decode_reuse(const RefinedFeature<S>& r8_hat, const FeaturePyramid<S>& pyr,
                                 const ScoreMap<S>& s_hat) const {
  Tensor<S> fused = decode_block(r8_reuse, concat_channels<S>({pyr.f8, r8_hat.r8, s_hat.logits}));
  return decode_r4(pyr.f4, fused, s_hat);
}

template <typename S>
std::vector<Parameter<S>*> Model<S>::parameters() {
  std::vector<Parameter<S>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename S>
std::vector<const Parameter<S>*> Model<S>::parameters() const {
  std::vector<const Parameter<S>*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

template <typename S>
std::vector<Parameter<S>*> Model<S>::parameters(const std::string& prefix) {
  std::vector<Parameter<S>*> out;
  for (auto& p : params_) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(&p);
  }
  return out;
}

template <typename S>
Parameter<S>& Model<S>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename S>
void Model<S>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename S>
Checkpoint Model<S>::to_checkpoint() const {
  const auto ps = parameters();
  return reusegate::to_checkpoint<S>(std::span<const Parameter<S>* const>(ps), cfg_.to_meta());
}

template <typename S>
Model<S> Model<S>::from_checkpoint(const Checkpoint& ckpt) {
  Model m(ModelConfig::from_meta(ckpt.meta));
  const auto ps = m.parameters();
  restore_parameters<S>(ckpt, std::span<Parameter<S>* const>(ps));
  return m;
}

template <typename S>
Tensor<S> mask_area_fraction(const BinaryMask& m, int factor) {
  if (factor < 1 || m.width % factor != 0 || m.height % factor != 0 || m.width == 0 || m.height == 0) {
    throw std::invalid_argument("mask dimensions " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                                " not divisible by " + std::to_string(factor));
  }
  const int h = m.height / factor, w = m.width / factor;
  Tensor<S> t({1, 1, h, w});
  const double inv = 1.0 / double(factor * factor);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int c = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) c += m(x * factor + dx, y * factor + dy);
      t.at(0, 0, y, x) = S(c * inv);
    }
  }
  return t;
}

template <typename S>
ScoreMap<S> init_score_from_mask(const BinaryMask& m) {
  Tensor<S> t = mask_area_fraction<S>(m, 8);
  t.data() = t.data().unaryExpr([](S p) { return S(logit(std::clamp(double(p), 0.01, 0.99))); });
  return {t};
}

template <typename S>
Tensor<S> score_target_from_mask(const BinaryMask& m) {
  Tensor<S> t = mask_area_fraction<S>(m, 8);
  t.data() = t.data().cwiseMax(S(0.01)).cwiseMin(S(0.99));
  return t;
}

template <typename S>
Tensor<S> mask_tensor(const BinaryMask& m) {
  Tensor<S> t({1, 1, m.height, m.width});
  for (std::size_t i = 0; i < m.bits.size(); ++i) t.data()(Eigen::Index(i)) = m.bits[i] ? S(1) : S(0);
  return t;
}

template <typename S>
BinaryMask mask_from_logits(const Tensor<S>& logits) {
  const Shape& s = logits.shape();
  if (s.n != 1 || s.c != 1) throw std::invalid_argument("mask_from_logits: expected a single-channel map");
  BinaryMask m(s.w, s.h);
  for (Eigen::Index i = 0; i < logits.numel(); ++i) m.bits[std::size_t(i)] = logits.data()(i) >= S(0) ? 1 : 0;
  return m;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> mask_area_fraction(const BinaryMask&, int);
template Tensor<double> mask_area_fraction(const BinaryMask&, int);
template ScoreMap<float> init_score_from_mask(const BinaryMask&);
template ScoreMap<double> init_score_from_mask(const BinaryMask&);
template Tensor<float> score_target_from_mask(const BinaryMask&);
template Tensor<double> score_target_from_mask(const BinaryMask&);
template Tensor<float> mask_tensor(const BinaryMask&);
template Tensor<double> mask_tensor(const BinaryMask&);
template BinaryMask mask_from_logits(const Tensor<float>&);
template BinaryMask mask_from_logits(const Tensor<double>&);

}  // namespace reusegate
