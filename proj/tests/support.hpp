#pragma once

#include "reusegate/network.hpp"
#include "reusegate/ops.hpp"
#include "reusegate/pipeline.hpp"
#include "reusegate/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace rgtest {

using namespace reusegate;
using TD = Tensor<double>;

inline TD random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  TD t(s, grad);
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.data()(i) = u(rng);
  return t;
}

/// Scalar probe: mean squared distance to a fixed random target, so every
/// output element carries a distinct, nonzero upstream gradient.
inline TD probe_loss(const TD& out, const TD& target) { return l2_mean(out, target); }

struct GradCheckResult {
  double rel_error = 0;   // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t checked = 0;
};

/// Central finite differences on up to `coords` sampled entries of each leaf.
inline GradCheckResult gradcheck(const std::vector<TD>& leaves, const std::function<TD()>& loss_fn,
                                 std::mt19937_64& rng, std::size_t coords = 16, double eps = 1e-6) {
  auto& tape = Tape<double>::current();
  tape.clear();
  for (auto leaf : leaves) leaf.zero_grad();
  {
    TD loss = loss_fn();
    backward(loss);
  }
  tape.clear();

  double diff2 = 0, an2 = 0, num2 = 0;
  GradCheckResult res;
  NoGradGuard ng;
  for (auto leaf : leaves) {
    const Eigen::Index n = leaf.numel();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), coords));
    for (Eigen::Index i : idx) {
      const double orig = leaf.data()(i);
      leaf.data()(i) = orig + eps;
      const double up = loss_fn().item();
      leaf.data()(i) = orig - eps;
      const double down = loss_fn().item();
      leaf.data()(i) = orig;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = leaf.grad()(i);
      diff2 += (analytic - numeric) * (analytic - numeric);
      an2 += analytic * analytic;
      num2 += numeric * numeric;
      ++res.checked;
    }
  }
  const double denom = std::max({std::sqrt(an2), std::sqrt(num2), 1e-12});
  res.rel_error = std::sqrt(diff2) / denom;
  return res;
}

/// Narrow model so composite checks stay fast in double precision.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.stem_channels = {4, 6};
  c.deep_channels = {6, 6};
  c.c_f = 4;
  c.c_r = 4;
  c.gate_channels = 4;
  c.score_hidden = 4;
  c.deep_units = 1;
  return c;
}

inline std::vector<TD> param_leaves(Model<double>& m, const std::string& prefix) {
  std::vector<TD> out;
  for (auto* p : m.parameters(prefix)) out.push_back(p->value);
  return out;
}

inline BinaryMask square_mask(int w, int h, int x0, int y0, int side) {
  BinaryMask m(w, h);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x)
      if (x >= 0 && y >= 0 && x < w && y < h) m.set(x, y, true);
  return m;
}

template <typename S>
VideoInput<S> video_from_sequence(const SynthSequence& seq, const std::string& name) {
  VideoInput<S> v;
  v.name = name;
  for (const auto& f : seq.frames) v.frames.push_back(image_to_tensor<S>(f));
  for (const auto& m : seq.masks) {
    LabelMap l(m.width, m.height);
    for (std::size_t i = 0; i < m.bits.size(); ++i) l.labels[i] = m.bits[i];
    v.labels.push_back(l);
  }
  return v;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace rgtest
