#include "reusegate/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace reusegate {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;

template <typename S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

struct ConvGeometry {
  int c_in, h, w, k, stride, pad, dil, h_out, w_out;
};

// cols is (c_in*k*k) x (h_out*w_out), row-major.
template <typename S>
void im2col(const S* img, const ConvGeometry& g, S* cols) {
  const Eigen::Index p = Eigen::Index(g.h_out) * g.w_out;
  for (int ci = 0; ci < g.c_in; ++ci) {
    const S* plane = img + Eigen::Index(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        S* row = cols + (Eigen::Index(ci * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          S* dst = row + Eigen::Index(oy) * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w_out, S(0));
            continue;
          }
          const S* src = plane + Eigen::Index(iy) * g.w;
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride - g.pad + kx * g.dil;
            dst[ox] = (ix < 0 || ix >= g.w) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accumulate(const S* cols, const ConvGeometry& g, S* img) {
  const Eigen::Index p = Eigen::Index(g.h_out) * g.w_out;
  for (int ci = 0; ci < g.c_in; ++ci) {
    S* plane = img + Eigen::Index(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const S* row = cols + (Eigen::Index(ci * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          const S* src = row + Eigen::Index(oy) * g.w_out;
          S* dst = plane + Eigen::Index(iy) * g.w;
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename S>
S stable_sigmoid(S x) {
  S y;
  if (x >= S(0)) {
    y = S(1) / (S(1) + std::exp(-x));
  } else {
    const S e = std::exp(x);
    y = e / (S(1) + e);
  }
  return std::clamp(y, std::numeric_limits<S>::min(), std::nextafter(S(1), S(0)));
}

// Source taps for half-pixel bilinear 2x along one axis.
struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

Taps upsample_taps(int n) {
  Taps t;
  const int m = 2 * n;
  t.i0.resize(m);
  t.i1.resize(m);
  t.w0.resize(m);
  t.w1.resize(m);
  for (int o = 0; o < m; ++o) {
    const double src = (o + 0.5) / 2.0 - 0.5;
    const int lo = static_cast<int>(std::floor(src));
    const double frac = src - lo;
    t.i0[o] = std::clamp(lo, 0, n - 1);
    t.i1[o] = std::clamp(lo + 1, 0, n - 1);
    t.w0[o] = 1.0 - frac;
    t.w1[o] = frac;
  }
  return t;
}

}  // namespace

int conv_output_size(int in, int kernel, int stride, int padding, int dilation) {
  const int span = in + 2 * padding - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int padding,
                 int dilation) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.h != ws.w) throw std::invalid_argument("conv2d: kernel must be square");
  if (xs.c != ws.c) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                                std::to_string(ws.c));
  }
  if (stride < 1 || dilation < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding/dilation");
  if (b.defined() && b.numel() != ws.n) throw std::invalid_argument("conv2d: bias size mismatch");

  ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, padding, dilation, 0, 0};
  g.h_out = conv_output_size(xs.h, ws.h, stride, padding, dilation);
  g.w_out = conv_output_size(xs.w, ws.w, stride, padding, dilation);
  if (g.h_out <= 0 || g.w_out <= 0) throw std::invalid_argument("conv2d: zero-sized output for input " + xs.str());

  const int c_out = ws.n;
  const Eigen::Index kk = Eigen::Index(xs.c) * g.k * g.k;
  const Eigen::Index p = Eigen::Index(g.h_out) * g.w_out;
  const Shape os{xs.n, c_out, g.h_out, g.w_out};

  std::vector<Tensor<S>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Tensor<S> out = make_op_result<S>(os, inputs);

  auto cols = std::make_shared<std::vector<RowMat<S>>>(xs.n);
  ConstMapMat<S> wm(w.data().data(), c_out, kk);
  for (int n = 0; n < xs.n; ++n) {
    RowMat<S>& c = (*cols)[n];
    c.resize(kk, p);
    im2col(x.data().data() + n * Eigen::Index(xs.c) * xs.plane(), g, c.data());
    MapMat<S> o(out.data().data() + n * Eigen::Index(c_out) * p, c_out, p);
    o.noalias() = wm * c;
    if (b.defined()) {
      o.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.data().data(), c_out);
    }
  }
  add_instrumented_flops(std::uint64_t(2) * kk * c_out * p * xs.n);

  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  auto on = out.node().get();
  record_op(out, inputs, [=]() {
    ConstMapMat<S> wmat(wn->data.data(), c_out, kk);
    RowMat<S> dcols;
    for (int n = 0; n < xs.n; ++n) {
      ConstMapMat<S> go(on->grad.data() + n * Eigen::Index(c_out) * p, c_out, p);
      const RowMat<S>& c = (*cols)[n];
      if (wn->requires_grad) {
        MapMat<S>(wn->grad.data(), c_out, kk).noalias() += go * c.transpose();
      }
      if (bn && bn->requires_grad) {
        bn->grad.matrix() += go.rowwise().sum();
      }
      if (xn->requires_grad) {
        dcols.noalias() = wmat.transpose() * go;
        col2im_accumulate(dcols.data(), g, xn->grad.data() + n * Eigen::Index(xs.c) * xs.plane());
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int k, int stride) {
  const Shape& xs = x.shape();
  if (k < 1 || stride < 1) throw std::invalid_argument("maxpool2d: bad window");
  if (k > xs.h || k > xs.w) throw std::invalid_argument("maxpool2d: window larger than input " + xs.str());
  const int ho = (xs.h - k) / stride + 1;
  const int wo = (xs.w - k) / stride + 1;
  const Shape os{xs.n, xs.c, ho, wo};
  Tensor<S> out = make_op_result<S>(os, {x});
  auto argmax = std::make_shared<std::vector<Eigen::Index>>(os.numel());
  const S* in = x.data().data();
  S* o = out.data().data();
  Eigen::Index idx = 0;
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const Eigen::Index base = nc * xs.plane();
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++idx) {
        Eigen::Index best = base + Eigen::Index(oy * stride) * xs.w + ox * stride;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const Eigen::Index j = base + Eigen::Index(oy * stride + ky) * xs.w + ox * stride + kx;
            if (in[j] > in[best]) best = j;
          }
        }
        (*argmax)[idx] = best;
        o[idx] = in[best];
      }
    }
  }
  add_instrumented_flops(std::uint64_t(os.numel()));
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    for (Eigen::Index i = 0; i < Eigen::Index(argmax->size()); ++i) xn->grad((*argmax)[i]) += on->grad(i);
  });
  return out;
}

template <typename S>
Tensor<S> avgpool2d(const Tensor<S>& x, int k) {
  const Shape& xs = x.shape();
  if (k < 1 || xs.h % k != 0 || xs.w % k != 0) {
    throw std::invalid_argument("avgpool2d: input " + xs.str() + " not divisible by window");
  }
  const Shape os{xs.n, xs.c, xs.h / k, xs.w / k};
  Tensor<S> out = make_op_result<S>(os, {x});
  const S inv = S(1) / S(k * k);
  const S* in = x.data().data();
  S* o = out.data().data();
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    for (int oy = 0; oy < os.h; ++oy) {
      for (int ox = 0; ox < os.w; ++ox) {
        S acc = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) acc += in[nc * xs.plane() + Eigen::Index(oy * k + ky) * xs.w + ox * k + kx];
        o[nc * os.plane() + Eigen::Index(oy) * os.w + ox] = acc * inv;
      }
    }
  }
  add_instrumented_flops(std::uint64_t(os.numel()));
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    for (int nc = 0; nc < xs.n * xs.c; ++nc)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx)
          xn->grad(nc * xs.plane() + Eigen::Index(y) * xs.w + xx) +=
              on->grad(nc * os.plane() + Eigen::Index(y / k) * os.w + xx / k) * inv;
  });
  return out;
}

template <typename S>
Tensor<S> pointwise(const Tensor<S>& x, Pointwise kind) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  if (kind == Pointwise::relu) {
    out.data() = x.data().max(S(0));
  } else {
    out.data() = x.data().unaryExpr([](S v) { return stable_sigmoid(v); });
  }
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    if (kind == Pointwise::relu) {
      xn->grad += (xn->data > S(0)).template cast<S>() * on->grad;
    } else {
      xn->grad += on->data * (S(1) - on->data) * on->grad;
    }
  });
  return out;
}

template <typename S>
Tensor<S> upsample_bilinear2x(const Tensor<S>& x) {
  const Shape& xs = x.shape();
  if (xs.h < 1 || xs.w < 1) throw std::invalid_argument("upsample_bilinear2x: empty input");
  const Shape os{xs.n, xs.c, 2 * xs.h, 2 * xs.w};
  Tensor<S> out = make_op_result<S>(os, {x});
  auto ty = std::make_shared<Taps>(upsample_taps(xs.h));
  auto tx = std::make_shared<Taps>(upsample_taps(xs.w));
  const S* in = x.data().data();
  S* o = out.data().data();
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const S* p = in + nc * xs.plane();
    S* q = o + nc * os.plane();
    for (int oy = 0; oy < os.h; ++oy) {
      const S* r0 = p + Eigen::Index(ty->i0[oy]) * xs.w;
      const S* r1 = p + Eigen::Index(ty->i1[oy]) * xs.w;
      const S wy0 = S(ty->w0[oy]), wy1 = S(ty->w1[oy]);
      for (int ox = 0; ox < os.w; ++ox) {
        const S wx0 = S(tx->w0[ox]), wx1 = S(tx->w1[ox]);
        const int a = tx->i0[ox], b = tx->i1[ox];
        q[Eigen::Index(oy) * os.w + ox] = wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]);
      }
    }
  }
  add_instrumented_flops(std::uint64_t(os.numel()));
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      S* p = xn->grad.data() + nc * xs.plane();
      const S* q = on->grad.data() + nc * os.plane();
      for (int oy = 0; oy < os.h; ++oy) {
        S* r0 = p + Eigen::Index(ty->i0[oy]) * xs.w;
        S* r1 = p + Eigen::Index(ty->i1[oy]) * xs.w;
        const S wy0 = S(ty->w0[oy]), wy1 = S(ty->w1[oy]);
        for (int ox = 0; ox < os.w; ++ox) {
          const S g = q[Eigen::Index(oy) * os.w + ox];
          const S wx0 = S(tx->w0[ox]), wx1 = S(tx->w1[ox]);
          const int a = tx->i0[ox], b = tx->i1[ox];
          r0[a] += wy0 * wx0 * g;
          r0[b] += wy0 * wx1 * g;
          r1[a] += wy1 * wx0 * g;
          r1[b] += wy1 * wx1 * g;
        }
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape os = xs.front().shape();
  os.c = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w) {
      throw std::invalid_argument("concat_channels: spatial mismatch " + s.str() + " vs " + xs.front().shape().str());
    }
    os.c += s.c;
  }
  Tensor<S> out = make_op_result<S>(os, xs);
  const Eigen::Index plane = os.plane();
  for (int n = 0; n < os.n; ++n) {
    Eigen::Index offset = Eigen::Index(n) * os.c * plane;
    for (const auto& t : xs) {
      const Eigen::Index len = Eigen::Index(t.shape().c) * plane;
      out.data().segment(offset, len) = t.data().segment(Eigen::Index(n) * len, len);
      offset += len;
    }
  }
  if (!out.requires_grad()) return out;
  std::vector<std::shared_ptr<Node<S>>> nodes;
  for (const auto& t : xs) nodes.push_back(t.node());
  auto on = out.node().get();
  record_op(out, xs, [=]() {
    for (int n = 0; n < os.n; ++n) {
      Eigen::Index offset = Eigen::Index(n) * os.c * plane;
      for (const auto& in : nodes) {
        const Eigen::Index len = Eigen::Index(in->shape.c) * plane;
        if (in->requires_grad) in->grad.segment(Eigen::Index(n) * len, len) += on->grad.segment(offset, len);
        offset += len;
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  const Shape& xs = x.shape();
  if (xs.h < 1 || xs.w < 1) throw std::invalid_argument("global_avg_pool: empty input");
  const Shape os{xs.n, xs.c, 1, 1};
  Tensor<S> out = make_op_result<S>(os, {x});
  const Eigen::Index plane = xs.plane();
  for (Eigen::Index i = 0; i < os.numel(); ++i) out.data()(i) = x.data().segment(i * plane, plane).mean();
  add_instrumented_flops(std::uint64_t(xs.numel()));
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    for (Eigen::Index i = 0; i < os.numel(); ++i)
      xn->grad.segment(i * plane, plane) += on->grad(i) / S(plane);
  });
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out = make_op_result<S>(a.shape(), {a, b});
  out.data() = a.data() + b.data();
  if (!out.requires_grad()) return out;
  auto an = a.node(), bn = b.node();
  auto on = out.node().get();
  record_op(out, {a, b}, [=]() {
    if (an->requires_grad) an->grad += on->grad;
    if (bn->requires_grad) bn->grad += on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out = make_op_result<S>(a.shape(), {a, b});
  out.data() = a.data() - b.data();
  if (!out.requires_grad()) return out;
  auto an = a.node(), bn = b.node();
  auto on = out.node().get();
  record_op(out, {a, b}, [=]() {
    if (an->requires_grad) an->grad += on->grad;
    if (bn->requires_grad) bn->grad -= on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  out.data() = x.data().abs();
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (!xn->requires_grad) return;
    xn->grad += xn->data.unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); }) * on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  out.data() = x.data() * factor;
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (xn->requires_grad) xn->grad += on->grad * factor;
  });
  return out;
}

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& x, S floor) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  out.data() = x.data().max(floor);
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (xn->requires_grad) xn->grad += (xn->data > floor).template cast<S>() * on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  out.data() = x.data().square();
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (xn->requires_grad) xn->grad += S(2) * xn->data * on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(Shape{1, 1, 1, 1}, {x});
  out.data()(0) = x.data().sum();
  if (!out.requires_grad()) return out;
  auto xn = x.node();
  auto on = out.node().get();
  record_op(out, {x}, [=]() {
    if (xn->requires_grad) xn->grad += on->grad(0);
  });
  return out;
}

template <typename S>
Tensor<S> l2_mean(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "l2_mean");
  if (a.numel() == 0) throw std::invalid_argument("l2_mean: empty input");
  Tensor<S> out = make_op_result<S>(Shape{1, 1, 1, 1}, {a, b});
  const S count = S(a.numel());
  out.data()(0) = (a.data() - b.data()).square().sum() / count;
  if (!out.requires_grad()) return out;
  auto an = a.node(), bn = b.node();
  auto on = out.node().get();
  record_op(out, {a, b}, [=]() {
    const S g = on->grad(0) * S(2) / count;
    if (an->requires_grad) an->grad += g * (an->data - bn->data);
    if (bn->requires_grad) bn->grad -= g * (an->data - bn->data);
  });
  return out;
}

template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& target) {
  require_same_shape(logits.shape(), target.shape(), "bce_with_logits");
  if (logits.numel() == 0) throw std::invalid_argument("bce_with_logits: empty input");
  if ((target.data() < S(0)).any() || (target.data() > S(1)).any()) {
    throw std::invalid_argument("bce_with_logits: targets must lie in [0, 1]");
  }
  Tensor<S> out = make_op_result<S>(Shape{1, 1, 1, 1}, {logits});
  const auto& z = logits.data();
  const auto& t = target.data();
  const S count = S(logits.numel());
  out.data()(0) = (z.max(S(0)) - z * t + (S(1) + (-z.abs()).exp()).log()).sum() / count;
  if (!out.requires_grad()) return out;
  auto zn = logits.node();
  auto tn = target.node();
  auto on = out.node().get();
  record_op(out, {logits}, [=]() {
    const S g = on->grad(0) / count;
    zn->grad += g * (zn->data.unaryExpr([](S v) { return stable_sigmoid(v); }) - tn->data);
  });
  return out;
}

#define REUSEGATE_INSTANTIATE_OPS(S)                                                                  \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int, int);   \
  template Tensor<S> maxpool2d(const Tensor<S>&, int, int);                                         \
  template Tensor<S> avgpool2d(const Tensor<S>&, int);                                              \
  template Tensor<S> pointwise(const Tensor<S>&, Pointwise);                                        \
  template Tensor<S> upsample_bilinear2x(const Tensor<S>&);                                         \
  template Tensor<S> concat_channels(const std::vector<Tensor<S>>&);                                \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                             \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> abs(const Tensor<S>&);                                                         \
  template Tensor<S> scale(const Tensor<S>&, S);                                                    \
  template Tensor<S> clamp_min(const Tensor<S>&, S);                                                \
  template Tensor<S> square(const Tensor<S>&);                                                      \
  template Tensor<S> sum(const Tensor<S>&);                                                         \
  template Tensor<S> l2_mean(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> bce_with_logits(const Tensor<S>&, const Tensor<S>&);

REUSEGATE_INSTANTIATE_OPS(float)
REUSEGATE_INSTANTIATE_OPS(double)

}  // namespace reusegate
