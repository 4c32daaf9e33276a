#include "reusegate/metrics.hpp"

#include "reusegate/format.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace reusegate {

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height) {
    throw std::invalid_argument("mask dimension mismatch: " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
  }
}

void require_sequences(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt, std::size_t first_frame) {
  if (pred.size() != gt.size()) throw std::invalid_argument("prediction and ground-truth lengths differ");
  if (gt.size() <= first_frame) throw std::invalid_argument("no frames to evaluate");
}

// Fraction of `from` points within `tol` of some point in `to`.
double matched_fraction(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                        double tol) {
  const double tol2 = tol * tol;
  std::size_t hit = 0;
  for (auto [x, y] : from) {
    for (auto [u, v] : to) {
      const double dx = x - u, dy = y - v;
      if (dx * dx + dy * dy <= tol2) {
        ++hit;
        break;
      }
    }
  }
  return double(hit) / double(from.size());
}

}  // namespace

BinaryMask::BinaryMask(int w, int h, bool fill) : width(w), height(h), bits(std::size_t(w) * h, fill ? 1 : 0) {
  if (w < 0 || h < 0) throw std::invalid_argument("negative mask dimensions");
}

std::size_t BinaryMask::count() const {
  return std::size_t(std::count(bits.begin(), bits.end(), std::uint8_t(1)));
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a, b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]);
    uni += (a.bits[i] || b.bits[i]);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double jaccard_mean(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt, std::size_t first_frame) {
  require_sequences(pred, gt, first_frame);
  double acc = 0;
  for (std::size_t t = first_frame; t < gt.size(); ++t) acc += iou(pred[t], gt[t]);
  return acc / double(gt.size() - first_frame);
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < m.width && y < m.height && m(x, y); };
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m(x, y)) continue;
      if (!inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1)) out.emplace_back(x, y);
    }
  }
  return out;
}

double boundary_f(const BinaryMask& pred, const BinaryMask& gt, double tol) {
  require_same_dims(pred, gt);
  if (tol < 0) throw std::invalid_argument("boundary tolerance must be non-negative");
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  const double precision = matched_fraction(bp, bg, tol);
  const double recall = matched_fraction(bg, bp, tol);
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

double boundary_f_mean(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt, double tol,
                       std::size_t first_frame) {
  require_sequences(pred, gt, first_frame);
  double acc = 0;
  for (std::size_t t = first_frame; t < gt.size(); ++t) acc += boundary_f(pred[t], gt[t], tol);
  return acc / double(gt.size() - first_frame);
}

double default_boundary_tolerance(int width, int height) {
  return std::ceil(0.008 * std::hypot(double(width), double(height)));
}

double jf_mean(double j, double f) { return (j + f) / 2; }

double IoUHistogram::bin_hi(std::size_t i) const {
  return i + 1 == counts.size() ? 1.0 : std::min(1.0, double(i + 1) * bin_width);
}

IoUHistogram make_histogram(std::span<const double> ious, double bin_width) {
  if (!(bin_width > 0 && bin_width <= 1)) throw std::invalid_argument("bin width must lie in (0, 1]");
  IoUHistogram h;
  h.bin_width = bin_width;
  const auto bins = std::size_t(std::ceil(1.0 / bin_width - 1e-9));
  h.counts.assign(bins, 0);
  for (double v : ious) {
    if (v < 0 || v > 1) throw std::invalid_argument("IoU outside [0, 1]");
    auto idx = std::size_t(std::floor(v / bin_width + 1e-9));
    h.counts[std::min(idx, bins - 1)]++;
  }
  h.total = ious.size();
  return h;
}

std::vector<double> consecutive_ious(std::span<const BinaryMask> gt) {
  if (gt.size() < 2) throw std::invalid_argument("need at least two masks for consecutive IoU");
  std::vector<double> out;
  out.reserve(gt.size() - 1);
  for (std::size_t t = 1; t < gt.size(); ++t) out.push_back(iou(gt[t - 1], gt[t]));
  return out;
}

IoUHistogram consecutive_iou_histogram(std::span<const BinaryMask> gt, double bin_width) {
  const auto ious = consecutive_ious(gt);
  return make_histogram(ious, bin_width);
}

double fraction_above(std::span<const double> values, double threshold) {
  if (values.empty()) return 0.0;
  const auto n = std::count_if(values.begin(), values.end(), [&](double v) { return v > threshold; });
  return double(n) / double(values.size());
}

void write_histogram_csv(std::ostream& os, const IoUHistogram& hist) {
  os << "bin_lo,bin_hi,count,fraction\n";
  for (std::size_t i = 0; i < hist.bins(); ++i) {
    os << format_double(hist.bin_lo(i)) << ',' << format_double(hist.bin_hi(i)) << ',' << hist.counts[i] << ','
       << format_double(hist.fraction(i)) << '\n';
  }
}

IoUHistogram read_histogram_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "bin_lo,bin_hi,count,fraction") {
    throw std::invalid_argument("histogram CSV: missing header");
  }
  IoUHistogram h;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 4) throw std::invalid_argument("histogram CSV: expected 4 columns");
    if (first) {
      h.bin_width = parse_double(cols[1]) - parse_double(cols[0]);
      first = false;
    }
    const auto c = std::stoull(cols[2]);
    h.counts.push_back(c);
    h.total += c;
  }
  return h;
}

}  // namespace reusegate
