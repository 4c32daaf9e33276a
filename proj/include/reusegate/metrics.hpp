#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace reusegate {

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // row-major, 1 = foreground

  BinaryMask() = default;
  BinaryMask(int w, int h, bool fill = false);

  bool operator()(int x, int y) const { return bits[std::size_t(y) * width + x] != 0; }
  void set(int x, int y, bool on) { bits[std::size_t(y) * width + x] = on ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

/// |a ∩ b| / |a ∪ b|; 1 when both are empty.
double iou(const BinaryMask& a, const BinaryMask& b);

/// Mean per-frame IoU over frames [first_frame, size). Frame 0 carries the
/// given annotation, so it is skipped by default.
double jaccard_mean(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt, std::size_t first_frame = 1);

/// Foreground pixels with a 4-neighbour outside the mask (image border counts
/// as outside).
std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m);

/// Boundary F-measure with Euclidean matching tolerance `tol` pixels.
double boundary_f(const BinaryMask& pred, const BinaryMask& gt, double tol);

double boundary_f_mean(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt, double tol,
                       std::size_t first_frame = 1);

/// ceil(0.008 * image diagonal).
double default_boundary_tolerance(int width, int height);

double jf_mean(double j, double f);

struct IoUHistogram {
  double bin_width = 0.1;
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  std::size_t bins() const { return counts.size(); }
  double bin_lo(std::size_t i) const { return double(i) * bin_width; }
  double bin_hi(std::size_t i) const;
  double fraction(std::size_t i) const { return total ? double(counts[i]) / double(total) : 0.0; }
};

IoUHistogram make_histogram(std::span<const double> ious, double bin_width);

/// IoU of every consecutive pair (t-1, t).
std::vector<double> consecutive_ious(std::span<const BinaryMask> gt);

IoUHistogram consecutive_iou_histogram(std::span<const BinaryMask> gt, double bin_width = 0.1);

double fraction_above(std::span<const double> values, double threshold);

/// CSV with header bin_lo,bin_hi,count,fraction.
void write_histogram_csv(std::ostream& os, const IoUHistogram& hist);
IoUHistogram read_histogram_csv(std::istream& is);

}  // namespace reusegate
