#include "support.hpp"

#include "reusegate/format.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace rgtest;

namespace {

TEST(Iou, SquaresAndEmptyMasks) {
  EXPECT_DOUBLE_EQ(iou(BinaryMask(8, 8), BinaryMask(8, 8)), 1.0);
  const BinaryMask a = square_mask(32, 32, 4, 4, 10), b = square_mask(32, 32, 6, 4, 10);
  EXPECT_NEAR(iou(a, b), 80.0 / 120.0, 1e-15);
  EXPECT_DOUBLE_EQ(iou(a, BinaryMask(32, 32)), 0.0);
  EXPECT_THROW(iou(a, BinaryMask(16, 32)), std::invalid_argument);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 50; ++t) {
    BinaryMask a(9, 7), b(9, 7);
    for (auto& v : a.bits) v = coin(rng);
    for (auto& v : b.bits) v = coin(rng);
    const double x = iou(a, b);
    EXPECT_DOUBLE_EQ(x, iou(b, a));
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  }
}

TEST(Jaccard, SkipsTheAnnotatedFrame) {
  std::vector<BinaryMask> gt{square_mask(16, 16, 0, 0, 4), square_mask(16, 16, 0, 0, 4)};
  std::vector<BinaryMask> pred{BinaryMask(16, 16), square_mask(16, 16, 0, 0, 4)};
  EXPECT_DOUBLE_EQ(jaccard_mean(pred, gt), 1.0);
  EXPECT_DOUBLE_EQ(jaccard_mean(pred, gt, 0), 0.5);
}

TEST(Boundary, SquareContourAndPerfectMatch) {
  const BinaryMask a = square_mask(32, 32, 8, 8, 5);
  EXPECT_EQ(boundary_pixels(a).size(), 16u);  // 5x5 square minus its 3x3 interior
  EXPECT_DOUBLE_EQ(boundary_f(a, a, 1), 1.0);
  EXPECT_DOUBLE_EQ(boundary_f(BinaryMask(32, 32), BinaryMask(32, 32), 1), 1.0);
  EXPECT_DOUBLE_EQ(boundary_f(a, BinaryMask(32, 32), 1), 0.0);
}

TEST(Boundary, ToleranceAbsorbsOnePixelShift) {
  const BinaryMask a = square_mask(32, 32, 8, 8, 6), b = square_mask(32, 32, 9, 8, 6);
  EXPECT_DOUBLE_EQ(boundary_f(a, b, 1), 1.0);
  EXPECT_LT(boundary_f(a, b, 0), 1.0);
  EXPECT_DOUBLE_EQ(default_boundary_tolerance(64, 64), 1.0);
  EXPECT_DOUBLE_EQ(jf_mean(0.5, 0.7), 0.6);
}

TEST(Histogram, FractionsSumToOneAndEdgesBin) {
  const std::vector<double> v{0.0, 0.05, 0.1, 0.69, 0.7, 0.95, 1.0, 1.0};
  const IoUHistogram h = make_histogram(v, 0.1);
  ASSERT_EQ(h.bins(), 10u);
  EXPECT_EQ(h.total, v.size());
  double s = 0;
  for (std::size_t i = 0; i < h.bins(); ++i) s += h.fraction(i);
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_EQ(h.counts[0], 2u);
  EXPECT_EQ(h.counts[1], 1u);
  EXPECT_EQ(h.counts[6], 1u);
  EXPECT_EQ(h.counts[7], 1u);
  EXPECT_EQ(h.counts[9], 3u);  // 1.0 lands in the top bin
  EXPECT_DOUBLE_EQ(fraction_above(v, 0.7), 3.0 / 8.0);
}

TEST(Histogram, StaticSequenceFillsTopBin) {
  std::vector<BinaryMask> gt(5, square_mask(16, 16, 2, 2, 6));
  const IoUHistogram h = consecutive_iou_histogram(gt, 0.1);
  EXPECT_EQ(h.counts.back(), 4u);
  EXPECT_DOUBLE_EQ(h.fraction(h.bins() - 1), 1.0);
}

TEST(Histogram, CsvRoundTripIsByteIdentical) {
  const std::vector<double> v{0.12, 0.5, 0.5, 0.91, 1.0, 0.33};
  for (double bw : {0.1, 0.05, 0.25, 0.3}) {
    const IoUHistogram h = make_histogram(v, bw);
    std::stringstream a;
    write_histogram_csv(a, h);
    std::stringstream in(a.str());
    const IoUHistogram back = read_histogram_csv(in);
    std::stringstream b;
    write_histogram_csv(b, back);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(back.counts, h.counts);
  }
}

TEST(Histogram, RejectsBadBinWidth) {
  const std::vector<double> v{0.5};
  EXPECT_THROW(make_histogram(v, 0.0), std::invalid_argument);
  EXPECT_THROW(make_histogram(v, 1.5), std::invalid_argument);
}

TEST(Format, ShortestRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 0.6666666666666666, 1e-300, 12345.678}) {
    EXPECT_EQ(parse_double(format_double(v)), v);
  }
  EXPECT_THROW(parse_double("1.2x"), std::invalid_argument);
}

}  // namespace
