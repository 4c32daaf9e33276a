#pragma once

#include "reusegate/image.hpp"
#include "reusegate/pipeline.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace reusegate {

/// Malformed or missing input files.
class input_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_ppm(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);

/// 8-bit P5 with pixel value = object id.
void write_label_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_pgm(const std::filesystem::path& path);

/// frame_%05d.ppm plus mask_%05d.pgm per frame.
struct VideoOnDisk {
  std::string name;
  std::vector<RgbImage> frames;
  std::vector<LabelMap> labels;  // may be shorter than frames; labels[0] is mask0
};

std::string frame_file_name(std::size_t index);
std::string mask_file_name(std::size_t index);

/// Reads consecutive frames from index 0 and every mask present from index 0.
/// Throws input_error for empty directories, missing mask0, dimension
/// mismatches, or non-contiguous object ids in mask0.
VideoOnDisk load_video(const std::filesystem::path& dir);
void save_video(const std::filesystem::path& dir, const VideoOnDisk& video);

/// Requires a mask for every frame.
template <typename S>
VideoInput<S> to_video_input(const VideoOnDisk& video);

LabelMap label_map_from_mask(const BinaryMask& m, int id = 1);

struct SvgBar {
  std::string label;
  double value = 0;
};

struct SvgPoint {
  double x = 0, y = 0;
  std::string series;
  std::string label;
};

std::string svg_bar_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<SvgBar>& bars);
std::string svg_scatter(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<SvgPoint>& points);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace reusegate
