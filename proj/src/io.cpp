#include "reusegate/io.hpp"

#include "reusegate/format.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace reusegate {

namespace fs = std::filesystem;

namespace {

// Netpbm header: magic, width, height, maxval, separated by whitespace with
// '#' comments, then exactly one whitespace byte before the raster.
struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& is, const fs::path& path) {
  PnmHeader h;
  auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
      if (c == '#') {
        while ((c = is.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(char(c));
    }
    if (tok.empty()) throw input_error(path.string() + ": truncated header");
    return tok;
  };
  h.magic = next_token();
  try {
    h.width = std::stoi(next_token());
    h.height = std::stoi(next_token());
    h.maxval = std::stoi(next_token());
  } catch (const std::logic_error&) {
    throw input_error(path.string() + ": malformed header");
  }
  if (h.width <= 0 || h.height <= 0) throw input_error(path.string() + ": non-positive dimensions");
  if (h.maxval != 255) throw input_error(path.string() + ": only 8-bit (maxval 255) images are supported");
  return h;
}

std::vector<std::uint8_t> read_raster(std::istream& is, std::size_t bytes, const fs::path& path) {
  std::vector<std::uint8_t> buf(bytes);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(bytes));
  if (std::size_t(is.gcount()) != bytes) throw input_error(path.string() + ": truncated raster");
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("cannot read " + path.string());
  return is;
}

}  // namespace

void write_ppm(const fs::path& path, const RgbImage& img) {
  auto os = open_out(path);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
}

RgbImage read_ppm(const fs::path& path) {
  auto is = open_in(path);
  const PnmHeader h = read_pnm_header(is, path);
  if (h.magic != "P6") throw input_error(path.string() + ": expected binary PPM (P6)");
  RgbImage img;
  img.width = h.width;
  img.height = h.height;
  img.rgb = read_raster(is, std::size_t(h.width) * h.height * 3, path);
  return img;
}

void write_label_pgm(const fs::path& path, const LabelMap& labels) {
  auto os = open_out(path);
  os << "P5\n" << labels.width << ' ' << labels.height << "\n255\n";
  std::vector<char> buf(labels.labels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (labels.labels[i] < 0 || labels.labels[i] > 255) throw std::invalid_argument("label out of 8-bit range");
    buf[i] = char(std::uint8_t(labels.labels[i]));
  }
  os.write(buf.data(), std::streamsize(buf.size()));
}

LabelMap read_label_pgm(const fs::path& path) {
  auto is = open_in(path);
  const PnmHeader h = read_pnm_header(is, path);
  if (h.magic != "P5") throw input_error(path.string() + ": expected binary PGM (P5)");
  const auto raw = read_raster(is, std::size_t(h.width) * h.height, path);
  LabelMap m(h.width, h.height);
  std::copy(raw.begin(), raw.end(), m.labels.begin());
  return m;
}

std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05zu.ppm", index);
  return buf;
}

std::string mask_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "mask_%05zu.pgm", index);
  return buf;
}

VideoOnDisk load_video(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw input_error(dir.string() + ": not a directory");
  VideoOnDisk v;
  v.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  for (std::size_t i = 0; fs::exists(dir / frame_file_name(i)); ++i) v.frames.push_back(read_ppm(dir / frame_file_name(i)));
  if (v.frames.empty()) throw input_error(dir.string() + ": no frame_00000.ppm");
  if (!fs::exists(dir / mask_file_name(0))) throw input_error(dir.string() + ": missing mask_00000.pgm");
  for (std::size_t i = 0; i < v.frames.size() && fs::exists(dir / mask_file_name(i)); ++i) {
    v.labels.push_back(read_label_pgm(dir / mask_file_name(i)));
  }
  const int W = v.frames[0].width, H = v.frames[0].height;
  for (const auto& f : v.frames) {
    if (f.width != W || f.height != H) throw input_error(dir.string() + ": frames differ in size");
  }
  for (const auto& l : v.labels) {
    if (l.width != W || l.height != H) throw input_error(dir.string() + ": mask size differs from frame size");
  }
  std::set<int> ids(v.labels[0].labels.begin(), v.labels[0].labels.end());
  ids.erase(0);
  int expect = 1;
  for (int id : ids) {
    if (id != expect++) throw input_error(dir.string() + ": object ids in mask0 are not contiguous from 1");
  }
  return v;
}

void save_video(const fs::path& dir, const VideoOnDisk& video) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < video.frames.size(); ++i) write_ppm(dir / frame_file_name(i), video.frames[i]);
  for (std::size_t i = 0; i < video.labels.size(); ++i) write_label_pgm(dir / mask_file_name(i), video.labels[i]);
}

template <typename S>
VideoInput<S> to_video_input(const VideoOnDisk& video) {
  if (video.labels.size() != video.frames.size()) {
    throw input_error(video.name + ": expected a mask for each of the " + std::to_string(video.frames.size()) +
                      " frames, found " + std::to_string(video.labels.size()));
  }
  const int W = video.frames[0].width, H = video.frames[0].height;
  if (W % 32 != 0 || H % 32 != 0) {
    throw input_error(video.name + ": frame size " + std::to_string(W) + "x" + std::to_string(H) +
                      " is not a multiple of 32");
  }
  VideoInput<S> in;
  in.name = video.name;
  for (const auto& f : video.frames) in.frames.push_back(image_to_tensor<S>(f));
  in.labels = video.labels;
  return in;
}

template VideoInput<float> to_video_input(const VideoOnDisk&);
template VideoInput<double> to_video_input(const VideoOnDisk&);

LabelMap label_map_from_mask(const BinaryMask& m, int id) {
  LabelMap out(m.width, m.height);
  for (std::size_t i = 0; i < m.bits.size(); ++i) out.labels[i] = m.bits[i] ? id : 0;
  return out;
}

// ---------------------------------------------------------------------------
// SVG

namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 60;

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

void frame(std::ostringstream& os, const std::string& title, const std::string& x_label, const std::string& y_label) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
     << kHeight - kBottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << num(kLeft + (kWidth - kLeft - kRight) / 2) << "\" y=\"" << kHeight - 15
     << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"18\" y=\"" << num(kTop + (kHeight - kTop - kBottom) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << num(kTop + (kHeight - kTop - kBottom) / 2) << ")\">" << escape(y_label) << "</text>\n";
}

void y_ticks(std::ostringstream& os, double lo, double hi) {
  const double plot_h = kHeight - kTop - kBottom;
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    const double y = kHeight - kBottom - plot_h * i / 4.0;
    os << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << num(y) << "\" x2=\"" << kLeft << "\" y2=\"" << num(y)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick(v) << "</text>\n";
  }
}

}  // namespace

std::string svg_bar_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<SvgBar>& bars) {
  std::ostringstream os;
  frame(os, title, x_label, y_label);
  double hi = 0;
  for (const auto& b : bars) hi = std::max(hi, b.value);
  if (hi <= 0) hi = 1;
  y_ticks(os, 0, hi);
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  const double slot = bars.empty() ? plot_w : plot_w / double(bars.size());
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double h = plot_h * bars[i].value / hi;
    const double x = kLeft + slot * double(i) + slot * 0.1;
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(kHeight - kBottom - h) << "\" width=\"" << num(slot * 0.8)
       << "\" height=\"" << num(h) << "\" fill=\"steelblue\"><title>" << escape(bars[i].label) << ": "
       << tick(bars[i].value) << "</title></rect>\n";
    os << "<text x=\"" << num(x + slot * 0.4) << "\" y=\"" << num(kHeight - kBottom + 14)
       << "\" text-anchor=\"middle\" font-size=\"9\">" << escape(bars[i].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_scatter(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<SvgPoint>& points) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  frame(os, title, x_label, y_label);
  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  if (!points.empty()) {
    x_lo = x_hi = points[0].x;
    y_lo = y_hi = points[0].y;
    for (const auto& p : points) {
      x_lo = std::min(x_lo, p.x);
      x_hi = std::max(x_hi, p.x);
      y_lo = std::min(y_lo, p.y);
      y_hi = std::max(y_hi, p.y);
    }
    const double px = std::max(0.05, (x_hi - x_lo) * 0.1), py = std::max(0.05, (y_hi - y_lo) * 0.1);
    x_lo -= px;
    x_hi += px;
    y_lo -= py;
    y_hi += py;
  }
  y_ticks(os, y_lo, y_hi);
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  for (int i = 0; i <= 4; ++i) {
    const double v = x_lo + (x_hi - x_lo) * i / 4.0;
    const double x = kLeft + plot_w * i / 4.0;
    os << "<text x=\"" << num(x) << "\" y=\"" << num(kHeight - kBottom + 16) << "\" text-anchor=\"middle\">" << tick(v)
       << "</text>\n";
  }
  std::map<std::string, std::size_t> series;
  for (const auto& p : points) series.emplace(p.series, series.size());
  for (const auto& p : points) {
    const double x = kLeft + plot_w * (p.x - x_lo) / (x_hi - x_lo);
    const double y = kHeight - kBottom - plot_h * (p.y - y_lo) / (y_hi - y_lo);
    os << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"5\" fill=\"" << palette[series[p.series] % 6]
       << "\"><title>" << escape(p.series + " " + p.label) << "</title></circle>\n";
  }
  double ly = kTop + 4;
  for (const auto& [name, idx] : series) {
    os << "<circle cx=\"" << num(kWidth - kRight - 110) << "\" cy=\"" << num(ly) << "\" r=\"5\" fill=\"" << palette[idx % 6]
       << "\"/><text x=\"" << num(kWidth - kRight - 100) << "\" y=\"" << num(ly + 4) << "\">" << escape(name)
       << "</text>\n";
    ly += 16;
  }
  os << "</svg>\n";
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
}

std::string read_text_file(const fs::path& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace reusegate
