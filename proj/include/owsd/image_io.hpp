#ifndef OWSD_IMAGE_IO_HPP
#define OWSD_IMAGE_IO_HPP

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "owsd/errors.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

namespace detail {

inline void png_write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
  png_write_be32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc =
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  png_write_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// Minimal 8-bit RGB PNG writer for sample grids; pixels in [0,1], [H,W,C]
// with C in {1,3} (grayscale replicated).
inline void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.shape[2] != 1 && image.shape[2] != 3)) {
    throw invalid_argument_error("write_png needs [H,W,1] or [H,W,3], got " +
                                 shape_str(image.shape));
  }
  const std::size_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
  std::vector<std::uint8_t> raw((W * 3 + 1) * H);
  std::size_t o = 0;
  for (std::size_t y = 0; y < H; ++y) {
    raw[o++] = 0;  // filter: none
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = image.data[(y * W + x) * C + (C == 3 ? c : 0)];
        raw[o++] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
      }
    }
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw io_error("zlib compression failed for " + path.string());
  }
  comp.resize(comp_len);

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  detail::png_write_be32(ihdr, static_cast<std::uint32_t>(W));
  detail::png_write_be32(ihdr, static_cast<std::uint32_t>(H));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw io_error("write failed for " + path.string());
}

// Tiles [H,W,C] images into rows x cols with a 2px gap, for visual checks.
inline Tensor tile_images(const std::vector<Tensor>& images, std::size_t cols) {
  if (images.empty()) throw invalid_argument_error("tile_images: no images");
  const std::size_t H = images[0].shape[0], W = images[0].shape[1], C = images[0].shape[2];
  for (const auto& im : images) {
    if (im.shape != images[0].shape) throw shape_error("tile_images: mixed shapes");
  }
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t gap = 2;
  Tensor grid({rows * H + (rows - 1) * gap, cols * W + (cols - 1) * gap, C}, 1.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t r = i / cols, c = i % cols;
    const std::size_t y0 = r * (H + gap), x0 = c * (W + gap);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t ch = 0; ch < C; ++ch) {
          grid.data[((y0 + y) * grid.shape[1] + x0 + x) * C + ch] =
              images[i].data[(y * W + x) * C + ch];
        }
      }
    }
  }
  return grid;
}

// Nearest-neighbor integer upscale, for displaying small reconstructions.
inline Tensor upscale_nn(const Tensor& image, std::size_t factor) {
  const std::size_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
  Tensor out({H * factor, W * factor, C});
  for (std::size_t y = 0; y < H * factor; ++y) {
    for (std::size_t x = 0; x < W * factor; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        out.data[(y * W * factor + x) * C + c] = image.data[((y / factor) * W + x / factor) * C + c];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG emitters for the PCA scatter (Fig. 2 analog) and accuracy curves.
// ---------------------------------------------------------------------------

struct SvgSeries {
  std::string name;
  std::vector<double> xs, ys;
};

namespace detail {

inline const char* kSvgPalette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

struct SvgFrame {
  double xmin, xmax, ymin, ymax;
  double px(double x) const { return 60.0 + (x - xmin) / (xmax - xmin + 1e-300) * 480.0; }
  double py(double y) const { return 420.0 - (y - ymin) / (ymax - ymin + 1e-300) * 370.0; }
};

inline SvgFrame svg_frame(const std::vector<double>& xs, const std::vector<double>& ys) {
  SvgFrame f{*std::min_element(xs.begin(), xs.end()), *std::max_element(xs.begin(), xs.end()),
             *std::min_element(ys.begin(), ys.end()), *std::max_element(ys.begin(), ys.end())};
  const double xpad = 0.05 * (f.xmax - f.xmin + 1e-12), ypad = 0.05 * (f.ymax - f.ymin + 1e-12);
  f.xmin -= xpad;
  f.xmax += xpad;
  f.ymin -= ypad;
  f.ymax += ypad;
  return f;
}

inline void svg_open(std::ofstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"460\" "
        "viewBox=\"0 0 600 460\">\n"
     << "<rect width=\"600\" height=\"460\" fill=\"white\"/>\n"
     << "<text x=\"300\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
        "font-family=\"sans-serif\">"
     << title << "</text>\n"
     << "<line x1=\"60\" y1=\"420\" x2=\"540\" y2=\"420\" stroke=\"black\"/>\n"
     << "<line x1=\"60\" y1=\"50\" x2=\"60\" y2=\"420\" stroke=\"black\"/>\n";
}

}  // namespace detail

inline void svg_scatter(const std::filesystem::path& path,
                        const std::vector<std::array<double, 2>>& points,
                        const std::vector<std::string>& groups, const std::string& title) {
  if (points.size() != groups.size()) {
    throw invalid_argument_error("svg_scatter: point/group count mismatch");
  }
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  const auto f = detail::svg_frame(xs, ys);
  std::vector<std::string> group_names;
  for (const auto& g : groups) {
    if (std::find(group_names.begin(), group_names.end(), g) == group_names.end()) {
      group_names.push_back(g);
    }
  }
  std::ofstream os(path);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  detail::svg_open(os, title);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::size_t gi = static_cast<std::size_t>(
        std::find(group_names.begin(), group_names.end(), groups[i]) - group_names.begin());
    os << "<circle cx=\"" << f.px(points[i][0]) << "\" cy=\"" << f.py(points[i][1])
       << "\" r=\"3.5\" fill=\"" << detail::kSvgPalette[gi % 8] << "\" fill-opacity=\"0.7\"/>\n";
  }
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    os << "<circle cx=\"80\" cy=\"" << 60 + 18 * g << "\" r=\"4\" fill=\""
       << detail::kSvgPalette[g % 8] << "\"/>\n"
       << "<text x=\"90\" y=\"" << 64 + 18 * g
       << "\" font-size=\"12\" font-family=\"sans-serif\">" << group_names[g] << "</text>\n";
  }
  os << "</svg>\n";
}

inline void svg_curve(const std::filesystem::path& path, const std::vector<SvgSeries>& series,
                      const std::string& title, const std::string& xlabel,
                      const std::string& ylabel) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    xs.insert(xs.end(), s.xs.begin(), s.xs.end());
    ys.insert(ys.end(), s.ys.begin(), s.ys.end());
  }
  if (xs.empty()) throw invalid_argument_error("svg_curve: no points");
  const auto f = detail::svg_frame(xs, ys);
  std::ofstream os(path);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  detail::svg_open(os, title);
  os << "<text x=\"300\" y=\"450\" text-anchor=\"middle\" font-size=\"12\" "
        "font-family=\"sans-serif\">"
     << xlabel << "</text>\n"
     << "<text x=\"16\" y=\"235\" text-anchor=\"middle\" font-size=\"12\" "
        "font-family=\"sans-serif\" transform=\"rotate(-90 16 235)\">"
     << ylabel << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = detail::kSvgPalette[s % 8];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].xs.size(); ++i) {
      os << f.px(series[s].xs[i]) << "," << f.py(series[s].ys[i]) << " ";
    }
    os << "\"/>\n";
    for (std::size_t i = 0; i < series[s].xs.size(); ++i) {
      os << "<circle cx=\"" << f.px(series[s].xs[i]) << "\" cy=\"" << f.py(series[s].ys[i])
         << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    os << "<text x=\"470\" y=\"" << 60 + 16 * s << "\" font-size=\"12\" fill=\"" << color
       << "\" font-family=\"sans-serif\">" << series[s].name << "</text>\n";
  }
  // x tick labels at the data points of the first series
  for (double x : series[0].xs) {
    os << "<text x=\"" << f.px(x)
       << "\" y=\"436\" text-anchor=\"middle\" font-size=\"10\" font-family=\"sans-serif\">" << x
       << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace owsd

#endif  // OWSD_IMAGE_IO_HPP
