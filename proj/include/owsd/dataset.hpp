#ifndef OWSD_DATASET_HPP
#define OWSD_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owsd/errors.hpp"
#include "owsd/rng.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

using json = nlohmann::json;

inline const std::array<std::string, 5> kSplitNames = {"cloud_train", "encoder_train",
                                                       "iin_train", "eval", "attack"};
inline const std::array<double, 5> kSplitFractions = {0.30, 0.20, 0.20, 0.15, 0.15};

struct LabeledDataset {
  std::vector<Tensor> images;  // each [H,W,C] in [0,1]
  std::vector<std::size_t> labels;
  std::vector<std::string> label_names;
  std::map<std::string, std::vector<std::size_t>> splits;
  std::uint64_t seed = 0;
  std::size_t height = 0, width = 0, channels = 0;

  const std::vector<std::size_t>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw dataset_error("unknown split '" + name + "'");
    return it->second;
  }
  std::size_t size() const { return images.size(); }
  std::size_t n_classes() const { return label_names.size(); }
};

struct SyntheticConfig {
  std::size_t n_classes = 10;
  std::size_t per_class = 200;
  std::size_t image_size = 32;
  std::uint64_t seed = 7;
};

namespace detail {

struct ShapeDef {
  const char* name;
  int id;
};

inline constexpr int kNumShapes = 6;
inline constexpr int kNumColors = 3;
inline const std::array<const char*, kNumShapes> kShapeNames = {"circle", "ring",     "square",
                                                                "diamond", "triangle", "cross"};
inline const std::array<const char*, kNumColors> kColorNames = {"red", "green", "blue"};
inline const double kColorBase[kNumColors][3] = {
    {0.85, 0.25, 0.25}, {0.25, 0.85, 0.30}, {0.30, 0.40, 0.90}};

inline bool inside_shape(int shape, double u, double v, double r) {
  switch (shape) {
    case 0: return u * u + v * v <= r * r;                                         // circle
    case 1: {                                                                      // ring
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.55 * 0.55 * r * r;
    }
    case 2: return std::max(std::abs(u), std::abs(v)) <= 0.82 * r;                 // square
    case 3: return std::abs(u) + std::abs(v) <= 1.1 * r;                           // diamond
    case 4: {                                                                      // triangle
      const double x0 = 0.0, y0 = 1.05 * r;
      const double x1 = -0.909 * r, y1 = -0.525 * r;
      const double x2 = 0.909 * r, y2 = -0.525 * r;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (v - ay) - (by - ay) * (u - ax);
      };
      const double s0 = side(x0, y0, x1, y1);
      const double s1 = side(x1, y1, x2, y2);
      const double s2 = side(x2, y2, x0, y0);
      return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
    }
    case 5:                                                                        // cross
      return (std::abs(u) <= 0.35 * r && std::abs(v) <= 1.05 * r) ||
             (std::abs(v) <= 0.35 * r && std::abs(u) <= 1.05 * r);
    default: return false;
  }
}

inline Tensor render_shape_image(std::size_t size, int shape, int color, Rng& rng) {
  const double half = static_cast<double>(size) / 2.0;
  const double cx = half + rng.uniform(-0.13, 0.13) * static_cast<double>(size);
  const double cy = half + rng.uniform(-0.13, 0.13) * static_cast<double>(size);
  const double r = rng.uniform(0.17, 0.30) * static_cast<double>(size);
  // Small range only: under free rotation a square is indistinguishable
  // from a diamond.
  const double theta = rng.uniform(-0.15, 0.15);
  const double ct = std::cos(theta), st = std::sin(theta);
  double rgb[3];
  for (int c = 0; c < 3; ++c) {
    rgb[c] = std::clamp(kColorBase[color][c] + rng.uniform(-0.12, 0.12), 0.0, 1.0);
  }
  const double bg = 0.12 + rng.uniform(-0.03, 0.03);
  const double noise_sigma = 0.10;

  Tensor img({size, size, 3});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double cov = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double u = ct * px + st * py;
          const double v = -st * px + ct * py;
          if (inside_shape(shape, u, v, r)) cov += 0.25;
        }
      }
      double* p = img.data.data() + (y * size + x) * 3;
      for (int c = 0; c < 3; ++c) {
        const double val = bg * (1.0 - cov) + rgb[c] * cov + rng.normal(0.0, noise_sigma);
        p[c] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  return img;
}

// Per class: shuffle that class's indices, then hand each split its share.
// Equal class sizes give every split an exactly balanced class mix.
inline std::map<std::string, std::vector<std::size_t>> assign_splits(
    const std::vector<std::size_t>& labels, std::size_t n_classes, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> per_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) per_class[labels[i]].push_back(i);
  std::map<std::string, std::vector<std::size_t>> splits;
  for (const auto& name : kSplitNames) splits[name] = {};
  Rng rng(derive_seed(seed, 0x73706c69));  // "spli"
  for (std::size_t cls = 0; cls < n_classes; ++cls) {
    auto& idx = per_class[cls];
    rng.shuffle(idx);
    const std::size_t n = idx.size();
    std::array<std::size_t, 5> counts{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 5; ++s) {
      counts[s] = static_cast<std::size_t>(kSplitFractions[s] * static_cast<double>(n));
      assigned += counts[s];
    }
    for (std::size_t s = 0; assigned < n; s = (s + 1) % 5) {
      ++counts[s];
      ++assigned;
    }
    std::size_t off = 0;
    for (std::size_t s = 0; s < 5; ++s) {
      auto& dst = splits[kSplitNames[s]];
      dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(off),
                 idx.begin() + static_cast<std::ptrdiff_t>(off + counts[s]));
      off += counts[s];
    }
  }
  for (auto& [name, idx] : splits) std::sort(idx.begin(), idx.end());
  return splits;
}

}  // namespace detail

inline LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_classes < 2) throw invalid_argument_error("generate_synthetic: n_classes >= 2");
  if (cfg.n_classes > detail::kNumShapes * detail::kNumColors) {
    throw invalid_argument_error("generate_synthetic: at most " +
                                 std::to_string(detail::kNumShapes * detail::kNumColors) +
                                 " classes available");
  }
  if (cfg.per_class < 20) throw invalid_argument_error("generate_synthetic: per_class >= 20");
  if (cfg.image_size < 8) throw invalid_argument_error("generate_synthetic: image_size >= 8");

  LabeledDataset ds;
  ds.seed = cfg.seed;
  ds.height = ds.width = cfg.image_size;
  ds.channels = 3;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    const int shape = static_cast<int>(c) % detail::kNumShapes;
    const int color = static_cast<int>(c) / detail::kNumShapes;
    ds.label_names.push_back(std::string(detail::kColorNames[color]) + "_" +
                             detail::kShapeNames[shape]);
  }
  const std::size_t total = cfg.n_classes * cfg.per_class;
  ds.images.reserve(total);
  ds.labels.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t cls = i % cfg.n_classes;
    Rng rng(derive_seed(cfg.seed, 0x1000000 + i));
    const int shape = static_cast<int>(cls) % detail::kNumShapes;
    const int color = static_cast<int>(cls) / detail::kNumShapes;
    ds.images.push_back(detail::render_shape_image(cfg.image_size, shape, color, rng));
    ds.labels.push_back(cls);
  }
  ds.splits = detail::assign_splits(ds.labels, cfg.n_classes, cfg.seed);
  return ds;
}

// ---------------------------------------------------------------------------
// IDX ingestion (classic big-endian layout).
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32_be(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw io_error("truncated file reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

inline LabeledDataset ingest_idx(const std::filesystem::path& images_path,
                                 const std::filesystem::path& labels_path,
                                 std::size_t channels = 3, std::uint64_t seed = 7) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw artifact_missing_error("no such file: " + images_path.string());
  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw artifact_missing_error("no such file: " + labels_path.string());

  const std::uint32_t im_magic = detail::read_u32_be(imf, "image magic");
  if (im_magic != 0x00000803u) {
    throw io_error("magic mismatch: expected IDX image magic 0x00000803 in " +
                   images_path.string());
  }
  const std::uint32_t n = detail::read_u32_be(imf, "image count");
  const std::uint32_t h = detail::read_u32_be(imf, "image height");
  const std::uint32_t w = detail::read_u32_be(imf, "image width");

  const std::uint32_t lb_magic = detail::read_u32_be(lbf, "label magic");
  if (lb_magic != 0x00000801u) {
    throw io_error("magic mismatch: expected IDX label magic 0x00000801 in " +
                   labels_path.string());
  }
  const std::uint32_t n_labels = detail::read_u32_be(lbf, "label count");
  if (n != n_labels) {
    throw dataset_error("label/image count mismatch: " + std::to_string(n) + " images vs " +
                        std::to_string(n_labels) + " labels");
  }

  LabeledDataset ds;
  ds.seed = seed;
  ds.height = h;
  ds.width = w;
  ds.channels = channels;
  std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
  std::size_t max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    imf.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!imf) throw io_error("truncated file reading image " + std::to_string(i));
    char lb;
    lbf.read(&lb, 1);
    if (!lbf) throw io_error("truncated file reading label " + std::to_string(i));
    Tensor img({h, w, channels});
    for (std::size_t p = 0; p < row.size(); ++p) {
      const double v = static_cast<double>(row[p]) / 255.0;
      for (std::size_t c = 0; c < channels; ++c) img.data[p * channels + c] = v;
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<std::size_t>(static_cast<unsigned char>(lb)));
    max_label = std::max(max_label, ds.labels.back());
  }
  for (std::size_t c = 0; c <= max_label; ++c) ds.label_names.push_back(std::to_string(c));

  // Unequal class counts would break per-split balance; cap every class at
  // the smallest class size before splitting.
  std::vector<std::size_t> per_class(max_label + 1, 0);
  for (std::size_t l : ds.labels) ++per_class[l];
  const std::size_t cap = *std::min_element(per_class.begin(), per_class.end());
  std::vector<std::size_t> kept;
  std::vector<std::size_t> taken(max_label + 1, 0);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (taken[ds.labels[i]] < cap) {
      ++taken[ds.labels[i]];
      kept.push_back(i);
    }
  }
  if (kept.size() != ds.labels.size()) {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    for (std::size_t i : kept) {
      images.push_back(std::move(ds.images[i]));
      labels.push_back(ds.labels[i]);
    }
    ds.images = std::move(images);
    ds.labels = std::move(labels);
  }
  ds.splits = detail::assign_splits(ds.labels, max_label + 1, seed);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory format: meta.json + images.owtn (one [N,H,W,C] tensor).
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const LabeledDataset& ds) {
  std::filesystem::create_directories(dir);
  Tensor all({ds.size(), ds.height, ds.width, ds.channels});
  const std::size_t stride = ds.height * ds.width * ds.channels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::copy(ds.images[i].data.begin(), ds.images[i].data.end(),
              all.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  save_owtn(dir / "images.owtn", all);
  json meta;
  meta["label_names"] = ds.label_names;
  meta["labels"] = ds.labels;
  meta["splits"] = ds.splits;
  meta["seed"] = ds.seed;
  meta["height"] = ds.height;
  meta["width"] = ds.width;
  meta["channels"] = ds.channels;
  std::ofstream os(dir / "meta.json", std::ios::binary);
  if (!os) throw io_error("cannot write " + (dir / "meta.json").string());
  os << meta.dump(2) << "\n";
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw artifact_missing_error("no such dataset: " + dir.string());
  json meta;
  try {
    is >> meta;
  } catch (const json::exception& e) {
    throw io_error("bad dataset meta: " + std::string(e.what()));
  }
  LabeledDataset ds;
  ds.label_names = meta.at("label_names").get<std::vector<std::string>>();
  ds.labels = meta.at("labels").get<std::vector<std::size_t>>();
  ds.splits = meta.at("splits").get<std::map<std::string, std::vector<std::size_t>>>();
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.height = meta.at("height").get<std::size_t>();
  ds.width = meta.at("width").get<std::size_t>();
  ds.channels = meta.at("channels").get<std::size_t>();
  Tensor all = load_owtn(dir / "images.owtn");
  if (all.rank() != 4 || all.shape[0] != ds.labels.size()) {
    throw dataset_error("dataset images tensor does not match meta");
  }
  const std::size_t stride = ds.height * ds.width * ds.channels;
  for (std::size_t i = 0; i < all.shape[0]; ++i) {
    Tensor img({ds.height, ds.width, ds.channels});
    std::copy(all.data.begin() + static_cast<std::ptrdiff_t>(i * stride),
              all.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride),
              img.data.begin());
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batch assembly helpers.
// ---------------------------------------------------------------------------

inline Tensor stack_images(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
  Tensor X({idx.size(), ds.height, ds.width, ds.channels});
  const std::size_t stride = ds.height * ds.width * ds.channels;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(ds.images[idx[i]].data.begin(), ds.images[idx[i]].data.end(),
              X.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return X;
}

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t n_classes) {
  Tensor Y({labels.size(), n_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) throw invalid_argument_error("one_hot: label out of range");
    Y.data[i * n_classes + labels[i]] = 1.0;
  }
  return Y;
}

inline std::vector<std::size_t> labels_at(const LabeledDataset& ds,
                                          const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds.labels[i]);
  return out;
}

// Indices of `split` whose label is in `keep` (empty keep = all).
inline std::vector<std::size_t> split_filtered(const LabeledDataset& ds, const std::string& split,
                                               const std::vector<std::size_t>& keep = {}) {
  std::vector<std::size_t> out;
  for (std::size_t i : ds.split(split)) {
    if (keep.empty() || std::find(keep.begin(), keep.end(), ds.labels[i]) != keep.end()) {
      out.push_back(i);
    }
  }
  return out;
}

}  // namespace owsd

#endif  // OWSD_DATASET_HPP
