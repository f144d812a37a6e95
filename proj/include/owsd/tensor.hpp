#ifndef OWSD_TENSOR_HPP
#define OWSD_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "owsd/errors.hpp"
#include "owsd/rng.hpp"

namespace owsd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense n-d array of float64 in row-major order, with an optional gradient
// buffer of the same length. This is the value type every network in the
// project computes on.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until ensure_grad()

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    for (std::size_t d : shape) {
      if (d == 0) throw shape_error("tensor dimension must be positive, got " + shape_str(shape));
    }
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = rng.normal(0.0, stddev);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  bool has_grad() const { return grad.size() == data.size(); }

  bool all_finite() const {
    for (double x : data) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw shape_error("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  // Leading-axis slice [i, i+count) as its own tensor.
  Tensor slice0(std::size_t i, std::size_t count) const {
    if (shape.empty() || i + count > shape[0]) {
      throw shape_error("slice0 out of range on " + shape_str(shape));
    }
    std::size_t inner = numel() / shape[0];
    Shape s = shape;
    s[0] = count;
    Tensor t(s);
    std::copy(data.begin() + static_cast<std::ptrdiff_t>(i * inner),
              data.begin() + static_cast<std::ptrdiff_t>((i + count) * inner), t.data.begin());
    return t;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void check_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite()) throw nonfinite_error("non-finite value in " + where);
}

// ---------------------------------------------------------------------------
// OWTN tensor container: magic "OWTN", version u32, rank u32, dims u32 each,
// dtype u8 (0 = float64 little-endian), then raw data. Round-trips bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw io_error("truncated file reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t lo = read_u32(is, what);
  std::uint64_t hi = read_u32(is, what);
  return lo | (hi << 32);
}

}  // namespace detail

inline constexpr std::uint32_t kOwtnVersion = 1;

inline void save_owtn(std::ostream& os, const Tensor& t) {
  os.write("OWTN", 4);
  detail::write_u32(os, kOwtnVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
  os.put('\0');  // dtype 0 = float64 LE
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!os) throw io_error("write failed while saving OWTN tensor");
}

inline Tensor load_owtn(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw io_error("truncated file reading OWTN magic");
  if (std::memcmp(magic, "OWTN", 4) != 0) throw io_error("magic mismatch: expected OWTN");
  std::uint32_t version = detail::read_u32(is, "OWTN version");
  if (version != kOwtnVersion) {
    throw io_error("unsupported OWTN version " + std::to_string(version));
  }
  std::uint32_t rank = detail::read_u32(is, "OWTN rank");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = detail::read_u32(is, "OWTN dim");
  int dtype = is.get();
  if (dtype == std::char_traits<char>::eof()) throw io_error("truncated file reading OWTN dtype");
  if (dtype != 0) throw io_error("unsupported OWTN dtype code " + std::to_string(dtype));
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
    throw io_error("truncated file reading OWTN data");
  }
  return t;
}

inline void save_owtn(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  save_owtn(os, t);
}

inline Tensor load_owtn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw artifact_missing_error("cannot open " + path.string());
  return load_owtn(is);
}

}  // namespace owsd

#endif  // OWSD_TENSOR_HPP
