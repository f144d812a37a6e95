#ifndef OWSD_SCRAMBLER_HPP
#define OWSD_SCRAMBLER_HPP

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "owsd/errors.hpp"
#include "owsd/network.hpp"
#include "owsd/serialize.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

// Generator layout: dense projection to a base_size^2 seed volume, then one
// transposed-conv block per entry of `filters` (each doubles the side), with
// ReLU between blocks and tanh at the end. No batchnorm so the key stays a
// pure static function of its weights.
struct GeneratorConfig {
  std::size_t embedding_dim = 64;
  std::size_t base_size = 4;
  std::size_t base_channels = 128;
  std::vector<std::size_t> filters = {64, 32};  // intermediate deconv blocks
  std::size_t out_channels = 3;

  std::size_t image_size() const { return base_size << (filters.size() + 1); }
};

inline GeneratorConfig toy_generator_config(std::size_t embedding_dim = 64) {
  GeneratorConfig g;
  g.embedding_dim = embedding_dim;
  return g;  // 4x4x128 -> 8x8x64 -> 16x16x32 -> 32x32x3
}

inline GeneratorConfig paper_shape_config() {
  GeneratorConfig g;
  g.embedding_dim = 2048;
  g.base_channels = 512;
  g.filters = {256, 128, 64, 32, 16};  // 4 -> 8 -> ... -> 128 -> 256
  return g;
}

inline std::vector<LayerSpec> generator_arch(const GeneratorConfig& cfg) {
  std::vector<LayerSpec> arch;
  arch.push_back(LayerSpec::dense(cfg.base_size * cfg.base_size * cfg.base_channels));
  arch.push_back(LayerSpec::reshape({cfg.base_size, cfg.base_size, cfg.base_channels}));
  arch.push_back(LayerSpec::relu());
  for (std::size_t f : cfg.filters) {
    arch.push_back(LayerSpec::deconv2d(f, 4, 2, 1));
    arch.push_back(LayerSpec::relu());
  }
  arch.push_back(LayerSpec::deconv2d(cfg.out_channels, 4, 2, 1));
  arch.push_back(LayerSpec::tanh());
  return arch;
}

struct ScrambledImage {
  Tensor pixels;  // [H,W,C] in [0,1]
  std::string key_id;
};

struct ScramblingKey {
  std::string key_id;
  std::uint64_t seed = 0;
  Network net;  // embedding -> tanh output in [-1,1]; frozen
  std::string created_at;  // informational; deliberately not serialized

  Shape image_shape() const { return net.output_shape(); }
  std::size_t embedding_dim() const { return net.input_shape()[0]; }
};

namespace detail {

inline std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t json_fnv1a(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Rebuild a key from an explicit architecture (used for rotation, where the
// layout comes from an existing key file rather than a GeneratorConfig).
inline ScramblingKey regenerate_key(std::uint64_t seed, const std::vector<LayerSpec>& arch,
                                    const Shape& input_shape) {
  Network net(arch, input_shape, seed);
  ScramblingKey key;
  key.seed = seed;
  key.key_id = "key-" + detail::hex16(derive_seed(seed, detail::json_fnv1a(arch_to_json(arch))));
  key.net = std::move(net);
  key.created_at = detail::iso8601_now();
  return key;
}

inline ScramblingKey generate_key(std::uint64_t seed, const GeneratorConfig& cfg) {
  return regenerate_key(seed, generator_arch(cfg), {cfg.embedding_dim});
}

inline ScrambledImage scramble(const ScramblingKey& key, const Tensor& embedding) {
  if (embedding.rank() != 1 || embedding.shape[0] != key.embedding_dim()) {
    throw shape_error("scramble: expected embedding of dimension " +
                      std::to_string(key.embedding_dim()) + ", got " +
                      shape_str(embedding.shape));
  }
  Tensor out = key.net.infer(embedding.reshaped({1, embedding.shape[0]}));
  ScrambledImage img;
  img.key_id = key.key_id;
  Shape s(out.shape.begin() + 1, out.shape.end());
  img.pixels = Tensor(s);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    img.pixels.data[i] = (out.data[i] + 1.0) * 0.5;  // tanh range -> [0,1]
  }
  check_finite(img.pixels, "scramble output");
  return img;
}

// [N,E] -> [N,H,W,C]; same math as scramble(), batched for throughput.
inline Tensor scramble_batch(const ScramblingKey& key, const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.shape[1] != key.embedding_dim()) {
    throw shape_error("scramble_batch: expected [N," + std::to_string(key.embedding_dim()) +
                      "], got " + shape_str(embeddings.shape));
  }
  Tensor out = key.net.infer(embeddings);
  for (double& v : out.data) v = (v + 1.0) * 0.5;
  check_finite(out, "scramble output");
  return out;
}

inline void save_key(const std::filesystem::path& path, const ScramblingKey& key) {
  ModelRecord rec;
  rec.magic = "OWSK";
  rec.seed = key.seed;
  rec.id = key.key_id;
  rec.meta = network_meta(key.net);
  rec.tensors = network_state_copy(key.net);
  save_model_record(path, rec);
}

inline ScramblingKey load_key(const std::filesystem::path& path) {
  ModelRecord rec = load_model_record(path, "OWSK");
  ScramblingKey key;
  key.key_id = rec.id;
  key.seed = rec.seed;
  key.net = network_from_record(rec);
  key.created_at = detail::iso8601_now();
  return key;
}

}  // namespace owsd

#endif  // OWSD_SCRAMBLER_HPP
