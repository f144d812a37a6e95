#ifndef OWSD_SERIALIZE_HPP
#define OWSD_SERIALIZE_HPP

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owsd/errors.hpp"
#include "owsd/layers.hpp"
#include "owsd/network.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

// Shared container layout for OWSK/OWSE/OWSC/OWSI model files:
//   magic (4 bytes), version u32, seed u64, id (u32 length + UTF-8),
//   meta JSON (u32 length + canonical bytes), then every state tensor in
//   OWTN framing. Canonical JSON = nlohmann dump with sorted keys, so the
//   same record always produces the same bytes.
inline constexpr std::uint32_t kContainerVersion = 1;

struct ModelRecord {
  std::string magic;  // "OWSK" / "OWSE" / "OWSC" / "OWSI"
  std::uint64_t seed = 0;
  std::string id;
  json meta;  // holds "arch", "input_shape", and per-module fields
  std::vector<Tensor> tensors;
};

inline void save_model_record(std::ostream& os, const ModelRecord& rec) {
  if (rec.magic.size() != 4) throw io_error("container magic must be 4 bytes");
  os.write(rec.magic.data(), 4);
  detail::write_u32(os, kContainerVersion);
  detail::write_u64(os, rec.seed);
  detail::write_u32(os, static_cast<std::uint32_t>(rec.id.size()));
  os.write(rec.id.data(), static_cast<std::streamsize>(rec.id.size()));
  const std::string meta = rec.meta.dump();
  detail::write_u32(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (const Tensor& t : rec.tensors) save_owtn(os, t);
  if (!os) throw io_error("write failed for " + rec.magic + " container");
}

inline void save_model_record(const std::filesystem::path& path, const ModelRecord& rec) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  save_model_record(os, rec);
}

inline ModelRecord load_model_record(std::istream& is, const std::string& expected_magic) {
  ModelRecord rec;
  char magic[4];
  is.read(magic, 4);
  if (!is) throw io_error("truncated file reading container magic");
  rec.magic.assign(magic, 4);
  if (rec.magic != expected_magic) {
    throw io_error("magic mismatch: expected " + expected_magic + ", got " + rec.magic);
  }
  const std::uint32_t version = detail::read_u32(is, "container version");
  if (version != kContainerVersion) {
    throw io_error("unsupported " + expected_magic + " version " + std::to_string(version));
  }
  rec.seed = detail::read_u64(is, "container seed");
  const std::uint32_t id_len = detail::read_u32(is, "id length");
  rec.id.resize(id_len);
  is.read(rec.id.data(), id_len);
  if (!is) throw io_error("truncated file reading container id");
  const std::uint32_t meta_len = detail::read_u32(is, "meta length");
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  if (!is) throw io_error("truncated file reading container meta");
  try {
    rec.meta = json::parse(meta);
  } catch (const json::exception& e) {
    throw io_error(std::string("container meta is not valid JSON: ") + e.what());
  }
  while (is.peek() != std::char_traits<char>::eof()) {
    rec.tensors.push_back(load_owtn(is));
  }
  return rec;
}

inline ModelRecord load_model_record(const std::filesystem::path& path,
                                     const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw artifact_missing_error("no such artifact: " + path.string());
  return load_model_record(is, expected_magic);
}

// Rebuilds a Network from a record's meta ("arch" + "input_shape") and
// restores its weights from the stored tensors.
inline Network network_from_record(const ModelRecord& rec) {
  if (!rec.meta.contains("arch") || !rec.meta.contains("input_shape")) {
    throw io_error(rec.magic + " container meta lacks arch/input_shape");
  }
  Network net(arch_from_json(rec.meta.at("arch")), rec.meta.at("input_shape").get<Shape>(),
              rec.seed);
  net.state_restore(rec.tensors);
  return net;
}

inline json network_meta(const Network& net) {
  json meta;
  meta["arch"] = arch_to_json(net.arch());
  meta["input_shape"] = net.input_shape();
  return meta;
}

inline std::vector<Tensor> network_state_copy(const Network& net) {
  std::vector<Tensor> out;
  for (const Tensor* t : net.state_tensors()) out.push_back(*t);
  return out;
}

// FNV-1a over a file's bytes; used by determinism and frozen-weight checks.
inline std::uint64_t file_fnv1a(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw artifact_missing_error("no such artifact: " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  return h;
}

inline std::uint64_t tensors_fnv1a(const std::vector<const Tensor*>& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const Tensor* t : tensors) {
    for (std::size_t d : t->shape) mix(&d, sizeof d);
    mix(t->data.data(), t->data.size() * sizeof(double));
  }
  return h;
}

}  // namespace owsd

#endif  // OWSD_SERIALIZE_HPP
