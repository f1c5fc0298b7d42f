#pragma once

// Self-describing tensor container ("FVTB"):
//
//   offset 0   magic "FVTB"
//   offset 4   u32 format version (little endian)
//   offset 8   u64 header length in bytes
//   offset 16  UTF-8 JSON header:
//                {"tensors": [{"name", "dtype": "f32"|"f64", "shape",
//                              "byte_offset", "byte_length"}, ...],
//                 "metadata": {...}}
//   then       zero padding; every tensor payload starts on a 64-byte
//              boundary, byte_offset is absolute, data is little endian.

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fvtb/errors.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/image_io.hpp"

namespace fvtb {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

using json = nlohmann::json;

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'F', 'V', 'T', 'B'};

enum class DType { f32, f64 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

struct Tensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct Container {
  json metadata = json::object();
  std::vector<Tensor> tensors;

  void add(std::string name, DType dtype, std::vector<std::int64_t> shape,
           std::span<const double> values) {
    Tensor t{std::move(name), dtype, std::move(shape), {values.begin(), values.end()}};
    if (t.numel() != static_cast<std::int64_t>(t.values.size()))
      throw DimensionError("tensor '" + t.name + "': shape does not match value count");
    if (find(t.name)) throw ConfigError("duplicate tensor name: " + t.name);
    tensors.push_back(std::move(t));
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const Tensor& get(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw CorruptError("container is missing tensor '" + name + "'");
  }

  std::string type() const { return metadata.value("type", std::string{}); }
};

inline std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Short stable hash of a JSON config (sorted keys, so key order is irrelevant).
inline std::string config_hash(const json& cfg) { return sha256_hex(cfg.dump()).substr(0, 16); }

namespace detail {

inline std::uint64_t align64(std::uint64_t v) { return (v + 63) & ~std::uint64_t{63}; }

template <typename T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace detail

inline std::string serialize_container(const Container& c) {
  // Header size depends on offsets, offsets depend on header size: iterate
  // until the header length is stable.
  json header;
  std::string header_text;
  std::uint64_t data_start = 0;
  for (int pass = 0; pass < 8; ++pass) {
    header = json::object();
    header["metadata"] = c.metadata;
    header["tensors"] = json::array();
    std::uint64_t off = data_start;
    for (const auto& t : c.tensors) {
      const std::uint64_t len = static_cast<std::uint64_t>(t.values.size()) * dtype_size(t.dtype);
      header["tensors"].push_back({{"name", t.name},
                                   {"dtype", dtype_name(t.dtype)},
                                   {"shape", t.shape},
                                   {"byte_offset", off},
                                   {"byte_length", len}});
      off = detail::align64(off + len);
    }
    header_text = header.dump();
    const std::uint64_t need = detail::align64(16 + header_text.size());
    if (need == data_start) break;
    data_start = need;
  }

  std::string out;
  out.append(kContainerMagic, 4);
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out.resize(data_start, '\0');
  for (const auto& t : c.tensors) {
    out.resize(detail::align64(out.size()), '\0');
    if (t.dtype == DType::f32) {
      for (double v : t.values) detail::put_le<float>(out, static_cast<float>(v));
    } else {
      for (double v : t.values) detail::put_le<double>(out, v);
    }
  }
  return out;
}

inline Container parse_container(std::span<const unsigned char> bytes, const std::string& what) {
  if (bytes.size() < 16) throw CorruptError(what + ": file too short for a container header");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw CorruptError(what + ": bad magic, not an FVTB container");
  std::uint32_t version;
  std::uint64_t header_len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (version != kContainerVersion)
    throw VersionError(what + ": container version " + std::to_string(version) +
                       ", reader supports version " + std::to_string(kContainerVersion));
  if (header_len > bytes.size() - 16) throw CorruptError(what + ": truncated header");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw CorruptError(what + ": header is not valid JSON (" + e.what() + ")");
  }
  Container c;
  try {
    c.metadata = header.value("metadata", json::object());
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    const std::uint64_t min_offset = 16 + header_len;
    for (const auto& jt : header.at("tensors")) {
      Tensor t;
      t.name = jt.at("name").get<std::string>();
      const auto dt = jt.at("dtype").get<std::string>();
      if (dt == "f32") t.dtype = DType::f32;
      else if (dt == "f64") t.dtype = DType::f64;
      else throw CorruptError(what + ": unknown dtype '" + dt + "'");
      t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
      for (auto s : t.shape)
        if (s < 0) throw CorruptError(what + ": negative dimension in '" + t.name + "'");
      const auto off = jt.at("byte_offset").get<std::uint64_t>();
      const auto len = jt.at("byte_length").get<std::uint64_t>();
      if (static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype) != len)
        throw CorruptError(what + ": tensor '" + t.name + "' byte_length disagrees with shape");
      if (off < min_offset || off > bytes.size() || len > bytes.size() - off)
        throw CorruptError(what + ": tensor '" + t.name + "' lies outside the file (truncated?)");
      ranges.emplace_back(off, off + len);
      t.values.resize(static_cast<std::size_t>(t.numel()));
      const unsigned char* p = bytes.data() + off;
      if (t.dtype == DType::f32) {
        for (std::size_t i = 0; i < t.values.size(); ++i) {
          float f;
          std::memcpy(&f, p + 4 * i, 4);
          t.values[i] = f;
        }
      } else {
        std::memcpy(t.values.data(), p, len);
      }
      if (c.find(t.name)) throw CorruptError(what + ": duplicate tensor '" + t.name + "'");
      c.tensors.push_back(std::move(t));
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].first < ranges[i - 1].second)
        throw CorruptError(what + ": overlapping tensor payloads");
  } catch (const json::exception& e) {
    throw CorruptError(what + ": malformed header (" + e.what() + ")");
  }
  return c;
}

inline void save_container(const Container& c, const std::filesystem::path& path) {
  const std::string bytes = serialize_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Container load_container(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  const auto bytes = read_file_bytes(path);
  return parse_container(bytes, path.string());
}

/// Writes any model with a to_container overload.
template <typename Model>
void save_model(const Model& m, const std::filesystem::path& path) {
  save_container(to_container(m), path);
}

/// Raw descriptor container: one f64 tensor "hog" shaped [cells_y, cells_x, depth].
inline Container to_container(const HogDescriptor& d) {
  Container c;
  c.metadata = {{"type", "hog_descriptor"}, {"cell_size", d.cell_size}};
  c.add("hog", DType::f64, {d.cells_y, d.cells_x, d.depth}, d.data);
  return c;
}

inline HogDescriptor descriptor_from_container(const Container& c) {
  const auto& t = c.get("hog");
  if (t.shape.size() != 3 || t.shape[0] < 1 || t.shape[1] < 1 || t.shape[2] < 1)
    throw CorruptError("tensor 'hog' must have shape [cells_y, cells_x, depth]");
  HogDescriptor d(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[0]), static_cast<int>(t.shape[2]),
                  c.metadata.value("cell_size", 8));
  d.data = t.values;
  return d;
}

// ---------------------------------------------------------------------------
// Corpus manifests and annotations

struct CorpusEntry {
  std::string path;  // relative to the manifest root
  std::string sha256;
  int width = 0;
  int height = 0;
};

struct CorpusManifest {
  std::filesystem::path root;  // absolute or relative to the working directory
  std::vector<CorpusEntry> entries;
  std::optional<std::filesystem::path> annotations;
};

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  CorpusManifest m;
  try {
    const auto base = path.parent_path();
    m.root = base / j.value("root", std::string{"."});
    for (const auto& e : j.at("entries")) {
      CorpusEntry ce;
      ce.path = e.at("path").get<std::string>();
      ce.sha256 = e.value("sha256", std::string{});
      ce.width = e.value("width", 0);
      ce.height = e.value("height", 0);
      for (const auto& prev : m.entries)
        if (prev.path == ce.path) throw CorruptError("manifest lists '" + ce.path + "' twice");
      m.entries.push_back(std::move(ce));
    }
    if (j.contains("annotations")) m.annotations = m.root / j["annotations"].get<std::string>();
  } catch (const json::exception& e) {
    throw CorruptError("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

inline void save_manifest(const CorpusManifest& m, const std::filesystem::path& path,
                          const std::string& root_text = ".") {
  json j;
  j["root"] = root_text;
  j["entries"] = json::array();
  for (const auto& e : m.entries)
    j["entries"].push_back({{"path", e.path}, {"sha256", e.sha256}, {"width", e.width}, {"height", e.height}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << j.dump(1) << '\n';
}

/// Lazily decoded, ordered view over a manifest's images.
class ImageSource {
 public:
  ImageSource() = default;
  explicit ImageSource(CorpusManifest m, bool strict = false)
      : manifest_(std::move(m)), strict_(strict) {}

  static ImageSource open(const std::filesystem::path& manifest_path, bool strict = false) {
    return ImageSource(load_manifest(manifest_path), strict);
  }

  /// In-memory source, used by tests and by callers that already hold images.
  static ImageSource from_images(std::vector<Image> images) {
    ImageSource s;
    for (std::size_t i = 0; i < images.size(); ++i)
      s.manifest_.entries.push_back({"mem:" + std::to_string(i), "", images[i].width, images[i].height});
    s.memory_ = std::move(images);
    return s;
  }

  std::size_t size() const { return manifest_.entries.size(); }
  bool empty() const { return size() == 0; }
  const CorpusManifest& manifest() const { return manifest_; }
  const CorpusEntry& entry(std::size_t i) const { return manifest_.entries.at(i); }
  std::filesystem::path path(std::size_t i) const { return manifest_.root / entry(i).path; }

  Image load(std::size_t i) const {
    if (!memory_.empty()) return memory_.at(i);
    const auto p = path(i);
    if (!std::filesystem::exists(p))
      throw IoError("corpus entry " + std::to_string(i) + " missing: " + p.string());
    if (strict_ && !entry(i).sha256.empty()) {
      const auto bytes = read_file_bytes(p);
      if (sha256_hex(bytes) != entry(i).sha256)
        throw CorruptError("sha256 mismatch for corpus entry " + entry(i).path);
    }
    return load_image(p);
  }

  /// Sub-source restricted to the given entry indices, order preserved.
  ImageSource subset(std::span<const std::size_t> keep) const {
    ImageSource s;
    s.manifest_.root = manifest_.root;
    s.strict_ = strict_;
    for (auto i : keep) {
      s.manifest_.entries.push_back(entry(i));
      if (!memory_.empty()) s.memory_.push_back(memory_.at(i));
    }
    return s;
  }

 private:
  CorpusManifest manifest_;
  std::vector<Image> memory_;
  bool strict_ = false;
};

struct Annotation {
  std::string image;  // relative to the manifest root
  int x = 0, y = 0, w = 0, h = 0;
  std::string category;
};

inline std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations: " + path.string());
  std::vector<Annotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      Annotation a;
      a.image = j.at("image").get<std::string>();
      a.x = j.at("x").get<int>();
      a.y = j.at("y").get<int>();
      a.w = j.at("w").get<int>();
      a.h = j.at("h").get<int>();
      a.category = j.value("category", std::string{});
      if (a.w <= 0 || a.h <= 0) throw CorruptError("non-positive box size");
      out.push_back(std::move(a));
    } catch (const json::exception& e) {
      throw CorruptError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const CorruptError& e) {
      throw CorruptError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fvtb
