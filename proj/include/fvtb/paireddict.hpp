#pragma once

// Paired dictionaries: an image-patch basis U and a HOG-patch basis V that
// share sparse codes. A descriptor window is coded against V and decoded
// with U; overlapping windows are averaged.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/log.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/sparse.hpp"
#include "fvtb/store.hpp"

namespace fvtb {

inline constexpr const char* kPairedNormalization = "patch-zero-mean/hog-centered/rms-balanced";

struct PairedConfig {
  HogConfig hog;
  int patch_cells = 5;
  int k = 256;
  double lambda = -1;  // < 0: 0.15 * sqrt(stacked dimension)
  std::size_t n_samples = 10000;
  int channels = 1;
  int epochs = 20;
  double target_rms = 0.07;  // per-element RMS of each part after balancing
  std::uint64_t seed = 0;
  int threads = 1;
};

struct PairedDictionary {
  HogConfig hog;
  int patch_cells = 5;
  int channels = 1;
  double lambda = 0;
  Dictionary u;  // image part, patch_pixels^2 * channels rows
  Dictionary v;  // HOG part, patch_cells^2 * depth rows
  Eigen::VectorXd hog_mean;
  double image_scale = 1;  // normalized = image_scale * (patch - patch mean)
  double hog_scale = 1;    // normalized = hog_scale * (hog - hog_mean)
  std::string normalization = kPairedNormalization;
  std::vector<double> objectives;

  int patch_pixels() const { return patch_cells * hog.cell_size; }
  Eigen::Index image_dim() const {
    return static_cast<Eigen::Index>(patch_pixels()) * patch_pixels() * channels;
  }
  Eigen::Index hog_dim() const { return static_cast<Eigen::Index>(patch_cells) * patch_cells * hog.depth(); }
  Eigen::Index atoms() const { return u.atoms(); }

  void validate() const {
    if (u.atoms() != v.atoms()) throw CorruptError("paired dictionary: U and V atom counts differ");
    if (u.dim() != image_dim() || v.dim() != hog_dim())
      throw CorruptError("paired dictionary: dictionary dims inconsistent with patch geometry");
    if (hog_mean.size() != hog_dim()) throw CorruptError("paired dictionary: hog_mean has wrong length");
  }
};

inline double default_paired_lambda(Eigen::Index stacked_dim) {
  return 0.15 * std::sqrt(static_cast<double>(stacked_dim));
}

/// Image pixels aligned with the patch_cells window whose top-left cell is
/// (cx, cy): the square starting at the anchor of that cell.
inline Eigen::VectorXd image_patch(const Image& img, int cx, int cy, int patch_cells, int cell_size) {
  const int side = patch_cells * cell_size;
  const int x0 = cell_size * (cx + 1), y0 = cell_size * (cy + 1);
  Eigen::VectorXd out(static_cast<Eigen::Index>(side) * side * img.channels);
  Eigen::Index k = 0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < img.channels; ++c) out(k++) = img.at(x0 + x, y0 + y, c);
  return out;
}

inline Eigen::VectorXd hog_patch(const HogDescriptor& h, int cx, int cy, int patch_cells) {
  const auto w = h.window(cx, cy, patch_cells, patch_cells);
  return Eigen::Map<const Eigen::VectorXd>(w.data.data(), static_cast<Eigen::Index>(w.data.size()));
}

/// Pads a decoded patch by one cell on each side with edge replication, giving
/// the raster whose descriptor has the patch's cell geometry.
inline Image patch_raster(const Eigen::VectorXd& patch, int side, int channels, int cell_size) {
  Image inner(side, side, channels);
  std::copy(patch.data(), patch.data() + patch.size(), inner.data.begin());
  return crop(inner, -cell_size, -cell_size, side + 2 * cell_size, side + 2 * cell_size);
}

namespace detail {

// Rounds toward zero to the nearest float so the f32 container payload is
// exact and column norms cannot grow.
inline void round_to_f32(Eigen::MatrixXd& m) {
  for (auto& x : m.reshaped()) {
    float f = static_cast<float>(x);
    if (std::abs(static_cast<double>(f)) > std::abs(x)) f = std::nextafter(f, 0.0f);
    x = f;
  }
}

struct SamplePlan {
  std::vector<std::size_t> image;  // source index per sample
  std::vector<int> cx, cy;
};

}  // namespace detail

/// Raw aligned training pairs: image patches (rows: pixels x channels) and
/// HOG windows (rows: cells x depth), one column per sample.
struct PairedSamples {
  Eigen::MatrixXd images;
  Eigen::MatrixXd hogs;
};

inline PairedSamples sample_pairs(const ImageSource& source, int patch_cells, int channels, std::size_t n,
                                  std::uint64_t seed, const HogConfig& hog = {}, int threads = 1) {
  if (source.empty()) throw EmptyCorpusError("train_paired: corpus is empty");
  if (channels != 1 && channels != 3) throw ConfigError("train_paired: channels must be 1 or 3");
  if (n == 0) throw ConfigError("train_paired: n_samples must be positive");
  const int cs = hog.cell_size;

  // Window positions per image from manifest geometry.
  std::vector<long long> positions(source.size());
  long long total = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& e = source.entry(i);
    const long long nx = e.width / cs - 2 - patch_cells + 1, ny = e.height / cs - 2 - patch_cells + 1;
    positions[i] = nx > 0 && ny > 0 ? nx * ny : 0;
    total += positions[i];
  }
  if (total == 0) throw EmptyCorpusError("train_paired: no image is large enough for one patch window");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long long> pick(0, total - 1);
  std::vector<long long> draws(n);
  for (auto& d : draws) d = pick(rng);

  std::vector<std::vector<std::size_t>> per_image(source.size());
  std::vector<std::pair<int, int>> where(n);
  std::vector<long long> starts(source.size() + 1, 0);
  for (std::size_t i = 0; i < source.size(); ++i) starts[i + 1] = starts[i] + positions[i];
  for (std::size_t s = 0; s < n; ++s) {
    const auto img = static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), draws[s]) - starts.begin() - 1);
    const long long local = draws[s] - starts[img];
    const auto& e = source.entry(img);
    const long long nx = e.width / cs - 2 - patch_cells + 1;
    where[s] = {static_cast<int>(local % nx), static_cast<int>(local / nx)};
    per_image[img].push_back(s);
  }

  const int side = patch_cells * cs;
  PairedSamples out;
  out.images.resize(static_cast<Eigen::Index>(side) * side * channels, static_cast<Eigen::Index>(n));
  out.hogs.resize(static_cast<Eigen::Index>(patch_cells) * patch_cells * hog.depth(), static_cast<Eigen::Index>(n));
  parallel_for(source.size(), threads, [&](std::size_t i) {
    if (per_image[i].empty()) return;
    Image img = source.load(i);
    if (img.width != source.entry(i).width || img.height != source.entry(i).height)
      throw CorruptError("corpus entry " + source.entry(i).path + " does not match its manifest geometry");
    const Image gray = to_luminance(img);
    if (channels == 1) {
      img = gray;
    } else if (img.channels == 1) {
      Image rgb(img.width, img.height, 3);
      for (std::size_t p = 0; p < img.pixels(); ++p)
        for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = img.data[p];
      img = std::move(rgb);
    }
    const HogDescriptor h = compute_hog(gray, hog);
    for (std::size_t s : per_image[i]) {
      const auto [cx, cy] = where[s];
      out.images.col(static_cast<Eigen::Index>(s)) = image_patch(img, cx, cy, patch_cells, cs);
      out.hogs.col(static_cast<Eigen::Index>(s)) = hog_patch(h, cx, cy, patch_cells);
    }
  });
  return out;
}

/// Applies the stored normalization to raw pairs and stacks them.
inline Eigen::MatrixXd stack_normalized(const PairedDictionary& pd, const Eigen::MatrixXd& images,
                                        const Eigen::MatrixXd& hogs) {
  Eigen::MatrixXd s(images.rows() + hogs.rows(), images.cols());
  const Eigen::RowVectorXd means = images.colwise().mean();
  s.topRows(images.rows()) = (images.rowwise() - means) * pd.image_scale;
  s.bottomRows(hogs.rows()) = (hogs.colwise() - pd.hog_mean) * pd.hog_scale;
  return s;
}

inline PairedDictionary train_paired(const ImageSource& source, const PairedConfig& cfg = {}) {
  cfg.hog.validate();
  if (cfg.patch_cells < 1) throw ConfigError("train_paired: patch_cells must be >= 1");
  if (cfg.k < 1) throw ConfigError("train_paired: k must be >= 1");
  if (!(cfg.target_rms > 0)) throw ConfigError("train_paired: target_rms must be positive");
  const PairedSamples raw = sample_pairs(source, cfg.patch_cells, cfg.channels, cfg.n_samples, cfg.seed,
                                         cfg.hog, cfg.threads);

  PairedDictionary pd;
  pd.hog = cfg.hog;
  pd.patch_cells = cfg.patch_cells;
  pd.channels = cfg.channels;
  pd.hog_mean = raw.hogs.rowwise().mean();

  const Eigen::RowVectorXd means = raw.images.colwise().mean();
  const double img_rms = std::sqrt((raw.images.rowwise() - means).squaredNorm() / static_cast<double>(raw.images.size()));
  const double hog_rms = std::sqrt((raw.hogs.colwise() - pd.hog_mean).squaredNorm() / static_cast<double>(raw.hogs.size()));
  pd.image_scale = img_rms > 1e-12 ? cfg.target_rms / img_rms : 1.0;
  pd.hog_scale = hog_rms > 1e-12 ? cfg.target_rms / hog_rms : 1.0;

  const Eigen::MatrixXd stacked = stack_normalized(pd, raw.images, raw.hogs);
  pd.lambda = cfg.lambda > 0 ? cfg.lambda : default_paired_lambda(stacked.rows());
  auto learned = learn_dictionary(stacked, cfg.k, pd.lambda, cfg.epochs, cfg.seed, cfg.threads);
  Eigen::MatrixXd D = std::move(learned.dictionary.matrix);
  detail::round_to_f32(D);
  pd.u = Dictionary(D.topRows(raw.images.rows()));
  pd.v = Dictionary(D.bottomRows(raw.hogs.rows()));
  pd.objectives = std::move(learned.objectives);
  return pd;
}

// ---------------------------------------------------------------------------

struct PairedResult {
  Image image;     // display-rescaled
  Image raw;       // averaged decoded patches, ring filled, normalization undone
  Image coverage;  // windows covering each pixel (0 on the uncovered ring)
};

class PairedInverter {
 public:
  explicit PairedInverter(PairedDictionary pd) : pd_(std::move(pd)), coder_(pd_.v) { pd_.validate(); }

  const PairedDictionary& model() const { return pd_; }

  Eigen::VectorXd normalize_hog(const Eigen::VectorXd& y) const { return (y - pd_.hog_mean) * pd_.hog_scale; }

  SparseCode code(const Eigen::VectorXd& y_normalized) const {
    if (y_normalized.size() != pd_.v.dim())
      throw DimensionError("invert_patch: HOG patch has " + std::to_string(y_normalized.size()) +
                           " values, expected " + std::to_string(pd_.v.dim()));
    return coder_.code(y_normalized, pd_.lambda);
  }

  /// Decoded patch in normalized image units.
  Eigen::VectorXd invert_normalized(const Eigen::VectorXd& y_normalized) const {
    return pd_.u.matrix * code(y_normalized).coefficients;
  }

  /// Zero-mean image patch (intensity units) for a raw HOG patch vector.
  Eigen::VectorXd invert_patch(const Eigen::VectorXd& y_patch) const {
    if (y_patch.size() != pd_.v.dim())
      throw DimensionError("invert_patch: HOG patch has " + std::to_string(y_patch.size()) +
                           " values, expected " + std::to_string(pd_.v.dim()));
    return invert_normalized(normalize_hog(y_patch)) / pd_.image_scale;
  }

  PairedResult invert(const HogDescriptor& y, int threads = 1) const {
    const int P = pd_.patch_cells, cs = pd_.hog.cell_size;
    if (y.depth != pd_.hog.depth() || y.cell_size != cs)
      throw DimensionError("paired invert: descriptor depth/cell size does not match the model");
    if (y.cells_x < P || y.cells_y < P)
      throw DimensionError("paired invert: descriptor " + std::to_string(y.cells_x) + "x" +
                           std::to_string(y.cells_y) + " is smaller than one " + std::to_string(P) + "x" +
                           std::to_string(P) + " patch");
    const int nx = y.cells_x - P + 1, ny = y.cells_y - P + 1;
    std::vector<Eigen::VectorXd> patches(static_cast<std::size_t>(nx) * ny);
    parallel_for(patches.size(), threads, [&](std::size_t w) {
      const int wx = static_cast<int>(w % nx), wy = static_cast<int>(w / nx);
      patches[w] = invert_patch(hog_patch(y, wx, wy, P));
    });

    const int side = pd_.patch_pixels(), C = pd_.channels;
    PairedResult r;
    r.raw = Image(y.pixel_width(), y.pixel_height(), C);
    r.coverage = Image(y.pixel_width(), y.pixel_height(), 1);
    for (std::size_t w = 0; w < patches.size(); ++w) {
      const int x0 = cs * (static_cast<int>(w % nx) + 1), y0 = cs * (static_cast<int>(w / nx) + 1);
      Eigen::Index k = 0;
      for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
          for (int c = 0; c < C; ++c) r.raw.at(x0 + px, y0 + py, c) += patches[w](k++);
          r.coverage.at(x0 + px, y0 + py) += 1;
        }
    }
    for (int py = cs; py < r.raw.height - cs; ++py)
      for (int px = cs; px < r.raw.width - cs; ++px)
        for (int c = 0; c < C; ++c) r.raw.at(px, py, c) /= r.coverage.at(px, py);
    r.raw = crop(crop(r.raw, cs, cs, r.raw.width - 2 * cs, r.raw.height - 2 * cs), -cs, -cs, r.raw.width, r.raw.height);
    r.image = display_rescale(r.raw);
    return r;
  }

 private:
  PairedDictionary pd_;
  SparseCoder coder_;
};

inline PairedResult paired_invert(const PairedDictionary& pd, const HogDescriptor& y, int threads = 1) {
  return PairedInverter(pd).invert(y, threads);
}

// ---------------------------------------------------------------------------

inline Container to_container(const PairedDictionary& pd) {
  Container c;
  const json cfg = {{"hog", {{"cell_size", pd.hog.cell_size},
                             {"orientations", pd.hog.orientations},
                             {"truncation", pd.hog.truncation}}},
                    {"patch_cells", pd.patch_cells},
                    {"channels", pd.channels},
                    {"lambda", pd.lambda},
                    {"atoms", pd.atoms()},
                    {"normalization", pd.normalization}};
  c.metadata = {{"type", "paired_dictionary"},
                {"config", cfg},
                {"config_hash", config_hash(cfg)},
                {"image_scale", pd.image_scale},
                {"hog_scale", pd.hog_scale},
                {"objectives", pd.objectives}};
  c.add("u", DType::f32, {pd.u.dim(), pd.u.atoms()}, std::span(pd.u.matrix.data(), pd.u.matrix.size()));
  c.add("v", DType::f32, {pd.v.dim(), pd.v.atoms()}, std::span(pd.v.matrix.data(), pd.v.matrix.size()));
  c.add("hog_mean", DType::f64, {pd.hog_mean.size()}, std::span(pd.hog_mean.data(), pd.hog_mean.size()));
  return c;
}

inline PairedDictionary paired_from_container(const Container& c) {
  if (c.type() != "paired_dictionary")
    throw CorruptError("expected a paired_dictionary container, found '" + c.type() + "'");
  PairedDictionary pd;
  try {
    const auto& cfg = c.metadata.at("config");
    pd.hog.cell_size = cfg.at("hog").at("cell_size").get<int>();
    pd.hog.orientations = cfg.at("hog").at("orientations").get<int>();
    pd.hog.truncation = cfg.at("hog").at("truncation").get<double>();
    pd.patch_cells = cfg.at("patch_cells").get<int>();
    pd.channels = cfg.at("channels").get<int>();
    pd.lambda = cfg.at("lambda").get<double>();
    pd.normalization = cfg.at("normalization").get<std::string>();
    pd.image_scale = c.metadata.at("image_scale").get<double>();
    pd.hog_scale = c.metadata.at("hog_scale").get<double>();
    pd.objectives = c.metadata.value("objectives", std::vector<double>{});
  } catch (const json::exception& e) {
    throw CorruptError(std::string("paired dictionary metadata: ") + e.what());
  }
  if (pd.normalization != kPairedNormalization)
    throw CorruptError("paired dictionary: unknown normalization '" + pd.normalization + "'");
  auto mat = [&](const char* name) {
    const auto& t = c.get(name);
    if (t.shape.size() != 2) throw CorruptError(std::string(name) + " is not a matrix");
    return Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(t.values.data(), t.shape[0], t.shape[1]));
  };
  pd.u = Dictionary(mat("u"));
  pd.v = Dictionary(mat("v"));
  const auto& hm = c.get("hog_mean");
  pd.hog_mean = Eigen::Map<const Eigen::VectorXd>(hm.values.data(), static_cast<Eigen::Index>(hm.values.size()));
  pd.validate();
  return pd;
}

}  // namespace fvtb
