#pragma once

// Exemplar LDA baseline: whiten a descriptor into a linear detector, score it
// over a corpus pyramid, and average the top detections in pixel space.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/gaussian.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/log.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/store.hpp"

namespace fvtb {

struct Detection {
  std::size_t image_id = 0;
  int x = 0, y = 0;           // window origin in the scaled image, pixels
  int width = 0, height = 0;  // window size in the scaled image, pixels
  double scale = 1.0;
  double score = 0.0;

  // Window rectangle in source-image coordinates.
  double src_x() const { return x / scale; }
  double src_y() const { return y / scale; }
  double src_w() const { return width / scale; }
  double src_h() const { return height / scale; }
};

/// Strict total order, best first: score, then image, x, y, larger scale.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.scale > b.scale;
}

/// Intersection over union of the source-image rectangles.
inline double detection_iou(const Detection& a, const Detection& b) {
  const double ix = std::max(0.0, std::min(a.src_x() + a.src_w(), b.src_x() + b.src_w()) -
                                      std::max(a.src_x(), b.src_x()));
  const double iy = std::max(0.0, std::min(a.src_y() + a.src_h(), b.src_y() + b.src_h()) -
                                      std::max(a.src_y(), b.src_y()));
  const double inter = ix * iy;
  const double uni = a.src_w() * a.src_h() + b.src_w() * b.src_h() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Greedy non-max suppression in detection_before order; stops once
/// `keep_max` detections survive.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_threshold,
                                                  std::size_t keep_max = SIZE_MAX) {
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    if (kept.size() >= keep_max) break;
    bool ok = true;
    for (const auto& k : kept)
      if (detection_iou(d, k) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(d);
  }
  return kept;
}

/// Bounded heap keeping the best k detections.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}

  void push(const Detection& d) {
    if (k_ == 0) return;
    if (heap_.size() < k_) {
      heap_.push_back(d);
      std::push_heap(heap_.begin(), heap_.end(), detection_before);
    } else if (detection_before(d, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), detection_before);
      heap_.back() = d;
      std::push_heap(heap_.begin(), heap_.end(), detection_before);
    }
  }

  std::vector<Detection> sorted() const {
    auto out = heap_;
    std::sort(out.begin(), out.end(), detection_before);
    return out;
  }

 private:
  std::size_t k_;
  std::vector<Detection> heap_;  // worst element at front
};

struct EldaTemplate {
  HogDescriptor weights;

  int cells_x() const { return weights.cells_x; }
  int cells_y() const { return weights.cells_y; }
};

namespace detail {

inline EldaTemplate solve_template(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& sigma_yy,
                                   const Eigen::VectorXd& mu_y, const HogDescriptor& y) {
  const Eigen::VectorXd r =
      Eigen::Map<const Eigen::VectorXd>(y.data.data(), static_cast<Eigen::Index>(y.data.size())) - mu_y;
  if (!r.allFinite()) throw NumericalError("make_template: descriptor has non-finite entries");
  const Eigen::VectorXd w = llt.solve(r);
  if (!w.allFinite()) throw NumericalError("make_template: solve produced non-finite weights");
  const double res = (sigma_yy * w - r).lpNorm<Eigen::Infinity>();
  if (res > 1e-6 * r.lpNorm<Eigen::Infinity>())
    throw NumericalError("make_template: residual " + std::to_string(res) + " too large");
  EldaTemplate t;
  t.weights = HogDescriptor(y.cells_x, y.cells_y, y.depth, y.cell_size);
  std::copy(w.data(), w.data() + w.size(), t.weights.data.begin());
  return t;
}

inline void check_template_geometry(const MaterializedGaussian& g, const HogDescriptor& y) {
  if (y.cells_x != g.width_cells || y.cells_y != g.height_cells || y.depth != g.depth)
    throw DimensionError("elda: descriptor " + std::to_string(y.cells_x) + "x" + std::to_string(y.cells_y) +
                         "x" + std::to_string(y.depth) + " does not match the Gaussian's " +
                         std::to_string(g.width_cells) + "x" + std::to_string(g.height_cells) + "x" +
                         std::to_string(g.depth));
}

}  // namespace detail

/// w = sigma_yy^-1 (y - mu_y) via Cholesky.
inline EldaTemplate make_template(const MaterializedGaussian& g, const HogDescriptor& y) {
  detail::check_template_geometry(g, y);
  Eigen::LLT<Eigen::MatrixXd> llt(g.sigma_yy);
  if (llt.info() != Eigen::Success) throw NumericalError("make_template: sigma_yy is not positive definite");
  return detail::solve_template(llt, g.sigma_yy, g.mu_y, y);
}

/// Template factory over a stationary model; one factorization per geometry.
class EldaModel {
 public:
  explicit EldaModel(std::shared_ptr<const StationaryModel> model, double lambda_prior = -1)
      : model_(std::move(model)), lambda_(lambda_prior < 0 ? model_->default_lambda() : lambda_prior) {}

  const StationaryModel& model() const { return *model_; }
  double lambda() const { return lambda_; }

  EldaTemplate make_template(const HogDescriptor& y) const {
    const auto& e = entry(y.cells_x, y.cells_y);
    detail::check_template_geometry(e.g, y);
    return detail::solve_template(e.llt, e.g.sigma_yy, e.g.mu_y, y);
  }

 private:
  struct Entry {
    MaterializedGaussian g;
    Eigen::LLT<Eigen::MatrixXd> llt;
  };

  const Entry& entry(int wc, int hc) const {
    std::lock_guard lock(mu_);
    auto& slot = cache_[{wc, hc}];
    if (!slot) {
      auto e = std::make_unique<Entry>();
      e->g = materialize(*model_, wc, hc, lambda_);
      e->llt.compute(e->g.sigma_yy);
      if (e->llt.info() != Eigen::Success) throw NumericalError("elda: sigma_yy is not positive definite");
      slot = std::move(e);
    }
    return *slot;
  }

  std::shared_ptr<const StationaryModel> model_;
  double lambda_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, std::unique_ptr<Entry>> cache_;
};

struct EldaConfig {
  int k = 100;
  int stride_cells = 1;
  int levels_per_octave = 4;
  std::vector<double> scales;  // empty: geometric ladder from 1.0
  double nms_iou = 0.5;
  int threads = 1;

  void validate() const {
    if (k < 1) throw ConfigError("elda: k must be >= 1");
    if (stride_cells < 1) throw ConfigError("elda: stride_cells must be >= 1");
    if (levels_per_octave < 1) throw ConfigError("elda: levels_per_octave must be >= 1");
    for (double s : scales)
      if (!(s > 0)) throw ConfigError("elda: scales must be positive");
  }
};

inline std::pair<int, int> scaled_size(int w, int h, double s) {
  return {std::max(1, static_cast<int>(std::lround(w * s))), std::max(1, static_cast<int>(std::lround(h * s)))};
}

/// 2^(-i/levels) for i = 0, 1, ... while the scaled image still holds a
/// min_cells_x x min_cells_y descriptor window.
inline std::vector<double> scale_ladder(int w, int h, int min_cells_x, int min_cells_y, int cell_size,
                                        int levels_per_octave = 4) {
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double s = std::pow(2.0, -static_cast<double>(i) / levels_per_octave);
    const auto [sw, sh] = scaled_size(w, h, s);
    if (sw / cell_size - 2 < min_cells_x || sh / cell_size - 2 < min_cells_y) break;
    out.push_back(s);
  }
  return out;
}

/// Scores of every stride-aligned window of `h` against `t`.
inline std::vector<Detection> score_windows(const EldaTemplate& t, const HogDescriptor& h, std::size_t image_id,
                                            double scale, int stride_cells = 1) {
  const auto& w = t.weights;
  if (w.depth != h.depth) throw DimensionError("score_windows: template depth differs from the descriptor");
  std::vector<Detection> out;
  if (h.cells_x < w.cells_x || h.cells_y < w.cells_y) return out;
  const Eigen::Index row = static_cast<Eigen::Index>(w.cells_x) * w.depth;
  const int cs = h.cell_size;
  for (int cy = 0; cy + w.cells_y <= h.cells_y; cy += stride_cells)
    for (int cx = 0; cx + w.cells_x <= h.cells_x; cx += stride_cells) {
      double s = 0;
      for (int r = 0; r < w.cells_y; ++r) {
        const double* hp = h.data.data() + (static_cast<std::size_t>(cy + r) * h.cells_x + cx) * h.depth;
        const double* wp = w.data.data() + static_cast<std::size_t>(r) * row;
        s += Eigen::Map<const Eigen::VectorXd>(hp, row).dot(Eigen::Map<const Eigen::VectorXd>(wp, row));
      }
      Detection d;
      d.image_id = image_id;
      d.x = cx * cs;
      d.y = cy * cs;
      d.width = (w.cells_x + 2) * cs;
      d.height = (w.cells_y + 2) * cs;
      d.scale = scale;
      d.score = s;
      out.push_back(d);
    }
  return out;
}

/// Luminance HOG pyramid for every corpus image, computed once and shared by
/// all queries.
class EldaDatabase {
 public:
  struct Level {
    double scale;
    HogDescriptor hog;
  };

  EldaDatabase() = default;

  /// Levels go down to the smallest scale holding a min_cells window; an
  /// explicit `scales` list replaces the ladder.
  static EldaDatabase build(const ImageSource& source, const HogConfig& hog = {}, int min_cells = 1,
                            int levels_per_octave = 4, std::vector<double> scales = {}, int threads = 1) {
    if (source.empty()) throw EmptyCorpusError("elda: empty corpus");
    EldaDatabase db;
    db.source_ = source;
    db.hog_ = hog;
    db.pyramids_.resize(source.size());
    parallel_for(source.size(), threads, [&](std::size_t i) {
      const Image gray = to_luminance(source.load(i));
      const auto ladder = scales.empty() ? scale_ladder(gray.width, gray.height, min_cells, min_cells,
                                                        hog.cell_size, levels_per_octave)
                                         : scales;
      for (double s : ladder) {
        const auto [sw, sh] = scaled_size(gray.width, gray.height, s);
        if (sw / hog.cell_size - 2 < min_cells || sh / hog.cell_size - 2 < min_cells) continue;
        db.pyramids_[i].push_back({s, compute_hog(resize_bilinear(gray, sw, sh), hog)});
      }
    });
    return db;
  }

  std::size_t size() const { return pyramids_.size(); }
  const ImageSource& source() const { return source_; }
  const HogConfig& hog() const { return hog_; }
  const std::vector<Level>& levels(std::size_t i) const { return pyramids_.at(i); }

  /// Every window of image i at every level.
  std::vector<Detection> all_windows(const EldaTemplate& t, std::size_t i, int stride_cells = 1) const {
    std::vector<Detection> out;
    for (const auto& lv : pyramids_.at(i)) {
      auto s = score_windows(t, lv.hog, i, lv.scale, stride_cells);
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  /// Top-k detections after per-image NMS. `use` masks images out when given.
  std::vector<Detection> top_detections(const EldaTemplate& t, const EldaConfig& cfg,
                                        const std::vector<bool>* use = nullptr) const {
    cfg.validate();
    const std::size_t k = static_cast<std::size_t>(cfg.k);
    std::vector<std::vector<Detection>> per_image(size());
    parallel_for(size(), cfg.threads, [&](std::size_t i) {
      if (use && !(*use)[i]) return;
      per_image[i] = non_max_suppression(all_windows(t, i, cfg.stride_cells), cfg.nms_iou, k);
    });
    TopK heap(k);
    for (const auto& v : per_image)
      for (const auto& d : v) heap.push(d);
    return heap.sorted();
  }

 private:
  ImageSource source_;
  HogConfig hog_;
  std::vector<std::vector<Level>> pyramids_;
};

/// All window scores over a corpus. Empty `scales` uses the default ladder.
inline std::vector<Detection> sliding_scores(const EldaTemplate& t, const ImageSource& source,
                                             const std::vector<double>& scales = {}, int stride_cells = 1,
                                             const HogConfig& hog = {}) {
  const auto db = EldaDatabase::build(source, hog, std::max(t.cells_x(), t.cells_y()), 4, scales);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < db.size(); ++i) {
    auto w = db.all_windows(t, i, stride_cells);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

/// Pixels of a detection window, taken from the colour image resized to the
/// detection's scale.
inline Image detection_crop(const Image& image, const Detection& d) {
  const auto [sw, sh] = scaled_size(image.width, image.height, d.scale);
  if (d.x < 0 || d.y < 0 || d.x + d.width > sw || d.y + d.height > sh)
    throw GeometryError("detection window lies outside its scaled image");
  return crop(resize_bilinear(image, sw, sh), d.x, d.y, d.width, d.height);
}

struct EldaResult {
  Image image;  // display-rescaled mean
  Image raw;
  std::vector<Detection> detections;
};

/// Mean of the detection crops in the given order.
inline Image average_crops(const ImageSource& source, const std::vector<Detection>& dets) {
  if (dets.empty()) throw EmptyCorpusError("elda: no detections to average");
  std::map<std::size_t, Image> cache;
  std::vector<Image> crops;
  int channels = 1;
  for (const auto& d : dets) {
    auto it = cache.find(d.image_id);
    if (it == cache.end()) it = cache.emplace(d.image_id, source.load(d.image_id)).first;
    crops.push_back(detection_crop(it->second, d));
    channels = std::max(channels, crops.back().channels);
  }
  Image mean(dets.front().width, dets.front().height, channels);
  for (const auto& c : crops) {
    if (c.width != mean.width || c.height != mean.height) throw DimensionError("elda: crop geometry differs");
    for (int y = 0; y < c.height; ++y)
      for (int x = 0; x < c.width; ++x)
        for (int k = 0; k < channels; ++k) mean.at(x, y, k) += c.at(x, y, c.channels == 1 ? 0 : k);
  }
  for (double& v : mean.data) v /= static_cast<double>(crops.size());
  return mean;
}

inline EldaResult elda_invert(const EldaTemplate& t, const EldaDatabase& db, const EldaConfig& cfg = {},
                              const std::vector<bool>* use = nullptr) {
  EldaResult r;
  r.detections = db.top_detections(t, cfg, use);
  if (r.detections.empty()) throw EmptyCorpusError("elda: no detections in the corpus");
  if (r.detections.size() < static_cast<std::size_t>(cfg.k))
    log::warn("elda: only " + std::to_string(r.detections.size()) + " detections survive, wanted " +
              std::to_string(cfg.k));
  r.raw = average_crops(db.source(), r.detections);
  r.image = display_rescale(r.raw);
  return r;
}

inline EldaResult elda_invert(const MaterializedGaussian& g, const HogDescriptor& y, const ImageSource& corpus,
                              const EldaConfig& cfg = {}, const HogConfig& hog = {}) {
  cfg.validate();
  const auto t = make_template(g, y);
  const auto db = EldaDatabase::build(corpus, hog, std::max(t.cells_x(), t.cells_y()), cfg.levels_per_octave,
                                      cfg.scales, cfg.threads);
  return elda_invert(t, db, cfg);
}

/// Mask keeping corpus images with no annotation of `category`.
inline std::vector<bool> exclude_category(const ImageSource& source, const std::vector<Annotation>& annotations,
                                          const std::string& category) {
  std::vector<bool> use(source.size(), true);
  if (category.empty()) return use;
  for (std::size_t i = 0; i < source.size(); ++i)
    for (const auto& a : annotations)
      if (a.category == category && a.image == source.entry(i).path) use[i] = false;
  return use;
}

inline void write_detections_jsonl(const std::vector<Detection>& dets, const ImageSource& source,
                                   const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write detections: " + path.string());
  for (const auto& d : dets) {
    const json j = {{"image", source.entry(d.image_id).path}, {"image_id", d.image_id},
                    {"x", d.src_x()},  {"y", d.src_y()},
                    {"w", d.src_w()},  {"h", d.src_h()},
                    {"scale", d.scale}, {"score", d.score}};
    out << j.dump() << '\n';
  }
}

}  // namespace fvtb
