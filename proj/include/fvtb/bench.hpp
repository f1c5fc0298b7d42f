#pragma once

// Evaluation harness: NCC scoring, per-category benchmark tables, template
// size sweeps.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fvtb/directopt.hpp"
#include "fvtb/elda.hpp"
#include "fvtb/errors.hpp"
#include "fvtb/gaussian.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/log.hpp"
#include "fvtb/paireddict.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/store.hpp"

namespace fvtb {

/// Normalized cross correlation of the luminance of two images. Zero when
/// either has no variance.
inline double ncc(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw DimensionError("ncc: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                         std::to_string(b.width) + "x" + std::to_string(b.height));
  const Image la = to_luminance(a), lb = to_luminance(b);
  const auto n = static_cast<Eigen::Index>(la.data.size());
  if (n == 0) return 0.0;
  const Eigen::ArrayXd x = Eigen::Map<const Eigen::ArrayXd>(la.data.data(), n);
  const Eigen::ArrayXd y = Eigen::Map<const Eigen::ArrayXd>(lb.data.data(), n);
  const Eigen::ArrayXd xc = x - x.mean(), yc = y - y.mean();
  const double sxx = (xc * xc).sum(), syy = (yc * yc).sum();
  if (!(sxx > 0) || !(syy > 0)) return 0.0;
  return std::clamp((xc * yc).sum() / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// ||hog(x_hat) - y||_2
inline double feature_error(const Image& x_hat, const HogDescriptor& y, const HogConfig& hog = {}) {
  if (x_hat.width / hog.cell_size - 2 != y.cells_x || x_hat.height / hog.cell_size - 2 != y.cells_y)
    throw DimensionError("feature_error: image " + std::to_string(x_hat.width) + "x" +
                         std::to_string(x_hat.height) + " does not produce a " + std::to_string(y.cells_x) + "x" +
                         std::to_string(y.cells_y) + " descriptor");
  const HogDescriptor h = compute_hog(x_hat, hog);
  if (h.depth != y.depth) throw DimensionError("feature_error: descriptor depth differs");
  double s = 0;
  for (std::size_t i = 0; i < h.data.size(); ++i) s += (h.data[i] - y.data[i]) * (h.data[i] - y.data[i]);
  return std::sqrt(s);
}

/// Variance of the 4-neighbour Laplacian over interior pixels (luminance).
inline double laplacian_variance(const Image& img) {
  const Image g = to_luminance(img);
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (int y = 1; y + 1 < g.height; ++y)
    for (int x = 1; x + 1 < g.width; ++x) {
      const double l = 4 * g.at(x, y) - g.at(x - 1, y) - g.at(x + 1, y) - g.at(x, y - 1) - g.at(x, y + 1);
      s += l;
      s2 += l * l;
      ++n;
    }
  if (n == 0) return 0.0;
  const double m = s / n;
  return s2 / n - m * m;
}

/// Box with a context pad, edge-replicated where it leaves the image, then
/// resized bilinearly to width x height.
inline Image benchmark_crop(const Image& image, const Annotation& a, int pad, int width, int height) {
  return resize_bilinear(crop(image, a.x - pad, a.y - pad, a.w + 2 * pad, a.h + 2 * pad), width, height);
}

inline const std::vector<std::string>& known_algorithms() {
  static const std::vector<std::string> names = {"pair", "ridge", "elda", "direct", "passthrough"};
  return names;
}

struct BenchConfig {
  int cells_x = 10;
  int cells_y = 10;
  int pad = 16;
  std::uint64_t seed = 0;
  int threads = 1;
  HogConfig hog;
  EldaConfig elda;
  DirectConfig direct;
  int direct_patch = 16;
  int direct_k = 24;
  bool exclude_category = true;  // ELDA database skips images of the patch's category
  bool strict = true;            // false: failing patches are logged, counted and skipped
};

/// Trained models and the inverters built from them. Any may be absent; asking
/// for an algorithm without its model is a ConfigError.
class Algorithms {
 public:
  Algorithms() = default;

  void set_paired(std::shared_ptr<const PairedDictionary> pd) {
    paired_ = std::make_shared<PairedInverter>(*pd);
    paired_model_ = std::move(pd);
  }
  void set_gaussian(std::shared_ptr<const StationaryModel> m, double lambda_prior = -1) {
    gaussian_ = m;
    ridge_ = std::make_shared<RidgeModel>(m, lambda_prior);
    elda_ = std::make_shared<EldaModel>(m, lambda_prior);
  }
  void set_elda_database(std::shared_ptr<const EldaDatabase> db, std::vector<Annotation> annotations = {}) {
    elda_db_ = std::move(db);
    elda_annotations_ = std::move(annotations);
  }

  const PairedDictionary* paired_model() const { return paired_model_.get(); }
  const StationaryModel* gaussian_model() const { return gaussian_.get(); }

  /// Throws ConfigError naming the first algorithm that cannot run.
  void require(const std::vector<std::string>& names) const {
    for (const auto& n : names) {
      if (std::find(known_algorithms().begin(), known_algorithms().end(), n) == known_algorithms().end())
        throw ConfigError("unknown algorithm '" + n + "'");
      if (n == "pair" && !paired_) throw ConfigError("algorithm 'pair' needs a paired dictionary model");
      if ((n == "ridge" || n == "direct") && !gaussian_)
        throw ConfigError("algorithm '" + n + "' needs a Gaussian model");
      if (n == "elda" && (!elda_ || !elda_db_))
        throw ConfigError("algorithm 'elda' needs a Gaussian model and a corpus database");
    }
  }

  /// Display-range inversion of y. `original` is only read by passthrough.
  Image invert(const std::string& name, const HogDescriptor& y, const Image& original, std::uint64_t seed,
               const std::string& category, const BenchConfig& cfg) const {
    require({name});
    if (name == "passthrough") return original;
    if (name == "pair") return paired_->invert(y).image;
    if (name == "ridge") return ridge_->invert(y).image;
    if (name == "elda") {
      const auto t = elda_->make_template(y);
      std::vector<bool> use;
      if (cfg.exclude_category) use = exclude_category(elda_db_->source(), elda_annotations_, category);
      EldaConfig ec = cfg.elda;
      ec.threads = 1;
      return elda_invert(t, *elda_db_, ec, use.empty() ? nullptr : &use).image;
    }
    const auto& basis = direct_basis_for(y.cells_x, y.cells_y, cfg);
    DirectConfig dc = cfg.direct;
    dc.seed = seed;
    dc.threads = 1;
    return direct_invert(basis.first, basis.second, y, dc, cfg.hog).image;
  }

 private:
  const std::pair<ImageBasis, Eigen::VectorXd>& direct_basis_for(int cx, int cy, const BenchConfig& cfg) const {
    std::lock_guard lock(mu_);
    auto& slot = bases_[{cx, cy}];
    if (!slot)
      slot = std::make_shared<std::pair<ImageBasis, Eigen::VectorXd>>(
          direct_basis(*gaussian_, cx, cy, cfg.direct_patch, cfg.direct_k));
    return *slot;
  }

  std::shared_ptr<const PairedDictionary> paired_model_;
  std::shared_ptr<const PairedInverter> paired_;
  std::shared_ptr<const StationaryModel> gaussian_;
  std::shared_ptr<const RidgeModel> ridge_;
  std::shared_ptr<const EldaModel> elda_;
  std::shared_ptr<const EldaDatabase> elda_db_;
  std::vector<Annotation> elda_annotations_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, std::shared_ptr<std::pair<ImageBasis, Eigen::VectorXd>>> bases_;
};

struct PatchResult {
  std::size_t index = 0;  // annotation index
  std::string image;
  std::string category;
  std::string algorithm;
  int cells_x = 0, cells_y = 0;
  double ncc = 0;
  double feature_error = 0;
  double baseline_error = 0;  // feature error of the mean-intensity image
  double laplacian = 0;
};

struct ReportRow {
  std::string category;  // "all" for the aggregate over categories
  std::string algorithm;
  double mean = 0;
  double std = 0;
  std::size_t count = 0;
};

struct BenchmarkReport {
  std::vector<PatchResult> patches;
  std::vector<ReportRow> rows;
  json metadata = json::object();

  const ReportRow* row(const std::string& category, const std::string& algorithm) const {
    for (const auto& r : rows)
      if (r.category == category && r.algorithm == algorithm) return &r;
    return nullptr;
  }
};

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Rows per (category, algorithm) in first-seen order, then "all" per algorithm.
inline std::vector<ReportRow> aggregate(const std::vector<PatchResult>& patches,
                                        const std::vector<std::string>& algorithms) {
  std::vector<std::string> cats;
  for (const auto& p : patches)
    if (std::find(cats.begin(), cats.end(), p.category) == cats.end()) cats.push_back(p.category);
  cats.push_back("all");
  std::vector<ReportRow> rows;
  for (const auto& c : cats)
    for (const auto& a : algorithms) {
      ReportRow r{c, a};
      double s = 0, s2 = 0;
      for (const auto& p : patches)
        if (p.algorithm == a && (c == "all" || p.category == c)) {
          s += p.ncc;
          s2 += p.ncc * p.ncc;
          ++r.count;
        }
      if (r.count == 0) continue;
      r.mean = s / r.count;
      r.std = std::sqrt(std::max(0.0, s2 / r.count - r.mean * r.mean));
      rows.push_back(r);
    }
  return rows;
}

inline Image mean_image(int w, int h, double value) {
  Image m(w, h, 1);
  std::fill(m.data.begin(), m.data.end(), value);
  return m;
}

// Loads each distinct annotated image once, as luminance.
inline std::map<std::string, Image> load_annotated(const std::filesystem::path& root,
                                                   const std::vector<Annotation>& ann) {
  std::map<std::string, Image> out;
  for (const auto& a : ann)
    if (!out.count(a.image)) {
      const auto p = root / a.image;
      if (!std::filesystem::exists(p)) throw IoError("annotated image missing: " + p.string());
      out.emplace(a.image, to_luminance(load_image(p)));
    }
  return out;
}

struct PatchJob {
  std::size_t index;
  int cells_x, cells_y;
};

inline void evaluate_one(const std::map<std::string, Image>& images, const std::vector<Annotation>& ann,
                         const PatchJob& job, const std::vector<std::string>& algorithms, const Algorithms& algos,
                         const BenchConfig& cfg, std::vector<PatchResult>& out) {
  const Annotation& a = ann[job.index];
  const int pw = cfg.hog.pixels_for(job.cells_x), ph = cfg.hog.pixels_for(job.cells_y);
  const Image original = benchmark_crop(images.at(a.image), a, cfg.pad, pw, ph);
  const HogDescriptor y = compute_hog(original, cfg.hog);
  double mean = 0;
  for (double v : original.data) mean += v;
  const double baseline = feature_error(mean_image(pw, ph, mean / original.data.size()), y, cfg.hog);
  for (const auto& name : algorithms) {
    const std::uint64_t seed = cfg.seed + job.index;
    const Image inv = algos.invert(name, y, original, seed, a.category, cfg);
    PatchResult r;
    r.index = job.index;
    r.image = a.image;
    r.category = a.category;
    r.algorithm = name;
    r.cells_x = job.cells_x;
    r.cells_y = job.cells_y;
    r.ncc = ncc(inv, original);
    r.feature_error = feature_error(inv, y, cfg.hog);
    r.baseline_error = baseline;
    r.laplacian = laplacian_variance(inv);
    out.push_back(std::move(r));
  }
}

inline std::vector<PatchResult> evaluate(const std::map<std::string, Image>& images,
                                         const std::vector<Annotation>& ann, const std::vector<PatchJob>& jobs,
                                         const std::vector<std::string>& algorithms, const Algorithms& algos,
                                         const BenchConfig& cfg, std::size_t* failures = nullptr) {
  std::vector<std::vector<PatchResult>> slots(jobs.size());
  std::vector<std::string> failed(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    if (cfg.strict) return evaluate_one(images, ann, jobs[j], algorithms, algos, cfg, slots[j]);
    try {
      evaluate_one(images, ann, jobs[j], algorithms, algos, cfg, slots[j]);
    } catch (const Error& e) {
      slots[j].clear();
      failed[j] = e.what();
      if (failed[j].empty()) failed[j] = "error";
    }
  });
  // Reported after the pool so the log order does not depend on scheduling.
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (failed[j].empty()) continue;
    log::warn("patch " + std::to_string(jobs[j].index) + " failed: " + failed[j]);
    if (failures) ++*failures;
  }
  std::vector<PatchResult> out;
  for (auto& s : slots)
    for (auto& r : s) out.push_back(std::move(r));
  return out;
}

}  // namespace detail

/// Crops every annotated box, computes its descriptor, inverts it with each
/// algorithm and scores NCC against the crop. Annotation paths resolve
/// against `root`.
inline BenchmarkReport run_benchmark(const std::filesystem::path& root, const std::vector<Annotation>& ann,
                                     const std::vector<std::string>& algorithms, const Algorithms& algos,
                                     const BenchConfig& cfg = {}) {
  if (ann.empty()) throw EmptyCorpusError("benchmark: no annotated patches");
  if (algorithms.empty()) throw ConfigError("benchmark: no algorithms requested");
  algos.require(algorithms);
  const auto images = detail::load_annotated(root, ann);
  std::vector<detail::PatchJob> jobs;
  for (std::size_t i = 0; i < ann.size(); ++i) jobs.push_back({i, cfg.cells_x, cfg.cells_y});
  BenchmarkReport rep;
  std::size_t failures = 0;
  rep.patches = detail::evaluate(images, ann, jobs, algorithms, algos, cfg, &failures);
  rep.metadata["failures"] = failures;
  rep.rows = detail::aggregate(rep.patches, algorithms);
  json ids = json::array();
  for (const auto& a : ann) ids.push_back({a.image, a.x, a.y, a.w, a.h, a.category});
  rep.metadata["corpus_id"] = config_hash(ids);
  rep.metadata["seed"] = cfg.seed;
  rep.metadata["cells"] = {cfg.cells_x, cfg.cells_y};
  rep.metadata["pad"] = cfg.pad;
  rep.metadata["algorithms"] = algorithms;
  if (algos.paired_model()) rep.metadata["paired_config_hash"] = to_container(*algos.paired_model()).metadata["config_hash"];
  if (algos.gaussian_model()) rep.metadata["gaussian_config_hash"] = to_container(*algos.gaussian_model()).metadata["config_hash"];
  return rep;
}

struct SweepSize {
  int cells_x = 0, cells_y = 0;
  double mean = 0;
  std::size_t count = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

struct SweepReport {
  std::string algorithm;
  std::vector<SweepSize> sizes;
  std::vector<PatchResult> patches;
};

/// Mean NCC per template geometry. A patch is skipped for a size whose pixel
/// raster is larger than its padded crop.
inline SweepReport size_sweep(const std::filesystem::path& root, const std::vector<Annotation>& ann,
                              const std::string& algorithm, const std::vector<std::pair<int, int>>& sizes,
                              const Algorithms& algos, const BenchConfig& cfg = {}) {
  if (ann.empty()) throw EmptyCorpusError("sweep: no annotated patches");
  if (sizes.empty()) throw ConfigError("sweep: no sizes requested");
  algos.require({algorithm});
  const auto images = detail::load_annotated(root, ann);
  SweepReport rep;
  rep.algorithm = algorithm;
  for (const auto& [cx, cy] : sizes) {
    if (cx < 1 || cy < 1) throw ConfigError("sweep: sizes must be positive");
    SweepSize s{cx, cy};
    std::vector<detail::PatchJob> jobs;
    for (std::size_t i = 0; i < ann.size(); ++i) {
      if (cfg.hog.pixels_for(cx) > ann[i].w + 2 * cfg.pad || cfg.hog.pixels_for(cy) > ann[i].h + 2 * cfg.pad) {
        ++s.skipped;
        continue;
      }
      jobs.push_back({i, cx, cy});
    }
    if (s.skipped)
      log::warn("sweep: " + std::to_string(s.skipped) + " patches too small for " + std::to_string(cx) + "x" +
                std::to_string(cy) + " cells");
    auto res = detail::evaluate(images, ann, jobs, {algorithm}, algos, cfg, &s.failed);
    s.count = res.size();
    double sum = 0;
    for (const auto& r : res) sum += r.ncc;
    s.mean = s.count ? sum / s.count : 0.0;
    rep.sizes.push_back(s);
    for (auto& r : res) rep.patches.push_back(std::move(r));
  }
  return rep;
}

inline std::string patches_csv(const std::vector<PatchResult>& patches) {
  std::ostringstream out;
  out << "index,image,category,algorithm,cells_x,cells_y,ncc,feature_error,baseline_error,laplacian_var\n";
  for (const auto& p : patches)
    out << p.index << ',' << p.image << ',' << p.category << ',' << p.algorithm << ',' << p.cells_x << ','
        << p.cells_y << ',' << detail::fmt17(p.ncc) << ',' << detail::fmt17(p.feature_error) << ','
        << detail::fmt17(p.baseline_error) << ',' << detail::fmt17(p.laplacian) << '\n';
  return out.str();
}

inline std::string report_markdown(const BenchmarkReport& rep) {
  std::ostringstream out;
  char buf[64];
  out << "| category | algorithm | mean NCC | std | count |\n|---|---|---|---|---|\n";
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%.4f | %.4f | %zu", r.mean, r.std, r.count);
    out << "| " << r.category << " | " << r.algorithm << " | " << buf << " |\n";
  }
  return out.str();
}

inline std::string sweep_markdown(const SweepReport& rep) {
  std::ostringstream out;
  char buf[64];
  out << "| cells | mean NCC | count | skipped |\n|---|---|---|---|\n";
  for (const auto& s : rep.sizes) {
    std::snprintf(buf, sizeof buf, "%dx%d | %.4f | %zu | %zu", s.cells_x, s.cells_y, s.mean, s.count, s.skipped);
    out << "| " << buf << " |\n";
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace fvtb
