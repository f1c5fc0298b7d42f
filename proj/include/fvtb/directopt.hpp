#pragma once

// Inversion by derivative-free coordinate descent on the coefficients of an
// image basis: x = mean + U rho, minimizing ||phi(x) - y||^2.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/gaussian.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/log.hpp"
#include "fvtb/parallel.hpp"

namespace fvtb {

struct DirectConfig {
  int restarts = 3;
  int sweeps = 30;
  std::vector<double> step_grid = {1.0, 0.5, 0.25, 0.1};
  std::uint64_t seed = 0;
  double init_scale = 1.0;    // std of the random initial coefficients
  double initial_step = 2.0;  // starting per-coordinate step scale
  double min_step = 1e-3;     // coordinates whose scale falls below this are frozen
  int threads = 1;

  void validate() const {
    if (restarts < 1) throw ConfigError("direct: restarts must be >= 1");
    if (sweeps < 0) throw ConfigError("direct: sweeps must be >= 0");
    if (step_grid.empty()) throw ConfigError("direct: step grid is empty");
    if (init_scale < 0 || !(initial_step > 0)) throw ConfigError("direct: scales must be positive");
  }
};

struct DirectRestart {
  double objective = 0;
  std::vector<double> trace;  // objective at start and after each sweep
  Eigen::VectorXd rho;
};

struct DirectResult {
  Image image;  // display-rescaled
  Image raw;    // mean + U rho
  double objective = 0;
  int best_restart = 0;
  std::vector<DirectRestart> restarts;
};

namespace detail {

inline double feature_distance2(const Image& x, const HogDescriptor& y, const HogConfig& cfg) {
  const HogDescriptor h = compute_hog(x, cfg);
  double s = 0;
  for (std::size_t i = 0; i < h.data.size(); ++i) {
    const double d = h.data[i] - y.data[i];
    s += d * d;
  }
  if (!std::isfinite(s)) throw NumericalError("direct: non-finite objective");
  return s;
}

}  // namespace detail

/// Coordinate descent with random restarts. `mean` is the additive base
/// image (pixel count must equal basis.dim()).
inline DirectResult direct_invert(const ImageBasis& basis, const Eigen::VectorXd& mean, const HogDescriptor& y,
                                  const DirectConfig& cfg = {}, const HogConfig& hog = {}) {
  cfg.validate();
  if (basis.width != y.pixel_width() || basis.height != y.pixel_height() || basis.dim() != mean.size())
    throw DimensionError("direct: basis raster " + std::to_string(basis.width) + "x" + std::to_string(basis.height) +
                         " does not match descriptor raster " + std::to_string(y.pixel_width()) + "x" +
                         std::to_string(y.pixel_height()));
  if (y.depth != hog.depth()) throw DimensionError("direct: descriptor depth does not match the HOG config");
  if (!mean.allFinite() || !basis.vectors.allFinite()) throw NumericalError("direct: non-finite mean or basis");

  const Eigen::Index K = basis.count();
  // Nonzero support of each basis vector, for cheap image updates.
  std::vector<std::vector<std::pair<Eigen::Index, double>>> support(static_cast<std::size_t>(K));
  for (Eigen::Index j = 0; j < K; ++j)
    for (Eigen::Index p = 0; p < basis.dim(); ++p)
      if (basis.vectors(p, j) != 0) support[j].emplace_back(p, basis.vectors(p, j));

  DirectResult result;
  result.restarts.resize(static_cast<std::size_t>(cfg.restarts));
  parallel_for(result.restarts.size(), cfg.threads, [&](std::size_t r) {
    std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(r)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal;
    DirectRestart& out = result.restarts[r];
    out.rho = Eigen::VectorXd::Zero(K);
    if (cfg.init_scale > 0)
      for (auto& v : out.rho) v = cfg.init_scale * normal(rng);

    Image x(basis.width, basis.height, 1);
    const Eigen::VectorXd x0 = mean + basis.vectors * out.rho;
    std::copy(x0.data(), x0.data() + x0.size(), x.data.begin());
    double f = detail::feature_distance2(x, y, hog);
    out.trace.push_back(f);

    std::vector<double> step(static_cast<std::size_t>(K), cfg.initial_step);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Image cand = x;
    for (int sweep = 0; sweep < cfg.sweeps; ++sweep) {
      std::shuffle(order.begin(), order.end(), rng);
      bool live = false;
      for (Eigen::Index j : order) {
        if (step[j] < cfg.min_step) continue;
        live = true;
        double best_f = f, best_delta = 0;
        for (double g : cfg.step_grid)
          for (double sgn : {1.0, -1.0}) {
            const double delta = sgn * g * step[j];
            for (const auto& [p, w] : support[j]) cand.data[p] = x.data[p] + delta * w;
            const double fc = detail::feature_distance2(cand, y, hog);
            if (fc < best_f) {
              best_f = fc;
              best_delta = delta;
            }
          }
        if (best_delta != 0) {
          out.rho(j) += best_delta;
          for (const auto& [p, w] : support[j]) x.data[p] += best_delta * w;
          f = best_f;
        } else {
          step[j] *= 0.5;
        }
        for (const auto& [p, w] : support[j]) cand.data[p] = x.data[p];
      }
      out.trace.push_back(f);
      if (!live) break;
    }
    out.objective = f;
  });

  for (std::size_t r = 1; r < result.restarts.size(); ++r)
    if (result.restarts[r].objective < result.restarts[result.best_restart].objective)
      result.best_restart = static_cast<int>(r);
  const DirectRestart& best = result.restarts[result.best_restart];
  result.objective = best.objective;
  result.raw = Image(basis.width, basis.height, 1);
  const Eigen::VectorXd xr = mean + basis.vectors * best.rho;
  std::copy(xr.data(), xr.data() + xr.size(), result.raw.data.begin());
  result.image = display_rescale(result.raw);
  return result;
}

/// Basis and mean for a descriptor geometry from the stationary model.
inline std::pair<ImageBasis, Eigen::VectorXd> direct_basis(const StationaryModel& model, int cells_x, int cells_y,
                                                           int patch_pixels = 16, int k_per_scale = 24,
                                                           int stride = 8) {
  const int w = model.hog.pixels_for(cells_x), h = model.hog.pixels_for(cells_y);
  ImageBasis b = image_eigenbasis(model, patch_pixels, k_per_scale, w, h, stride);
  return {std::move(b), Eigen::VectorXd::Constant(static_cast<Eigen::Index>(w) * h, model.mu_pixel)};
}

}  // namespace fvtb
