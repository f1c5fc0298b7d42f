#pragma once

// Stationary joint Gaussian over pixels and HOG cells.
//
// Second moments are tied by spatial offset: pixel-pixel covariance depends on
// the pixel offset, pixel-HOG covariance on the offset from a cell's anchor
// (the top-left pixel of its histogram block), HOG-HOG covariance on the cell
// offset. Dense covariances for any template up to `max_cells` per side are
// assembled from these tables; smaller templates are marginals.

#include <fftw3.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"
#include "fvtb/log.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/store.hpp"

namespace fvtb {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct StationaryModel {
  HogConfig hog;
  int max_cells = 10;
  double mu_pixel = 0;
  Eigen::VectorXd mu_hog;
  std::vector<double> pp;  // (2*pp_radius+1)^2, indexed [dy][dx]
  std::vector<double> ph;  // ph_span()^2 * depth, indexed [dy][dx][c]
  std::vector<double> hh;  // (2*hh_radius()+1)^2 * depth^2, indexed [dy][dx][c][c']
  long long sample_count = 0;  // max_cells x max_cells window positions seen
  long long image_count = 0;

  int depth() const { return hog.depth(); }
  int pp_radius() const { return hog.cell_size * (max_cells + 2) - 1; }
  int ph_lo() const { return -hog.cell_size * max_cells; }
  int ph_hi() const { return hog.cell_size * (max_cells + 1) - 1; }
  int ph_span() const { return ph_hi() - ph_lo() + 1; }
  int hh_radius() const { return max_cells - 1; }

  void allocate() {
    const int d = depth();
    const std::size_t np = 2 * pp_radius() + 1, nh = 2 * hh_radius() + 1, nx = ph_span();
    mu_hog = Eigen::VectorXd::Zero(d);
    pp.assign(np * np, 0.0);
    ph.assign(nx * nx * d, 0.0);
    hh.assign(nh * nh * d * d, 0.0);
  }

  /// Cov(x(p), x(p + (dx, dy))).
  double pp_at(int dx, int dy) const {
    const int r = pp_radius(), n = 2 * r + 1;
    return pp[static_cast<std::size_t>(dy + r) * n + (dx + r)];
  }
  /// Cov(x(anchor(q) + (dx, dy)), y_c(q)).
  double ph_at(int dx, int dy, int c) const {
    const int lo = ph_lo(), n = ph_span();
    return ph[(static_cast<std::size_t>(dy - lo) * n + (dx - lo)) * depth() + c];
  }
  /// Cov(y_c(q), y_c'(q + (dx, dy))) as a depth x depth block, element (c, c').
  Eigen::Map<const RowMatrix> hh_block(int dx, int dy) const {
    const int r = hh_radius(), n = 2 * r + 1, d = depth();
    return {&hh[(static_cast<std::size_t>(dy + r) * n + (dx + r)) * d * d], d, d};
  }
  Eigen::Map<RowMatrix> hh_block(int dx, int dy) {
    const int r = hh_radius(), n = 2 * r + 1, d = depth();
    return {&hh[(static_cast<std::size_t>(dy + r) * n + (dx + r)) * d * d], d, d};
  }

  /// Default ridge prior: 1% of the mean HOG variance.
  double default_lambda() const { return 0.1 * hh_block(0, 0).trace() / depth(); }
};

struct FitConfig {
  HogConfig hog;
  int max_cells = 10;
  int threads = 1;
  std::uint64_t seed = 0;
  std::size_t max_images = 0;  // 0 = all; otherwise a seeded random subset
};

namespace detail {

// Offset-indexed sums of centered products from one image; merged in image
// order so results do not depend on the worker count.
struct MomentSums {
  std::vector<double> pp, ph, hh;

  void allocate(const StationaryModel& m) {
    const int d = m.depth();
    const std::size_t np = 2 * m.pp_radius() + 1, nh = 2 * m.hh_radius() + 1, nx = m.ph_span();
    pp.assign(np * np, 0.0);
    ph.assign(nx * nx * d, 0.0);
    hh.assign(nh * nh * d * d, 0.0);
  }

  void merge(const MomentSums& o) {
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(pp, o.pp);
    add(ph, o.ph);
    add(hh, o.hh);
  }
};

inline std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

// sum_p a(p) a(p + d) for |dx|, |dy| <= R via zero-padded FFT.
inline void accumulate_autocorrelation(const Image& centered, int R, std::vector<double>& out) {
  const int W = centered.width, H = centered.height;
  const int Wp = W + R + 1, Hp = H + R + 1;
  const int Wc = Wp / 2 + 1;
  double* in = fftw_alloc_real(static_cast<std::size_t>(Hp) * Wp);
  fftw_complex* freq = fftw_alloc_complex(static_cast<std::size_t>(Hp) * Wc);
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(fftw_planner_mutex());
    fwd = fftw_plan_dft_r2c_2d(Hp, Wp, in, freq, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_2d(Hp, Wp, freq, in, FFTW_ESTIMATE);
  }
  std::fill(in, in + static_cast<std::size_t>(Hp) * Wp, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) in[static_cast<std::size_t>(y) * Wp + x] = centered.at(x, y);
  fftw_execute(fwd);
  for (std::size_t i = 0; i < static_cast<std::size_t>(Hp) * Wc; ++i) {
    freq[i][0] = freq[i][0] * freq[i][0] + freq[i][1] * freq[i][1];
    freq[i][1] = 0;
  }
  fftw_execute(inv);
  const double norm = 1.0 / (static_cast<double>(Hp) * Wp);
  const int n = 2 * R + 1;
  for (int dy = -R; dy <= R; ++dy)
    for (int dx = -R; dx <= R; ++dx) {
      if (std::abs(dy) >= H || std::abs(dx) >= W) continue;
      const int iy = (dy + Hp) % Hp, ix = (dx + Wp) % Wp;
      out[static_cast<std::size_t>(dy + R) * n + (dx + R)] += in[static_cast<std::size_t>(iy) * Wp + ix] * norm;
    }
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  fftw_free(in);
  fftw_free(freq);
}

inline bool usable_for_fit(const Image& img, const StationaryModel& m) {
  const int cs = m.hog.cell_size, need = m.hog.pixels_for(m.max_cells);
  return img.width / cs * cs >= need && img.height / cs * cs >= need;
}

// Products of deviations from the given (corpus) means.
inline MomentSums image_moments(const StationaryModel& m, const Image& gray, const HogDescriptor& hog) {
  MomentSums s;
  s.allocate(m);
  const int cs = m.hog.cell_size, d = m.depth(), T = m.max_cells;

  Image centered = gray;
  for (double& v : centered.data) v -= m.mu_pixel;
  accumulate_autocorrelation(centered, m.pp_radius(), s.pp);

  const int cx = hog.cells_x, cy = hog.cells_y;
  const int bx = cx + 2, by = cy + 2;
  RowMatrix Y = Eigen::Map<const RowMatrix>(hog.data.data(), static_cast<Eigen::Index>(hog.cells()), d);
  Y.rowwise() -= m.mu_hog.transpose();

  // Pixel phases: row (block i, block j), column (ry * cs + rx).
  RowMatrix P(static_cast<Eigen::Index>(by) * bx, cs * cs);
  for (int i = 0; i < by; ++i)
    for (int j = 0; j < bx; ++j)
      for (int ry = 0; ry < cs; ++ry)
        for (int rx = 0; rx < cs; ++rx)
          P(static_cast<Eigen::Index>(i) * bx + j, ry * cs + rx) = centered.at(cs * j + rx, cs * i + ry);

  const int nx = m.ph_span(), lo = m.ph_lo();
  RowMatrix acc(cs * cs, d);
  for (int my = -T; my <= T; ++my)
    for (int mx = -T; mx <= T; ++mx) {
      const int c0 = std::max(0, -1 - mx), c1 = std::min(cx - 1, bx - 2 - mx);
      if (c1 < c0) continue;
      const int len = c1 - c0 + 1;
      acc.setZero();
      bool any = false;
      for (int q = 0; q < cy; ++q) {
        const int bi = q + 1 + my;
        if (bi < 0 || bi >= by) continue;
        acc.noalias() += P.middleRows(static_cast<Eigen::Index>(bi) * bx + c0 + 1 + mx, len).transpose() *
                         Y.middleRows(static_cast<Eigen::Index>(q) * cx + c0, len);
        any = true;
      }
      if (!any) continue;
      for (int ry = 0; ry < cs; ++ry)
        for (int rx = 0; rx < cs; ++rx) {
          const int dy = cs * my + ry, dx = cs * mx + rx;
          const std::size_t off = static_cast<std::size_t>(dy - lo) * nx + (dx - lo);
          for (int c = 0; c < d; ++c) s.ph[off * d + c] += acc(ry * cs + rx, c);
        }
    }

  const int R = m.hh_radius(), nh = 2 * R + 1;
  RowMatrix hacc(d, d);
  for (int dy = 0; dy <= R; ++dy)
    for (int dx = -R; dx <= R; ++dx) {
      if (dy == 0 && dx < 0) continue;
      const int c0 = std::max(0, -dx), c1 = std::min(cx - 1, cx - 1 - dx);
      if (c1 < c0) continue;
      const int len = c1 - c0 + 1;
      hacc.setZero();
      for (int q = 0; q + dy < cy; ++q)
        hacc.noalias() += Y.middleRows(static_cast<Eigen::Index>(q) * cx + c0, len).transpose() *
                          Y.middleRows(static_cast<Eigen::Index>(q + dy) * cx + c0 + dx, len);
      const std::size_t off = static_cast<std::size_t>(dy + R) * nh + (dx + R);
      for (int i = 0; i < d * d; ++i) s.hh[off * d * d + i] += hacc.data()[i];
    }
  return s;
}

}  // namespace detail

/// Estimates the stationary model from every image of `source` (converted to
/// luminance). Images smaller than one max_cells x max_cells template are
/// skipped with a warning.
inline StationaryModel fit_stationary(const ImageSource& source, const FitConfig& cfg = {}) {
  cfg.hog.validate();
  if (cfg.max_cells < 1) throw ConfigError("fit_stationary: max_cells must be >= 1");
  if (source.empty()) throw EmptyCorpusError("fit_stationary: corpus is empty");

  StationaryModel m;
  m.hog = cfg.hog;
  m.max_cells = cfg.max_cells;
  m.allocate();

  std::vector<std::size_t> order(source.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (cfg.max_images > 0 && cfg.max_images < order.size()) {
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(cfg.max_images);
    std::sort(order.begin(), order.end());
  }

  auto load_gray = [&](std::size_t k) { return to_luminance(source.load(order[k])); };

  // Pass 1: corpus means.
  struct Firsts {
    bool usable = false;
    double pix_sum = 0, pix_n = 0, cells = 0, windows = 0;
    Eigen::VectorXd hog_sum;
  };
  std::vector<Firsts> firsts(order.size());
  parallel_for(order.size(), cfg.threads, [&](std::size_t k) {
    const Image gray = load_gray(k);
    if (!detail::usable_for_fit(gray, m)) {
      log::warn("fit_stationary: skipping " + source.entry(order[k]).path + " (smaller than one template)");
      return;
    }
    const HogDescriptor hog = compute_hog(gray, m.hog);
    auto& f = firsts[k];
    f.usable = true;
    for (double v : gray.data) f.pix_sum += v;
    f.pix_n = static_cast<double>(gray.data.size());
    f.cells = static_cast<double>(hog.cells());
    f.windows = static_cast<double>(hog.cells_x - m.max_cells + 1) * (hog.cells_y - m.max_cells + 1);
    f.hog_sum = Eigen::Map<const RowMatrix>(hog.data.data(), static_cast<Eigen::Index>(hog.cells()), m.depth())
                    .colwise()
                    .sum()
                    .transpose();
  });
  double pix_sum = 0, pix_n = 0, cells = 0, windows = 0;
  Eigen::VectorXd hog_sum = Eigen::VectorXd::Zero(m.depth());
  for (const auto& f : firsts)
    if (f.usable) {
      pix_sum += f.pix_sum;
      pix_n += f.pix_n;
      cells += f.cells;
      windows += f.windows;
      hog_sum += f.hog_sum;
      ++m.image_count;
    }
  if (m.image_count == 0) throw EmptyCorpusError("fit_stationary: no image is large enough for one template");
  m.mu_pixel = pix_sum / pix_n;
  m.mu_hog = hog_sum / cells;
  m.sample_count = static_cast<long long>(windows);

  // Pass 2: centered second moments.
  std::vector<std::unique_ptr<detail::MomentSums>> parts(order.size());
  parallel_for(order.size(), cfg.threads, [&](std::size_t k) {
    if (!firsts[k].usable) return;
    const Image gray = load_gray(k);
    parts[k] = std::make_unique<detail::MomentSums>(detail::image_moments(m, gray, compute_hog(gray, m.hog)));
  });
  detail::MomentSums total;
  total.allocate(m);
  for (const auto& p : parts)
    if (p) total.merge(*p);

  // Lagged sums are divided by the full sample count rather than the number of
  // overlapping pairs, so every materialized covariance is positive
  // semidefinite.
  const int d = m.depth();
  for (std::size_t i = 0; i < m.pp.size(); ++i) m.pp[i] = total.pp[i] / pix_n;
  for (std::size_t i = 0; i < m.ph.size(); ++i) m.ph[i] = total.ph[i] / cells;
  const int R = m.hh_radius(), nh = 2 * R + 1;
  for (int dy = 0; dy <= R; ++dy)
    for (int dx = -R; dx <= R; ++dx) {
      if (dy == 0 && dx < 0) continue;
      const std::size_t off = static_cast<std::size_t>(dy + R) * nh + (dx + R);
      RowMatrix blk = Eigen::Map<const RowMatrix>(&total.hh[off * d * d], d, d) / cells;
      if (dx == 0 && dy == 0) blk = 0.5 * (blk + blk.transpose()).eval();
      m.hh_block(dx, dy) = blk;
      m.hh_block(-dx, -dy) = blk.transpose();
    }

  // Exact even symmetry of the pixel autocovariance.
  const int Rp = m.pp_radius(), np = 2 * Rp + 1;
  for (int dy = -Rp; dy <= Rp; ++dy)
    for (int dx = -Rp; dx <= Rp; ++dx) {
      const std::size_t a = static_cast<std::size_t>(dy + Rp) * np + (dx + Rp);
      const std::size_t b = static_cast<std::size_t>(-dy + Rp) * np + (-dx + Rp);
      if (a < b) {
        const double v = 0.5 * (m.pp[a] + m.pp[b]);
        m.pp[a] = m.pp[b] = v;
      }
    }
  return m;
}

// ---------------------------------------------------------------------------

/// Dense Gaussian for one template geometry. Stored sigma blocks include the
/// lambda_prior * I ridge. sigma_xx is optional (empty unless requested).
struct MaterializedGaussian {
  int width_cells = 0;
  int height_cells = 0;
  int pixel_width = 0;
  int pixel_height = 0;
  int cell_size = 8;
  int depth = 31;
  Eigen::VectorXd mu_x;
  Eigen::VectorXd mu_y;
  Eigen::MatrixXd sigma_xx;
  Eigen::MatrixXd sigma_xy;
  Eigen::MatrixXd sigma_yy;
  double lambda_prior = 0;

  bool has_sigma_xx() const { return sigma_xx.size() > 0; }

  /// Adds the prior to caller-supplied (unregularized) blocks and validates
  /// shape, symmetry and positive definiteness.
  static MaterializedGaussian from_blocks(Eigen::VectorXd mu_x, Eigen::VectorXd mu_y,
                                          Eigen::MatrixXd sxx, Eigen::MatrixXd sxy,
                                          Eigen::MatrixXd syy, double lambda_prior) {
    MaterializedGaussian g;
    g.mu_x = std::move(mu_x);
    g.mu_y = std::move(mu_y);
    g.sigma_xx = std::move(sxx);
    g.sigma_xy = std::move(sxy);
    g.sigma_yy = std::move(syy);
    g.lambda_prior = lambda_prior;
    g.pixel_width = static_cast<int>(g.mu_x.size());
    g.pixel_height = 1;
    g.width_cells = 1;
    g.height_cells = 1;
    g.depth = static_cast<int>(g.mu_y.size());
    if (g.has_sigma_xx()) g.sigma_xx.diagonal().array() += lambda_prior;
    g.sigma_yy.diagonal().array() += lambda_prior;
    g.validate();
    return g;
  }

  void validate() const {
    const auto D = mu_x.size(), d = mu_y.size();
    if (sigma_xy.rows() != D || sigma_xy.cols() != d || sigma_yy.rows() != d || sigma_yy.cols() != d ||
        (has_sigma_xx() && (sigma_xx.rows() != D || sigma_xx.cols() != D)))
      throw DimensionError("MaterializedGaussian: inconsistent block shapes");
    auto check = [](const Eigen::MatrixXd& s, const char* name) {
      if (!s.allFinite()) throw NumericalError(std::string(name) + " has non-finite entries");
      const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
      if (asym > 1e-10 * std::max(1.0, s.cwiseAbs().maxCoeff()))
        throw NumericalError(std::string(name) + " is not symmetric");
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      if (llt.info() != Eigen::Success)
        throw NumericalError(std::string(name) + " is not positive definite; increase lambda_prior");
    };
    check(sigma_yy, "sigma_yy");
    if (has_sigma_xx()) check(sigma_xx, "sigma_xx");
  }
};

/// Dense moments for a width_cells x height_cells template. Passing a negative
/// lambda_prior selects model.default_lambda().
inline MaterializedGaussian materialize(const StationaryModel& model, int width_cells, int height_cells,
                                        double lambda_prior = -1, bool with_sigma_xx = false) {
  if (width_cells < 1 || height_cells < 1) throw GeometryError("materialize: empty template");
  if (width_cells > model.max_cells || height_cells > model.max_cells)
    throw GeometryError("materialize: template " + std::to_string(width_cells) + "x" +
                        std::to_string(height_cells) + " exceeds the model's " +
                        std::to_string(model.max_cells) + "x" + std::to_string(model.max_cells) +
                        " cell radius");
  if (lambda_prior < 0) lambda_prior = model.default_lambda();
  const int cs = model.hog.cell_size, d = model.depth();
  MaterializedGaussian g;
  g.width_cells = width_cells;
  g.height_cells = height_cells;
  g.cell_size = cs;
  g.depth = d;
  g.pixel_width = cs * (width_cells + 2);
  g.pixel_height = cs * (height_cells + 2);
  g.lambda_prior = lambda_prior;
  const Eigen::Index D = static_cast<Eigen::Index>(g.pixel_width) * g.pixel_height;
  const Eigen::Index nq = static_cast<Eigen::Index>(width_cells) * height_cells;
  const Eigen::Index dd = nq * d;

  g.mu_x = Eigen::VectorXd::Constant(D, model.mu_pixel);
  g.mu_y.resize(dd);
  for (Eigen::Index q = 0; q < nq; ++q) g.mu_y.segment(q * d, d) = model.mu_hog;

  g.sigma_xy.resize(D, dd);
  for (int qy = 0; qy < height_cells; ++qy)
    for (int qx = 0; qx < width_cells; ++qx) {
      const Eigen::Index col = (static_cast<Eigen::Index>(qy) * width_cells + qx) * d;
      const int ax = cs * (qx + 1), ay = cs * (qy + 1);
      for (int py = 0; py < g.pixel_height; ++py)
        for (int px = 0; px < g.pixel_width; ++px) {
          const Eigen::Index row = static_cast<Eigen::Index>(py) * g.pixel_width + px;
          for (int c = 0; c < d; ++c) g.sigma_xy(row, col + c) = model.ph_at(px - ax, py - ay, c);
        }
    }

  g.sigma_yy.resize(dd, dd);
  for (Eigen::Index a = 0; a < nq; ++a)
    for (Eigen::Index b = 0; b < nq; ++b) {
      const int dx = static_cast<int>(b % width_cells - a % width_cells);
      const int dy = static_cast<int>(b / width_cells - a / width_cells);
      g.sigma_yy.block(a * d, b * d, d, d) = model.hh_block(dx, dy);
    }
  g.sigma_yy.diagonal().array() += lambda_prior;

  if (with_sigma_xx) {
    g.sigma_xx.resize(D, D);
    for (Eigen::Index a = 0; a < D; ++a)
      for (Eigen::Index b = 0; b < D; ++b) {
        const int dx = static_cast<int>(b % g.pixel_width - a % g.pixel_width);
        const int dy = static_cast<int>(b / g.pixel_width - a / g.pixel_width);
        g.sigma_xx(a, b) = model.pp_at(dx, dy);
      }
    g.sigma_xx.diagonal().array() += lambda_prior;
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Ridge regression inversion: the conditional mode of X given Y = y.

struct RidgeResult {
  Image image;  // display-rescaled to [0,1]
  Image raw;    // conditional mean in intensity units
};

class RidgeInverter {
 public:
  explicit RidgeInverter(MaterializedGaussian g) : g_(std::move(g)), llt_(g_.sigma_yy) {
    if (llt_.info() != Eigen::Success)
      throw NumericalError("ridge: sigma_yy is singular; lambda_prior too small");
  }

  const MaterializedGaussian& gaussian() const { return g_; }

  /// sigma_xy * sigma_yy^-1 * (y - mu_y) + mu_x for each column of ys.
  Eigen::MatrixXd invert_columns(const Eigen::MatrixXd& ys) const {
    if (ys.rows() != g_.mu_y.size()) throw DimensionError("ridge: descriptor length mismatch");
    Eigen::MatrixXd w = llt_.solve(ys.colwise() - g_.mu_y);
    Eigen::MatrixXd x = g_.sigma_xy * w;
    x.colwise() += g_.mu_x;
    return x;
  }

  Eigen::VectorXd invert_raw(const Eigen::VectorXd& y) const { return invert_columns(y); }

  RidgeResult invert(const HogDescriptor& y) const {
    if (y.cells_x != g_.width_cells || y.cells_y != g_.height_cells || y.depth != g_.depth)
      throw DimensionError("ridge: descriptor geometry does not match the materialized template");
    const Eigen::VectorXd x =
        invert_raw(Eigen::Map<const Eigen::VectorXd>(y.data.data(), static_cast<Eigen::Index>(y.data.size())));
    RidgeResult r;
    r.raw = Image(g_.pixel_width, g_.pixel_height, 1);
    std::copy(x.data(), x.data() + x.size(), r.raw.data.begin());
    r.image = display_rescale(r.raw);
    return r;
  }

 private:
  MaterializedGaussian g_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

inline RidgeResult ridge_invert(const MaterializedGaussian& g, const HogDescriptor& y) {
  return RidgeInverter(g).invert(y);
}

/// Ridge inversion for any descriptor size. Templates up to the model's
/// radius are inverted exactly; larger descriptors average the inversions of
/// all max_cells x max_cells subwindows (stride one cell). Factorizations are
/// cached per geometry.
class RidgeModel {
 public:
  explicit RidgeModel(std::shared_ptr<const StationaryModel> model, double lambda_prior = -1)
      : model_(std::move(model)),
        lambda_(lambda_prior < 0 ? model_->default_lambda() : lambda_prior) {}

  const StationaryModel& model() const { return *model_; }
  double lambda_prior() const { return lambda_; }

  std::shared_ptr<const RidgeInverter> inverter(int wc, int hc) const {
    std::lock_guard lock(mu_);
    auto& slot = cache_[{wc, hc}];
    if (!slot) slot = std::make_shared<RidgeInverter>(materialize(*model_, wc, hc, lambda_));
    return slot;
  }

  RidgeResult invert(const HogDescriptor& y) const {
    if (y.depth != model_->depth() || y.cell_size != model_->hog.cell_size)
      throw DimensionError("ridge: descriptor depth/cell size does not match the model");
    const int T = model_->max_cells;
    if (y.cells_x <= T && y.cells_y <= T) return inverter(y.cells_x, y.cells_y)->invert(y);

    const int ww = std::min(T, y.cells_x), wh = std::min(T, y.cells_y);
    const auto inv = inverter(ww, wh);
    const int nx = y.cells_x - ww + 1, ny = y.cells_y - wh + 1;
    const Eigen::Index dd = static_cast<Eigen::Index>(ww) * wh * y.depth;
    Eigen::MatrixXd ys(dd, static_cast<Eigen::Index>(nx) * ny);
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx) {
        const auto win = y.window(wx, wy, ww, wh);
        ys.col(static_cast<Eigen::Index>(wy) * nx + wx) =
            Eigen::Map<const Eigen::VectorXd>(win.data.data(), dd);
      }
    const Eigen::MatrixXd xs = inv->invert_columns(ys);
    const int cs = y.cell_size, pw = cs * (ww + 2), ph = cs * (wh + 2);
    RidgeResult r;
    r.raw = Image(y.pixel_width(), y.pixel_height(), 1);
    std::vector<double> cover(r.raw.data.size(), 0.0);
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx) {
        const auto col = xs.col(static_cast<Eigen::Index>(wy) * nx + wx);
        for (int py = 0; py < ph; ++py)
          for (int px = 0; px < pw; ++px) {
            const std::size_t k = static_cast<std::size_t>(cs * wy + py) * r.raw.width + (cs * wx + px);
            r.raw.data[k] += col(static_cast<Eigen::Index>(py) * pw + px);
            cover[k] += 1;
          }
      }
    for (std::size_t k = 0; k < cover.size(); ++k) r.raw.data[k] /= cover[k];
    r.image = display_rescale(r.raw);
    return r;
  }

 private:
  std::shared_ptr<const StationaryModel> model_;
  double lambda_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, std::shared_ptr<RidgeInverter>> cache_;
};

// ---------------------------------------------------------------------------
// Natural image basis from translated eigenpatches of the pixel covariance.

struct ImageBasis {
  int width = 0;   // template raster
  int height = 0;
  Eigen::MatrixXd vectors;  // (width*height) x count, unit-norm columns

  Eigen::Index dim() const { return vectors.rows(); }
  Eigen::Index count() const { return vectors.cols(); }
};

/// Pixel covariance of a side x side patch (row-major pixel order).
inline Eigen::MatrixXd patch_covariance(const StationaryModel& model, int side) {
  if (side < 1 || side - 1 > model.pp_radius())
    throw GeometryError("patch_covariance: patch side exceeds the model radius");
  const int n = side * side;
  Eigen::MatrixXd s(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) s(a, b) = model.pp_at(b % side - a % side, b / side - a / side);
  return s;
}

/// Top-k eigenvectors of a symmetric matrix, by descending eigenvalue. Each is
/// sign-normalized so its largest-magnitude entry is positive.
inline Eigen::MatrixXd top_eigenvectors(const Eigen::MatrixXd& sigma, int k) {
  if (k < 1 || k > sigma.rows()) throw ConfigError("top_eigenvectors: k out of range");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
  if (es.info() != Eigen::Success || !es.eigenvalues().allFinite())
    throw NumericalError("top_eigenvectors: eigendecomposition failed");
  const Eigen::Index n = sigma.rows();
  Eigen::MatrixXd out(n, k);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd v = es.eigenvectors().col(n - 1 - i);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.col(i) = v.normalized();
  }
  return out;
}

/// Embeds each side x side eigenpatch at every stride-aligned placement
/// inside a width x height raster; placement-major, eigenpatch-minor order.
inline ImageBasis translate_patches(const Eigen::MatrixXd& patches, int side, int width, int height,
                                    int stride) {
  if (side > width || side > height) throw GeometryError("translate_patches: patch larger than template");
  if (stride < 1) throw ConfigError("translate_patches: stride must be >= 1");
  std::vector<int> xs, ys;
  for (int x = 0; x + side <= width; x += stride) xs.push_back(x);
  for (int y = 0; y + side <= height; y += stride) ys.push_back(y);
  ImageBasis b;
  b.width = width;
  b.height = height;
  const Eigen::Index k = patches.cols();
  b.vectors = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(width) * height,
                                    static_cast<Eigen::Index>(xs.size() * ys.size()) * k);
  Eigen::Index col = 0;
  for (int y0 : ys)
    for (int x0 : xs)
      for (Eigen::Index j = 0; j < k; ++j, ++col) {
        for (int py = 0; py < side; ++py)
          for (int px = 0; px < side; ++px)
            b.vectors(static_cast<Eigen::Index>(y0 + py) * width + x0 + px, col) = patches(py * side + px, j);
        b.vectors.col(col).normalize();
      }
  return b;
}

inline ImageBasis image_eigenbasis(const StationaryModel& model, int patch_pixels, int k_per_scale,
                                   int template_width, int template_height, int stride = 8) {
  if (patch_pixels > template_width || patch_pixels > template_height)
    throw GeometryError("image_eigenbasis: patch larger than template");
  if (k_per_scale > patch_pixels * patch_pixels) throw ConfigError("image_eigenbasis: k exceeds patch dimension");
  const Eigen::MatrixXd eig = top_eigenvectors(patch_covariance(model, patch_pixels), k_per_scale);
  return translate_patches(eig, patch_pixels, template_width, template_height, stride);
}

// ---------------------------------------------------------------------------
// Serialization

inline json hog_config_json(const HogConfig& h) {
  return {{"cell_size", h.cell_size}, {"orientations", h.orientations}, {"truncation", h.truncation}};
}

inline HogConfig hog_config_from_json(const json& j) {
  HogConfig h;
  h.cell_size = j.at("cell_size").get<int>();
  h.orientations = j.at("orientations").get<int>();
  h.truncation = j.at("truncation").get<double>();
  h.validate();
  return h;
}

inline Container to_container(const StationaryModel& m) {
  Container c;
  const json cfg = {{"hog", hog_config_json(m.hog)}, {"max_cells", m.max_cells}};
  c.metadata = {{"type", "stationary_gaussian"},
                {"config", cfg},
                {"config_hash", config_hash(cfg)},
                {"mu_pixel", m.mu_pixel},
                {"sample_count", m.sample_count},
                {"image_count", m.image_count}};
  const std::int64_t np = 2 * m.pp_radius() + 1, nh = 2 * m.hh_radius() + 1, nx = m.ph_span(), d = m.depth();
  c.add("mu_hog", DType::f64, {d}, std::span(m.mu_hog.data(), m.mu_hog.size()));
  c.add("autocov_pp", DType::f64, {np, np}, m.pp);
  c.add("autocov_ph", DType::f64, {nx, nx, d}, m.ph);
  c.add("autocov_hh", DType::f64, {nh, nh, d, d}, m.hh);
  return c;
}

inline StationaryModel stationary_from_container(const Container& c) {
  if (c.type() != "stationary_gaussian")
    throw CorruptError("expected a stationary_gaussian container, found '" + c.type() + "'");
  StationaryModel m;
  try {
    m.hog = hog_config_from_json(c.metadata.at("config").at("hog"));
    m.max_cells = c.metadata.at("config").at("max_cells").get<int>();
    m.mu_pixel = c.metadata.at("mu_pixel").get<double>();
    m.sample_count = c.metadata.at("sample_count").get<long long>();
    m.image_count = c.metadata.value("image_count", 0LL);
  } catch (const json::exception& e) {
    throw CorruptError(std::string("stationary model metadata: ") + e.what());
  }
  m.allocate();
  auto take = [&](const char* name, std::vector<double>& dst) {
    const auto& t = c.get(name);
    if (t.values.size() != dst.size()) throw CorruptError(std::string("tensor ") + name + " has wrong size");
    dst = t.values;
  };
  const auto& mu = c.get("mu_hog");
  if (mu.values.size() != static_cast<std::size_t>(m.depth())) throw CorruptError("mu_hog has wrong size");
  m.mu_hog = Eigen::Map<const Eigen::VectorXd>(mu.values.data(), m.depth());
  take("autocov_pp", m.pp);
  take("autocov_ph", m.ph);
  take("autocov_hh", m.hh);
  return m;
}

inline Container to_container(const MaterializedGaussian& g) {
  Container c;
  c.metadata = {{"type", "materialized_gaussian"},
                {"width_cells", g.width_cells},
                {"height_cells", g.height_cells},
                {"pixel_width", g.pixel_width},
                {"pixel_height", g.pixel_height},
                {"cell_size", g.cell_size},
                {"depth", g.depth},
                {"lambda_prior", g.lambda_prior}};
  auto add_mat = [&](const char* name, const Eigen::MatrixXd& m) {
    c.add(name, DType::f64, {m.rows(), m.cols()}, std::span(m.data(), m.size()));
  };
  c.add("mu_x", DType::f64, {g.mu_x.size()}, std::span(g.mu_x.data(), g.mu_x.size()));
  c.add("mu_y", DType::f64, {g.mu_y.size()}, std::span(g.mu_y.data(), g.mu_y.size()));
  if (g.has_sigma_xx()) add_mat("sigma_xx", g.sigma_xx);
  add_mat("sigma_xy", g.sigma_xy);
  add_mat("sigma_yy", g.sigma_yy);
  return c;
}

inline MaterializedGaussian materialized_from_container(const Container& c) {
  if (c.type() != "materialized_gaussian")
    throw CorruptError("expected a materialized_gaussian container, found '" + c.type() + "'");
  MaterializedGaussian g;
  try {
    g.width_cells = c.metadata.at("width_cells").get<int>();
    g.height_cells = c.metadata.at("height_cells").get<int>();
    g.pixel_width = c.metadata.at("pixel_width").get<int>();
    g.pixel_height = c.metadata.at("pixel_height").get<int>();
    g.cell_size = c.metadata.at("cell_size").get<int>();
    g.depth = c.metadata.at("depth").get<int>();
    g.lambda_prior = c.metadata.at("lambda_prior").get<double>();
  } catch (const json::exception& e) {
    throw CorruptError(std::string("materialized gaussian metadata: ") + e.what());
  }
  auto vec = [&](const char* name) {
    const auto& t = c.get(name);
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(t.values.data(), static_cast<Eigen::Index>(t.values.size())));
  };
  auto mat = [&](const char* name) {
    const auto& t = c.get(name);
    if (t.shape.size() != 2) throw CorruptError(std::string(name) + " is not a matrix");
    return Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(t.values.data(), t.shape[0], t.shape[1]));
  };
  g.mu_x = vec("mu_x");
  g.mu_y = vec("mu_y");
  if (c.find("sigma_xx")) g.sigma_xx = mat("sigma_xx");
  g.sigma_xy = mat("sigma_xy");
  g.sigma_yy = mat("sigma_yy");
  g.validate();
  return g;
}

inline Container to_container(const ImageBasis& b) {
  Container c;
  c.metadata = {{"type", "image_basis"}, {"width", b.width}, {"height", b.height}};
  c.add("vectors", DType::f64, {b.vectors.rows(), b.vectors.cols()}, std::span(b.vectors.data(), b.vectors.size()));
  return c;
}

inline ImageBasis basis_from_container(const Container& c) {
  if (c.type() != "image_basis") throw CorruptError("expected an image_basis container, found '" + c.type() + "'");
  ImageBasis b;
  b.width = c.metadata.at("width").get<int>();
  b.height = c.metadata.at("height").get<int>();
  const auto& t = c.get("vectors");
  if (t.shape.size() != 2 || t.shape[0] != static_cast<std::int64_t>(b.width) * b.height)
    throw CorruptError("image_basis: vectors shape mismatch");
  b.vectors = Eigen::Map<const Eigen::MatrixXd>(t.values.data(), t.shape[0], t.shape[1]);
  return b;
}

}  // namespace fvtb
