#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fvtb/gaussian.hpp"
#include "oracles/gauss_mode.hpp"
#include "oracles/naive_moments.hpp"
#include "test_util.hpp"

using namespace fvtb;

namespace {

Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng, double ridge = 0.5) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(n, n);
  for (auto& v : a.reshaped()) v = g(rng);
  return a * a.transpose() + ridge * Eigen::MatrixXd::Identity(n, n);
}

struct Joint {
  Eigen::VectorXd mu_x, mu_y;
  Eigen::MatrixXd cov;  // (D + d) square
  int D, d;
};

Joint random_joint(int D, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Joint j;
  j.D = D;
  j.d = d;
  j.cov = random_spd(D + d, rng);
  j.mu_x.resize(D);
  j.mu_y.resize(d);
  for (auto& v : j.mu_x) v = g(rng);
  for (auto& v : j.mu_y) v = g(rng);
  return j;
}

HogDescriptor as_descriptor(const Eigen::VectorXd& y) {
  HogDescriptor h;
  h.cells_x = h.cells_y = 1;
  h.depth = static_cast<int>(y.size());
  h.data.assign(y.data(), y.data() + y.size());
  return h;
}

const StationaryModel& noise_model() {
  static const StationaryModel m = [] {
    std::vector<Image> imgs;
    for (int i = 0; i < 28; ++i) imgs.push_back(test_util::random_image(192, 192, 100 + i));
    FitConfig cfg;
    cfg.max_cells = 6;
    return fit_stationary(ImageSource::from_images(std::move(imgs)), cfg);
  }();
  return m;
}

const StationaryModel& smooth_model() {
  static const StationaryModel m = [] {
    std::vector<Image> imgs;
    for (int i = 0; i < 6; ++i) imgs.push_back(test_util::smooth_image(160, 144, 300 + i));
    FitConfig cfg;
    cfg.max_cells = 5;
    return fit_stationary(ImageSource::from_images(std::move(imgs)), cfg);
  }();
  return m;
}

}  // namespace

TEST(Fit, ConstantCorpusHasZeroCovariance) {
  std::vector<Image> imgs(3, Image(104, 112, 1, 0.5));
  FitConfig cfg;
  cfg.max_cells = 4;
  const auto m = fit_stationary(ImageSource::from_images(imgs), cfg);
  EXPECT_EQ(m.mu_pixel, 0.5);
  for (double v : m.pp) EXPECT_EQ(v, 0.0);
  for (double v : m.ph) EXPECT_EQ(v, 0.0);
  for (double v : m.hh) EXPECT_EQ(v, 0.0);
  for (int c = 0; c < m.depth(); ++c) EXPECT_EQ(m.mu_hog(c), 0.0);
}

TEST(Fit, SampleCountIsWindowPositions) {
  // 120x104 pixels -> 15x13 blocks -> 13x11 cells -> (13-10+1)*(11-10+1) windows.
  const auto m = fit_stationary(ImageSource::from_images({test_util::random_image(120, 104, 1)}));
  EXPECT_EQ(m.sample_count, 8);
  EXPECT_EQ(m.image_count, 1);
}

TEST(Fit, EmptyAndTooSmallCorpora) {
  EXPECT_THROW(fit_stationary(ImageSource::from_images({})), EmptyCorpusError);
  EXPECT_THROW(fit_stationary(ImageSource::from_images({test_util::random_image(64, 64, 1)})),
               EmptyCorpusError);
}

TEST(Fit, SmallImagesAreSkipped) {
  FitConfig cfg;
  cfg.max_cells = 3;
  const auto m = fit_stationary(
      ImageSource::from_images({test_util::random_image(20, 20, 1), test_util::random_image(48, 48, 2)}), cfg);
  EXPECT_EQ(m.image_count, 1);
  EXPECT_EQ(m.sample_count, 2 * 2);
}

TEST(Fit, UniformNoiseStatistics) {
  const auto& m = noise_model();
  const double n = 28.0 * 192 * 192;
  ASSERT_GE(n, 1e6);
  // Var of (x - mu)^2 for U(0,1) is 1/80 - 1/144 = 1/180.
  EXPECT_NEAR(m.pp_at(0, 0), 1.0 / 12, 3 * std::sqrt(1.0 / 180 / n));
  EXPECT_NEAR(m.mu_pixel, 0.5, 3 * std::sqrt(1.0 / 12 / n));
  for (auto [dx, dy] : {std::pair{1, 0}, {0, 1}, {1, 1}, {-3, 2}, {7, -5}, {20, 11}, {40, 0}, {0, 60}}) {
    const double pairs = 28.0 * (192 - std::abs(dx)) * (192 - std::abs(dy));
    EXPECT_NEAR(m.pp_at(dx, dy), 0.0, 3 * (1.0 / 12) / std::sqrt(pairs)) << dx << "," << dy;
  }
}

TEST(Fit, MatchesNaiveMomentsOnOneImage) {
  const Image img = test_util::smooth_image(72, 64, 9);
  FitConfig cfg;
  cfg.max_cells = 2;
  const auto m = fit_stationary(ImageSource::from_images({img}), cfg);
  const auto o = oracle::naive_moments(img, 2);
  EXPECT_NEAR(m.mu_pixel, o.mu_pixel, 1e-12);
  for (int c = 0; c < m.depth(); ++c) EXPECT_NEAR(m.mu_hog(c), o.mu_hog[c], 1e-12);

  double worst = 0;
  for (int dy = -m.pp_radius(); dy <= m.pp_radius(); dy += 3)
    for (int dx = -m.pp_radius(); dx <= m.pp_radius(); dx += 2)
      worst = std::max(worst, std::abs(m.pp_at(dx, dy) - o.cov_pp(dx, dy)));
  EXPECT_LT(worst, 1e-10);

  worst = 0;
  for (int dy = m.ph_lo(); dy <= m.ph_hi(); ++dy)
    for (int dx = m.ph_lo(); dx <= m.ph_hi(); ++dx)
      for (int c : {0, 5, 17, 20, 26, 28, 30}) worst = std::max(worst, std::abs(m.ph_at(dx, dy, c) - o.cov_ph(dx, dy, c)));
  EXPECT_LT(worst, 1e-10);

  worst = 0;
  for (int dy = -m.hh_radius(); dy <= m.hh_radius(); ++dy)
    for (int dx = -m.hh_radius(); dx <= m.hh_radius(); ++dx) {
      const auto blk = m.hh_block(dx, dy);
      for (int c = 0; c < m.depth(); c += 3)
        for (int c2 = 0; c2 < m.depth(); c2 += 2)
          worst = std::max(worst, std::abs(blk(c, c2) - o.cov_hh(dx, dy, c, c2)));
    }
  EXPECT_LT(worst, 1e-10);
}

TEST(Fit, SymmetryInvariants) {
  const auto& m = smooth_model();
  for (int dy = -m.pp_radius(); dy <= m.pp_radius(); ++dy)
    for (int dx = -m.pp_radius(); dx <= m.pp_radius(); ++dx) ASSERT_EQ(m.pp_at(dx, dy), m.pp_at(-dx, -dy));
  EXPECT_GE(m.pp_at(0, 0), 0.0);
  for (int dy = -m.hh_radius(); dy <= m.hh_radius(); ++dy)
    for (int dx = -m.hh_radius(); dx <= m.hh_radius(); ++dx)
      ASSERT_TRUE(RowMatrix(m.hh_block(dx, dy)) == RowMatrix(m.hh_block(-dx, -dy).transpose()));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(m.hh_block(0, 0)));
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
  EXPECT_GT(m.sample_count, 0);
}

TEST(Fit, DeterministicAcrossThreads) {
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(test_util::smooth_image(100 + 8 * i, 96, 40 + i));
  FitConfig cfg;
  cfg.max_cells = 4;
  const auto src = ImageSource::from_images(imgs);
  const auto a = fit_stationary(src, cfg);
  cfg.threads = 3;
  const auto b = fit_stationary(src, cfg);
  EXPECT_EQ(a.pp, b.pp);
  EXPECT_EQ(a.ph, b.ph);
  EXPECT_EQ(a.hh, b.hh);
  EXPECT_EQ(a.mu_pixel, b.mu_pixel);
}

TEST(Fit, SeededSubset) {
  std::vector<Image> imgs;
  for (int i = 0; i < 6; ++i) imgs.push_back(test_util::smooth_image(64, 64, 70 + i));
  FitConfig cfg;
  cfg.max_cells = 2;
  cfg.max_images = 3;
  cfg.seed = 5;
  const auto src = ImageSource::from_images(imgs);
  const auto a = fit_stationary(src, cfg);
  const auto b = fit_stationary(src, cfg);
  EXPECT_EQ(a.image_count, 3);
  EXPECT_EQ(a.ph, b.ph);
}

// ---------------------------------------------------------------------------

TEST(Materialize, SubTemplateIsBlockExtraction) {
  const auto& m = smooth_model();
  const double lam = 0.003;
  const auto big = materialize(m, 5, 4, lam, true);
  const auto small = materialize(m, 3, 2, lam, true);
  const int cs = 8, d = m.depth();
  // Pixel (px, py) of the small raster is pixel (px, py) of the big raster;
  // cell (qx, qy) likewise.
  std::vector<Eigen::Index> pix, feat;
  for (int py = 0; py < small.pixel_height; ++py)
    for (int px = 0; px < small.pixel_width; ++px) pix.push_back(static_cast<Eigen::Index>(py) * big.pixel_width + px);
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 3; ++qx)
      for (int c = 0; c < d; ++c) feat.push_back((static_cast<Eigen::Index>(qy) * 5 + qx) * d + c);
  ASSERT_EQ(static_cast<int>(pix.size()), small.pixel_width * small.pixel_height);
  EXPECT_EQ(small.pixel_width, cs * 5);
  EXPECT_TRUE(small.mu_x == big.mu_x(pix));
  EXPECT_TRUE(small.mu_y == big.mu_y(feat));
  EXPECT_TRUE(small.sigma_xy == big.sigma_xy(pix, feat));
  EXPECT_TRUE(small.sigma_yy == big.sigma_yy(feat, feat));
  EXPECT_TRUE(small.sigma_xx == big.sigma_xx(pix, pix));
}

TEST(Materialize, ZeroModelGivesPriorOnly) {
  StationaryModel m;
  m.max_cells = 3;
  m.allocate();
  m.mu_pixel = 0.4;
  const auto g = materialize(m, 2, 2, 0.25, true);
  EXPECT_TRUE(g.sigma_yy == 0.25 * Eigen::MatrixXd::Identity(g.sigma_yy.rows(), g.sigma_yy.cols()));
  EXPECT_TRUE(g.sigma_xx == 0.25 * Eigen::MatrixXd::Identity(g.sigma_xx.rows(), g.sigma_xx.cols()));
  EXPECT_EQ(g.sigma_xy.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.lambda_prior, 0.25);
}

TEST(Materialize, NoiseTemplateIsScaledIdentity) {
  const auto& m = noise_model();
  const auto g = materialize(m, 5, 5, 1e-9, true);
  const Eigen::MatrixXd diff =
      g.sigma_xx - (1.0 / 12) * Eigen::MatrixXd::Identity(g.sigma_xx.rows(), g.sigma_xx.cols());
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 3e-3);
}

TEST(Materialize, SymmetryAndGeometryErrors) {
  const auto& m = smooth_model();
  const auto g = materialize(m, 4, 5, -1, true);
  EXPECT_LE((g.sigma_xx - g.sigma_xx.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((g.sigma_yy - g.sigma_yy.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(g.lambda_prior, m.default_lambda(), 0);
  EXPECT_EQ(g.pixel_width, 48);
  EXPECT_EQ(g.pixel_height, 56);
  EXPECT_THROW(materialize(m, 6, 2), GeometryError);
  EXPECT_THROW(materialize(m, 2, 0), GeometryError);
  EXPECT_FALSE(materialize(m, 2, 2).has_sigma_xx());
}

TEST(Materialize, RejectsIndefiniteBlocks) {
  Eigen::MatrixXd syy = Eigen::MatrixXd::Identity(2, 2);
  syy(1, 1) = -1;
  EXPECT_THROW(MaterializedGaussian::from_blocks(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2),
                                                 Eigen::MatrixXd(), Eigen::MatrixXd::Zero(2, 2), syy, 0.1),
               NumericalError);
  EXPECT_THROW(MaterializedGaussian::from_blocks(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(2),
                                                 Eigen::MatrixXd(), Eigen::MatrixXd::Zero(2, 2),
                                                 Eigen::MatrixXd::Identity(2, 2), 0.1),
               DimensionError);
}

// ---------------------------------------------------------------------------

TEST(Ridge, ConditionalModeMatchesOracles) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> gn;
  std::uniform_int_distribution<int> dD(1, 6), dd(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    const int D = dD(rng), d = dd(rng);
    const Joint j = random_joint(D, d, rng);
    const double lam = 1e-3;
    auto g = MaterializedGaussian::from_blocks(j.mu_x, j.mu_y, j.cov.topLeftCorner(D, D),
                                               j.cov.topRightCorner(D, d), j.cov.bottomRightCorner(d, d), lam);
    Eigen::MatrixXd joint = j.cov;
    joint.diagonal().array() += lam;
    Eigen::VectorXd y(d);
    for (auto& v : y) v = gn(rng) * 2;

    const auto r = RidgeInverter(g).invert(as_descriptor(y));
    const Eigen::VectorXd got = Eigen::Map<const Eigen::VectorXd>(r.raw.data.data(), D);

    // Analytic conditional mean from the joint precision matrix.
    const Eigen::MatrixXd prec = joint.inverse();
    const Eigen::VectorXd analytic =
        j.mu_x - prec.topLeftCorner(D, D).ldlt().solve(prec.topRightCorner(D, d) * (y - j.mu_y));
    EXPECT_LE((got - analytic).cwiseAbs().maxCoeff(), 1e-8) << "trial " << trial;

    const Eigen::VectorXd brute = oracle::density_argmax(j.mu_x, j.mu_y, joint, y);
    EXPECT_LE((got - brute).cwiseAbs().maxCoeff(), 1e-5) << "trial " << trial;
  }
}

TEST(Ridge, IndependenceAndMeanCases) {
  std::mt19937_64 rng(3);
  const Joint j = random_joint(4, 3, rng);
  auto indep = MaterializedGaussian::from_blocks(j.mu_x, j.mu_y, Eigen::MatrixXd(), Eigen::MatrixXd::Zero(4, 3),
                                                 j.cov.bottomRightCorner(3, 3), 0.01);
  const auto r0 = RidgeInverter(indep).invert(as_descriptor(Eigen::Vector3d(5, -2, 1)));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r0.raw.data[i], j.mu_x(i));

  auto g = MaterializedGaussian::from_blocks(j.mu_x, j.mu_y, Eigen::MatrixXd(), j.cov.topRightCorner(4, 3),
                                             j.cov.bottomRightCorner(3, 3), 0.01);
  const auto r1 = RidgeInverter(g).invert(as_descriptor(j.mu_y));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r1.raw.data[i], j.mu_x(i));
}

TEST(Ridge, PriorMonotonicity) {
  const auto& m = smooth_model();
  const Image src = test_util::smooth_image(40, 40, 77);
  const auto y = compute_hog(src);
  double prev = std::numeric_limits<double>::infinity();
  for (double lam : {1e-2, 1e-1, 1.0, 10.0, 1e3, 1e6}) {
    const auto r = RidgeInverter(materialize(m, y.cells_x, y.cells_y, lam)).invert(y);
    double dist = 0;
    for (double v : r.raw.data) dist = std::max(dist, std::abs(v - m.mu_pixel));
    EXPECT_LT(dist, prev) << lam;
    prev = dist;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Ridge, GeometryMismatchAndDisplay) {
  const auto& m = smooth_model();
  const auto g = materialize(m, 3, 3);
  RidgeInverter inv(g);
  const auto y = compute_hog(test_util::smooth_image(40, 48, 5));
  EXPECT_THROW(inv.invert(y), DimensionError);
  const auto ok = inv.invert(compute_hog(test_util::smooth_image(40, 40, 5)));
  EXPECT_EQ(ok.image.width, 40);
  EXPECT_EQ(ok.image.height, 40);
  for (double v : ok.image.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Ridge, PatchworkForLargeDescriptors) {
  auto model = std::make_shared<StationaryModel>(smooth_model());
  RidgeModel rm(model);
  const auto y = compute_hog(test_util::smooth_image(8 * 9, 8 * 8, 12));  // 7x6 cells, T = 5
  ASSERT_EQ(y.cells_x, 7);
  ASSERT_EQ(y.cells_y, 6);
  const auto r = rm.invert(y);
  EXPECT_EQ(r.raw.width, 72);
  EXPECT_EQ(r.raw.height, 64);

  // Brute-force assembly of the 3 x 2 window inversions.
  RidgeInverter inv(materialize(*model, 5, 5, rm.lambda_prior()));
  Image acc(72, 64, 1), cover(72, 64, 1);
  for (int wy = 0; wy < 2; ++wy)
    for (int wx = 0; wx < 3; ++wx) {
      const auto part = inv.invert(y.window(wx, wy, 5, 5)).raw;
      for (int py = 0; py < part.height; ++py)
        for (int px = 0; px < part.width; ++px) {
          acc.at(8 * wx + px, 8 * wy + py) += part.at(px, py);
          cover.at(8 * wx + px, 8 * wy + py) += 1;
        }
    }
  double worst = 0;
  for (std::size_t i = 0; i < acc.data.size(); ++i)
    worst = std::max(worst, std::abs(acc.data[i] / cover.data[i] - r.raw.data[i]));
  EXPECT_LT(worst, 1e-10);

  // Exact path for small descriptors.
  const auto small = compute_hog(test_util::smooth_image(40, 48, 3));
  EXPECT_TRUE(rm.invert(small).raw == RidgeInverter(materialize(*model, 3, 4, rm.lambda_prior())).invert(small).raw);
}

// ---------------------------------------------------------------------------

TEST(Eigenbasis, DiagonalGivesIndicators) {
  Eigen::VectorXd diag(9);
  diag << 0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6;
  const Eigen::MatrixXd e = top_eigenvectors(diag.asDiagonal().toDenseMatrix(), 4);
  const int expect[] = {1, 6, 4, 8};
  for (int k = 0; k < 4; ++k) {
    Eigen::VectorXd ind = Eigen::VectorXd::Zero(9);
    ind(expect[k]) = 1;
    EXPECT_LT((e.col(k) - ind).norm(), 1e-12) << k;
  }
}

TEST(Eigenbasis, RankOne) {
  Eigen::VectorXd v(6);
  v << 1, -2, 0.5, 3, 0, -1;
  const Eigen::MatrixXd e = top_eigenvectors(v * v.transpose(), 1);
  const Eigen::VectorXd u = v.normalized();
  EXPECT_LT(std::min((e.col(0) - u).norm(), (e.col(0) + u).norm()), 1e-12);
}

TEST(Eigenbasis, TranslationReproducesPatches) {
  const auto& m = smooth_model();
  const auto b = image_eigenbasis(m, 16, 5, 40, 32, 8);
  // Placements: x in {0, 8, 16, 24}, y in {0, 8, 16}.
  EXPECT_EQ(b.count(), 4 * 3 * 5);
  EXPECT_EQ(b.dim(), 40 * 32);
  for (Eigen::Index j = 0; j < b.count(); ++j) EXPECT_NEAR(b.vectors.col(j).norm(), 1.0, 1e-9);

  const Eigen::MatrixXd eig = top_eigenvectors(patch_covariance(m, 16), 5);
  Eigen::VectorXd target = Eigen::VectorXd::Zero(40 * 32);
  for (int py = 0; py < 16; ++py)
    for (int px = 0; px < 16; ++px) target((8 + py) * 40 + 16 + px) = eig(py * 16 + px, 2);
  const Eigen::VectorXd coef = b.vectors.colPivHouseholderQr().solve(target);
  EXPECT_LT((b.vectors * coef - target).norm(), 1e-9);
}

TEST(Eigenbasis, Errors) {
  const auto& m = smooth_model();
  EXPECT_THROW(image_eigenbasis(m, 16, 5, 12, 40), GeometryError);
  EXPECT_THROW(image_eigenbasis(m, 4, 17, 40, 40), ConfigError);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(3, 3);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(top_eigenvectors(bad, 1), NumericalError);
}

// ---------------------------------------------------------------------------

TEST(Serialize, StationaryRoundTrip) {
  const auto& m = smooth_model();
  const auto bytes = serialize_container(to_container(m));
  const auto back = stationary_from_container(
      parse_container(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()), "mem"));
  EXPECT_EQ(back.pp, m.pp);
  EXPECT_EQ(back.ph, m.ph);
  EXPECT_EQ(back.hh, m.hh);
  EXPECT_TRUE(back.mu_hog == m.mu_hog);
  EXPECT_EQ(back.mu_pixel, m.mu_pixel);
  EXPECT_EQ(back.sample_count, m.sample_count);
  EXPECT_EQ(back.max_cells, m.max_cells);
}

TEST(Serialize, MaterializedAndBasisRoundTrip) {
  const auto& m = smooth_model();
  const auto g = materialize(m, 2, 3, -1, true);
  const auto bytes = serialize_container(to_container(g));
  const auto back = materialized_from_container(
      parse_container(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()), "mem"));
  EXPECT_TRUE(back.sigma_xx == g.sigma_xx);
  EXPECT_TRUE(back.sigma_xy == g.sigma_xy);
  EXPECT_TRUE(back.sigma_yy == g.sigma_yy);
  EXPECT_TRUE(back.mu_x == g.mu_x);
  EXPECT_EQ(back.width_cells, 2);

  const auto b = image_eigenbasis(m, 8, 3, 24, 24, 8);
  const auto bb = serialize_container(to_container(b));
  const auto bback = basis_from_container(
      parse_container(std::span(reinterpret_cast<const unsigned char*>(bb.data()), bb.size()), "mem"));
  EXPECT_TRUE(bback.vectors == b.vectors);
  EXPECT_THROW(stationary_from_container(to_container(b)), CorruptError);
}
