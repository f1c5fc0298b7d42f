#pragma once

// Loop-per-pair second moments of a single image (lagged sums over the
// full sample count), for checking the fast
// estimator's index bookkeeping. Offsets follow the (dx, dy) convention.

#include <cmath>
#include <vector>

#include "fvtb/hog.hpp"
#include "fvtb/image.hpp"

namespace fvtb::oracle {

struct NaiveMoments {
  double mu_pixel = 0;
  std::vector<double> mu_hog;
  // cov_pp(dx, dy), cov_ph(dx, dy, c), cov_hh(dx, dy, c, c')
  int T = 0, cs = 8, depth = 31;
  const Image* img = nullptr;
  HogDescriptor hog;

  double cov_pp(int dx, int dy) const {
    double s = 0;
    for (int y = 0; y < img->height; ++y)
      for (int x = 0; x < img->width; ++x) {
        const int x2 = x + dx, y2 = y + dy;
        if (x2 < 0 || y2 < 0 || x2 >= img->width || y2 >= img->height) continue;
        s += (img->at(x, y) - mu_pixel) * (img->at(x2, y2) - mu_pixel);
      }
    return s / static_cast<double>(img->width * img->height);
  }

  double cov_ph(int dx, int dy, int c) const {
    double s = 0;
    for (int qy = 0; qy < hog.cells_y; ++qy)
      for (int qx = 0; qx < hog.cells_x; ++qx) {
        const int x = cs * (qx + 1) + dx, y = cs * (qy + 1) + dy;
        if (x < 0 || y < 0 || x >= hog.pixel_width() || y >= hog.pixel_height()) continue;
        s += (img->at(x, y) - mu_pixel) * (hog.at(qx, qy, c) - mu_hog[c]);
      }
    return s / static_cast<double>(hog.cells());
  }

  double cov_hh(int dx, int dy, int c, int c2) const {
    double s = 0;
    for (int qy = 0; qy < hog.cells_y; ++qy)
      for (int qx = 0; qx < hog.cells_x; ++qx) {
        const int x = qx + dx, y = qy + dy;
        if (x < 0 || y < 0 || x >= hog.cells_x || y >= hog.cells_y) continue;
        s += (hog.at(qx, qy, c) - mu_hog[c]) * (hog.at(x, y, c2) - mu_hog[c2]);
      }
    return s / static_cast<double>(hog.cells());
  }
};

inline NaiveMoments naive_moments(const Image& gray, int T, const HogConfig& cfg = {}) {
  NaiveMoments m;
  m.T = T;
  m.cs = cfg.cell_size;
  m.depth = cfg.depth();
  m.img = &gray;
  m.hog = compute_hog(gray, cfg);
  double s = 0;
  for (double v : gray.data) s += v;
  m.mu_pixel = s / static_cast<double>(gray.data.size());
  m.mu_hog.assign(m.depth, 0.0);
  for (int qy = 0; qy < m.hog.cells_y; ++qy)
    for (int qx = 0; qx < m.hog.cells_x; ++qx)
      for (int c = 0; c < m.depth; ++c) m.mu_hog[c] += m.hog.at(qx, qy, c);
  for (double& v : m.mu_hog) v /= static_cast<double>(m.hog.cells());
  return m;
}

}  // namespace fvtb::oracle
