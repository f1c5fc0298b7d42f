#pragma once

// 31-channel HOG in the deformable-parts-model layout:
//   [0, 2n)       contrast-sensitive orientation bins (n = cfg.orientations)
//   [2n, 3n)      contrast-insensitive bins
//   [3n, 3n + 4)  texture energy, one per normalization block

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/image.hpp"

namespace fvtb {

struct HogConfig {
  int cell_size = 8;
  int orientations = 9;  // unsigned bins; signed bins are twice this
  double truncation = 0.2;

  int depth() const { return 3 * orientations + 4; }
  int signed_bins() const { return 2 * orientations; }

  void validate() const {
    if (cell_size < 2) throw ConfigError("hog: cell_size must be >= 2");
    if (orientations < 2) throw ConfigError("hog: orientations must be >= 2");
    if (!(truncation > 0)) throw ConfigError("hog: truncation must be positive");
  }

  /// Pixel side of the raster whose descriptor has `cells` cells per side.
  int pixels_for(int cells) const { return (cells + 2) * cell_size; }

  bool operator==(const HogConfig&) const = default;
};

struct HogDescriptor {
  int cells_x = 0;
  int cells_y = 0;
  int depth = 31;
  int cell_size = 8;
  std::vector<double> data;

  HogDescriptor() = default;
  HogDescriptor(int cx, int cy, int d, int cs = 8)
      : cells_x(cx), cells_y(cy), depth(d), cell_size(cs),
        data(static_cast<std::size_t>(cx) * cy * d, 0.0) {}

  std::size_t cells() const { return static_cast<std::size_t>(cells_x) * cells_y; }

  double& at(int cx, int cy, int c) {
    return data[(static_cast<std::size_t>(cy) * cells_x + cx) * depth + c];
  }
  double at(int cx, int cy, int c) const {
    return data[(static_cast<std::size_t>(cy) * cells_x + cx) * depth + c];
  }

  /// Width/height of the pixel raster this descriptor inverts to.
  int pixel_width() const { return (cells_x + 2) * cell_size; }
  int pixel_height() const { return (cells_y + 2) * cell_size; }

  /// Copies the w x h cell window whose top-left cell is (x0, y0).
  HogDescriptor window(int x0, int y0, int w, int h) const {
    if (x0 < 0 || y0 < 0 || x0 + w > cells_x || y0 + h > cells_y)
      throw DimensionError("hog window out of range");
    HogDescriptor out(w, h, depth, cell_size);
    for (int y = 0; y < h; ++y)
      std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(
                                   (static_cast<std::size_t>(y0 + y) * cells_x + x0) * depth),
                  static_cast<std::size_t>(w) * depth, &out.at(0, y, 0));
    return out;
  }

  bool operator==(const HogDescriptor&) const = default;
};

namespace detail {

// Gradients are snapped to a 2^-24 grid so that adding a constant to the
// image cannot change a descriptor through rounding in the subtraction.
inline double snap_gradient(double g) {
  constexpr double kScale = 16777216.0;
  return std::nearbyint(g * kScale) / kScale;
}

inline constexpr double kHogEps = 1e-4;
inline constexpr double kTextureWeight = 0.2357;
// Gradients are measured in 8-bit units so kHogEps keeps its usual meaning.
inline constexpr double kIntensityScale = 255.0;

}  // namespace detail

/// HOG descriptor of a 1- or 3-channel image. For RGB input each pixel uses
/// the channel with the largest gradient magnitude. The outermost ring of
/// cells is only used for normalization and is dropped from the output.
inline HogDescriptor compute_hog(const Image& image, const HogConfig& cfg = {}) {
  cfg.validate();
  const int cs = cfg.cell_size;
  const int bx = image.width / cs;
  const int by = image.height / cs;
  if (bx < 3 || by < 3)
    throw DimensionError("compute_hog: image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " too small for one interior cell");
  const int nb = cfg.signed_bins();
  const int no = cfg.orientations;
  const int vw = bx * cs;
  const int vh = by * cs;
  const int W = image.width;
  const int H = image.height;

  std::vector<double> hist(static_cast<std::size_t>(bx) * by * nb, 0.0);
  auto bin = [&](int ix, int iy) { return &hist[(static_cast<std::size_t>(iy) * bx + ix) * nb]; };

  for (int y = 0; y < vh; ++y) {
    const int yp = std::min(y + 1, H - 1), ym = std::max(y - 1, 0);
    for (int x = 0; x < vw; ++x) {
      const int xp = std::min(x + 1, W - 1), xm = std::max(x - 1, 0);
      double dx = 0, dy = 0, mag2 = -1;
      for (int c = 0; c < image.channels; ++c) {
        const double gx = detail::snap_gradient(image.at(xp, y, c) - image.at(xm, y, c));
        const double gy = detail::snap_gradient(image.at(x, yp, c) - image.at(x, ym, c));
        const double m2 = gx * gx + gy * gy;
        if (m2 > mag2) {
          mag2 = m2;
          dx = gx;
          dy = gy;
        }
      }
      if (mag2 <= 0) continue;
      const double mag = std::sqrt(mag2) * detail::kIntensityScale;

      double angle = std::atan2(dy, dx);
      if (angle < 0) angle += 2 * std::numbers::pi;
      double pos = angle * nb / (2 * std::numbers::pi);
      int o0 = static_cast<int>(std::floor(pos));
      const double ao = pos - o0;
      o0 %= nb;
      const int o1 = (o0 + 1) % nb;

      const double xq = (x + 0.5) / cs - 0.5;
      const double yq = (y + 0.5) / cs - 0.5;
      const int ix = static_cast<int>(std::floor(xq));
      const int iy = static_cast<int>(std::floor(yq));
      const double ax = xq - ix, ay = yq - iy;

      auto vote = [&](int cx, int cy, double w) {
        if (cx < 0 || cy < 0 || cx >= bx || cy >= by) return;
        double* h = bin(cx, cy);
        h[o0] += w * mag * (1 - ao);
        h[o1] += w * mag * ao;
      };
      vote(ix, iy, (1 - ax) * (1 - ay));
      vote(ix + 1, iy, ax * (1 - ay));
      vote(ix, iy + 1, (1 - ax) * ay);
      vote(ix + 1, iy + 1, ax * ay);
    }
  }

  std::vector<double> energy(static_cast<std::size_t>(bx) * by, 0.0);
  for (int iy = 0; iy < by; ++iy)
    for (int ix = 0; ix < bx; ++ix) {
      const double* h = bin(ix, iy);
      double e = 0;
      for (int o = 0; o < no; ++o) e += (h[o] + h[o + no]) * (h[o] + h[o + no]);
      energy[static_cast<std::size_t>(iy) * bx + ix] = e;
    }
  auto block = [&](int ix, int iy) {
    auto E = [&](int a, int b) { return energy[static_cast<std::size_t>(b) * bx + a]; };
    return 1.0 / std::sqrt(E(ix, iy) + E(ix + 1, iy) + E(ix, iy + 1) + E(ix + 1, iy + 1) +
                           detail::kHogEps);
  };

  HogDescriptor out(bx - 2, by - 2, cfg.depth(), cs);
  const double trunc = cfg.truncation;
  for (int cy = 0; cy < out.cells_y; ++cy)
    for (int cx = 0; cx < out.cells_x; ++cx) {
      const int ix = cx + 1, iy = cy + 1;
      const double n[4] = {block(ix, iy), block(ix, iy - 1), block(ix - 1, iy),
                           block(ix - 1, iy - 1)};
      const double* h = bin(ix, iy);
      double* dst = &out.at(cx, cy, 0);
      double t[4] = {0, 0, 0, 0};
      for (int o = 0; o < nb; ++o) {
        double s = 0;
        for (int k = 0; k < 4; ++k) {
          const double v = std::min(h[o] * n[k], trunc);
          s += v;
          t[k] += v;
        }
        dst[o] = 0.5 * s;
      }
      for (int o = 0; o < no; ++o) {
        const double sum = h[o] + h[o + no];
        double s = 0;
        for (int k = 0; k < 4; ++k) s += std::min(sum * n[k], trunc);
        dst[nb + o] = 0.5 * s;
      }
      for (int k = 0; k < 4; ++k) dst[nb + no + k] = detail::kTextureWeight * t[k];
    }
  return out;
}

/// Elementwise max(v, 0); used to display detector weights as features.
inline HogDescriptor positive_part(HogDescriptor d) {
  for (double& v : d.data) v = std::max(v, 0.0);
  return d;
}

/// Black-and-white glyph: one segment per contrast-insensitive bin, drawn
/// perpendicular to the bin's gradient direction, brightness proportional to
/// the (positive) bin weight, normalized so the brightest pixel is 1.
inline Image render_glyph(const HogDescriptor& d, int cell_pixels = 20, int orientations = 9) {
  if (cell_pixels < 8) throw ConfigError("render_glyph: cell_pixels must be >= 8");
  if (d.depth < 3 * orientations) throw DimensionError("render_glyph: descriptor too shallow");
  Image out(d.cells_x * cell_pixels, d.cells_y * cell_pixels, 1);
  const int first = 2 * orientations;
  const int mid = cell_pixels / 2;
  const double radius = mid - 1;

  for (int cy = 0; cy < d.cells_y; ++cy)
    for (int cx = 0; cx < d.cells_x; ++cx)
      for (int o = 0; o < orientations; ++o) {
        const double w = std::max(d.at(cx, cy, first + o), 0.0);
        if (w <= 0) continue;
        const double theta = o * std::numbers::pi / orientations;
        const int ex = static_cast<int>(std::lround(-std::sin(theta) * radius));
        const int ey = static_cast<int>(std::lround(std::cos(theta) * radius));
        const int x0 = mid - ex, y0 = mid - ey, x1 = mid + ex, y1 = mid + ey;
        const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
        for (int s = 0; s <= steps; ++s) {
          const double t = steps == 0 ? 0.0 : static_cast<double>(s) / steps;
          const int px = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
          const int py = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
          out.at(cx * cell_pixels + px, cy * cell_pixels + py) += w;
        }
      }
  const double mx = out.data.empty() ? 0.0 : *std::max_element(out.data.begin(), out.data.end());
  if (mx > 0)
    for (double& v : out.data) v /= mx;
  return out;
}

}  // namespace fvtb
