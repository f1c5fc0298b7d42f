#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fvtb/errors.hpp"

namespace fvtb {

/// Row-major raster with interleaved channels (1 = gray, 3 = RGB).
/// Loaded and saved images live in [0,1]; intermediates may leave that range.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c = 1, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {
    if (w < 0 || h < 0 || (c != 1 && c != 3))
      throw DimensionError("image: invalid geometry");
  }

  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
  bool empty() const { return data.empty(); }

  double& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool operator==(const Image&) const = default;
};

inline Image to_luminance(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const double* p = &img.data[i * 3];
    out.data[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return out;
}

/// Crops [x, x+w) x [y, y+h). Coordinates outside the image replicate the
/// nearest edge pixel.
inline Image crop(const Image& img, int x, int y, int w, int h) {
  if (img.empty()) throw DimensionError("crop: empty image");
  Image out(w, h, img.channels);
  for (int r = 0; r < h; ++r) {
    const int sy = std::clamp(y + r, 0, img.height - 1);
    for (int c = 0; c < w; ++c) {
      const int sx = std::clamp(x + c, 0, img.width - 1);
      for (int k = 0; k < img.channels; ++k) out.at(c, r, k) = img.at(sx, sy, k);
    }
  }
  return out;
}

/// Bilinear resampling with pixel-center alignment. Same-size input is
/// returned unchanged.
inline Image resize_bilinear(const Image& img, int w, int h) {
  if (w <= 0 || h <= 0 || img.empty()) throw DimensionError("resize: empty geometry");
  if (w == img.width && h == img.height) return img;
  Image out(w, h, img.channels);
  const double sx = static_cast<double>(img.width) / w;
  const double sy = static_cast<double>(img.height) / h;
  for (int r = 0; r < h; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double ay = fy - y0;
    for (int c = 0; c < w; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double ax = fx - x0;
      for (int k = 0; k < img.channels; ++k) {
        const double top = img.at(x0, y0, k) * (1 - ax) + img.at(x1, y0, k) * ax;
        const double bot = img.at(x0, y1, k) * (1 - ax) + img.at(x1, y1, k) * ax;
        out.at(c, r, k) = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

/// Linear-interpolated percentile, q in [0,1].
inline double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw DimensionError("percentile: no values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - lo);
}

/// Affine map sending the 1st/99th percentiles to 0/1, clamped. A flat input
/// maps to 0.5 everywhere.
inline Image display_rescale(const Image& img, double lo_q = 0.01, double hi_q = 0.99) {
  Image out = img;
  if (img.empty()) return out;
  double lo = percentile(img.data, lo_q);
  double hi = percentile(img.data, hi_q);
  if (!(hi - lo > 1e-12)) {
    const auto [mn, mx] = std::minmax_element(img.data.begin(), img.data.end());
    lo = *mn;
    hi = *mx;
  }
  if (!(hi - lo > 1e-12)) {
    std::fill(out.data.begin(), out.data.end(), 0.5);
    return out;
  }
  for (double& v : out.data) v = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return out;
}

inline Image clamp01(Image img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Places images left to right on a black canvas, vertically centered.
/// Gray panels are promoted when any panel is RGB.
inline Image hconcat(std::span<const Image> panels, int gap = 4) {
  int w = 0, h = 0, c = 1;
  for (const auto& p : panels) {
    w += p.width;
    h = std::max(h, p.height);
    c = std::max(c, p.channels);
  }
  if (!panels.empty()) w += gap * static_cast<int>(panels.size() - 1);
  Image out(w, h, c);
  int x0 = 0;
  for (const auto& p : panels) {
    const int y0 = (h - p.height) / 2;
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x)
        for (int k = 0; k < c; ++k)
          out.at(x0 + x, y0 + y, k) = p.at(x, y, p.channels == 1 ? 0 : k);
    x0 += p.width + gap;
  }
  return out;
}

}  // namespace fvtb
