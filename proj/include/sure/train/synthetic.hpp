#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sure/diffcore/tensor.hpp"
#include "sure/error.hpp"
#include "sure/geometry/ground_truth.hpp"
#include "sure/geometry/homography.hpp"
#include "sure/rng.hpp"

namespace sure::train {

/// Grayscale image with intensities in [0, 1], row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h, fill) {}

  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  float& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }

  template <class T>
  diff::Tensor<T> to_tensor() const {
    return diff::Tensor<T>::constant({1, height, width},
                                     std::vector<T>(pixels.begin(), pixels.end()));
  }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class Difficulty { easy, medium, hard };

inline std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  return "easy";
}

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "medium") return Difficulty::medium;
  if (s == "hard") return Difficulty::hard;
  throw InvalidArgument("unknown difficulty '" + s + "' (expected easy, medium or hard)");
}

struct WarpRanges {
  double max_rotation_deg = 10.0;
  double max_translation = 8.0;
  double min_scale = 1.0;
  double max_scale = 1.0;
  double max_perspective = 0.0;
};

inline WarpRanges ranges_for(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return {10.0, 8.0, 1.0, 1.0, 0.0};
    case Difficulty::medium: return {10.0, 8.0, 0.8, 1.25, 1e-3};
    case Difficulty::hard: return {45.0, 16.0, 0.8, 1.25, 3e-3};
  }
  return {};
}

struct SynthOptions {
  double noise_sigma = 0.02;
  double flat_fraction = 0.1;  // share of the image area covered by a flat patch
  std::optional<geo::Homography> forced_h;
};

struct SyntheticPair {
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::easy;
  Image image_a;
  Image image_b;
  geo::Homography h_true;
  geo::GroundTruth gt;
};

enum SeedStream : std::uint64_t { kTextureStream = 1, kWarpStream = 2, kNoiseStream = 3 };

namespace detail {

inline float quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

inline double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

/// One octave of value noise: random values on a lattice with `cell` pixel
/// spacing, smoothly interpolated.
inline void add_value_noise(std::vector<double>& acc, std::size_t w, std::size_t h, double cell,
                            double amplitude, Rng& rng) {
  const auto gw = static_cast<std::size_t>(std::ceil(static_cast<double>(w) / cell)) + 2;
  const auto gh = static_cast<std::size_t>(std::ceil(static_cast<double>(h) / cell)) + 2;
  std::vector<double> lattice(gw * gh);
  for (auto& v : lattice) v = rng.uniform();
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) / cell;
    const auto iy = static_cast<std::size_t>(fy);
    const double ty = smooth(fy - static_cast<double>(iy));
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / cell;
      const auto ix = static_cast<std::size_t>(fx);
      const double tx = smooth(fx - static_cast<double>(ix));
      const double v00 = lattice[iy * gw + ix], v01 = lattice[iy * gw + ix + 1];
      const double v10 = lattice[(iy + 1) * gw + ix], v11 = lattice[(iy + 1) * gw + ix + 1];
      const double top = v00 + tx * (v01 - v00), bot = v10 + tx * (v11 - v10);
      acc[y * w + x] += amplitude * (top + ty * (bot - top));
    }
  }
}

}  // namespace detail

/// Procedural texture: three octaves of value noise, a handful of filled
/// rectangles and ellipses, and one flat low-texture patch. Quantized to 8 bits.
inline Image make_texture(std::uint64_t seed, std::size_t width, std::size_t height,
                          double flat_fraction = 0.1) {
  Rng rng(seed);
  std::vector<double> acc(width * height, 0.0);
  detail::add_value_noise(acc, width, height, 16.0, 0.5, rng);
  detail::add_value_noise(acc, width, height, 8.0, 0.3, rng);
  detail::add_value_noise(acc, width, height, 4.0, 0.2, rng);

  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const auto shapes = 4 + rng.below(5);
  for (std::uint64_t s = 0; s < shapes; ++s) {
    const bool ellipse = rng.uniform() < 0.5;
    const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
    const double rx = rng.uniform(0.04, 0.18) * w, ry = rng.uniform(0.04, 0.18) * h;
    const double value = rng.uniform();
    const double blend = rng.uniform(0.5, 0.9);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0
                                    : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (inside) acc[y * width + x] = (1.0 - blend) * acc[y * width + x] + blend * value;
      }
  }

  if (flat_fraction > 0.0) {
    const double side = std::sqrt(std::clamp(flat_fraction, 0.0, 1.0));
    const auto fw = static_cast<std::size_t>(side * w), fh = static_cast<std::size_t>(side * h);
    const auto x0 = width > fw ? rng.below(width - fw + 1) : 0;
    const auto y0 = height > fh ? rng.below(height - fh + 1) : 0;
    const double value = rng.uniform(0.2, 0.8);
    for (std::size_t y = y0; y < y0 + fh; ++y)
      for (std::size_t x = x0; x < x0 + fw; ++x) acc[y * width + x] = value;
  }

  double lo = acc[0], hi = acc[0];
  for (double v : acc) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  Image img(width, height);
  for (std::size_t k = 0; k < acc.size(); ++k) img.pixels[k] = detail::quantize8((acc[k] - lo) / span);
  return img;
}

/// Bilinear sample at continuous image coordinates (pixel (i, j) covers
/// [j, j+1) x [i, i+1), its center at (j + 0.5, i + 0.5)). Returns nullopt
/// outside the image.
inline std::optional<double> sample_bilinear(const Image& img, double u, double v) {
  const double fx = u - 0.5, fy = v - 0.5;
  if (!(fx >= -0.5 && fy >= -0.5 && fx <= static_cast<double>(img.width) - 0.5 &&
        fy <= static_cast<double>(img.height) - 0.5))
    return std::nullopt;
  const double cx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
  const double cy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
  const auto x0 = static_cast<std::size_t>(cx), y0 = static_cast<std::size_t>(cy);
  const auto x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double tx = cx - static_cast<double>(x0), ty = cy - static_cast<double>(y0);
  const double top = img.at(x0, y0) + tx * (img.at(x1, y0) - img.at(x0, y0));
  const double bot = img.at(x0, y1) + tx * (img.at(x1, y1) - img.at(x0, y1));
  return top + ty * (bot - top);
}

/// B(p) = A(H^-1 p); pixels with no preimage in A are 0.
inline Image warp_image(const Image& a, const geo::Homography& h) {
  const auto inv = h.inverse();
  Image b(a.width, a.height);
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      const auto src = inv.apply({static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5});
      if (!src) continue;
      if (const auto v = sample_bilinear(a, src->x, src->y)) b.at(x, y) = static_cast<float>(*v);
    }
  return b;
}

/// Rotation, isotropic scale and perspective about the image center, then a
/// translation.
inline geo::Homography sample_homography(Rng& rng, Difficulty d, std::size_t width,
                                         std::size_t height) {
  const auto r = ranges_for(d);
  const double cx = 0.5 * static_cast<double>(width), cy = 0.5 * static_cast<double>(height);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double theta = rng.uniform(-r.max_rotation_deg, r.max_rotation_deg) * std::numbers::pi / 180.0;
    const double s = r.max_scale > r.min_scale
                         ? std::exp(rng.uniform(std::log(r.min_scale), std::log(r.max_scale)))
                         : r.min_scale;
    const double px = rng.uniform(-r.max_perspective, r.max_perspective);
    const double py = rng.uniform(-r.max_perspective, r.max_perspective);
    const double tx = rng.uniform(-r.max_translation, r.max_translation);
    const double ty = rng.uniform(-r.max_translation, r.max_translation);
    Eigen::Matrix3d to_origin, core, back;
    to_origin << 1, 0, -cx, 0, 1, -cy, 0, 0, 1;
    core << s * std::cos(theta), -s * std::sin(theta), 0, s * std::sin(theta), s * std::cos(theta),
        0, px, py, 1;
    back << 1, 0, cx + tx, 0, 1, cy + ty, 0, 0, 1;
    const Eigen::Matrix3d m = back * core * to_origin;
    if (std::abs(m.determinant() / (m(2, 2) * m(2, 2) * m(2, 2))) < 1e-6) continue;
    try {
      return geo::Homography(m);
    } catch (const InvalidArgument&) {
    }
  }
  throw NumericError("sample_homography: no non-degenerate homography after 100 draws");
}

/// Builds the pair for a known homography: texture and noise come from the
/// seed's streams, so re-rendering with a stored h_true reproduces the pair.
inline SyntheticPair render_pair(std::uint64_t seed, std::size_t size, Difficulty d,
                                 const geo::Homography& h, const SynthOptions& opts = {}) {
  if (size == 0 || size % 8 != 0)
    throw InvalidArgument("synthetic image size " + std::to_string(size) + " is not a positive multiple of 8");
  SyntheticPair p;
  p.seed = seed;
  p.difficulty = d;
  p.h_true = h;
  p.image_a = make_texture(derive_seed(seed, kTextureStream), size, size, opts.flat_fraction);
  p.image_b = warp_image(p.image_a, h);
  Rng noise(derive_seed(seed, kNoiseStream));
  for (auto& v : p.image_b.pixels) v = detail::quantize8(v + opts.noise_sigma * noise.normal());
  p.gt = geo::make_ground_truth(h, size, size);
  return p;
}

inline SyntheticPair generate_pair(std::uint64_t seed, std::size_t size, Difficulty d,
                                   const SynthOptions& opts = {}) {
  if (size == 0 || size % 8 != 0)
    throw InvalidArgument("synthetic image size " + std::to_string(size) + " is not a positive multiple of 8");
  geo::Homography h;
  if (opts.forced_h) {
    h = *opts.forced_h;
  } else {
    Rng rng(derive_seed(seed, kWarpStream));
    h = sample_homography(rng, d, size, size);
  }
  return render_pair(seed, size, d, h, opts);
}

}  // namespace sure::train
