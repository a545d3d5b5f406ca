#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "evssl/common.hpp"
#include "evssl/event.hpp"

namespace evssl {

// 2x3 affine map (x, y) -> (m0 x + m1 y + m2, m3 x + m4 y + m5) over pixel
// coordinates. In an augmented pair the stored transform maps strong-view
// (x_star) coordinates to weak-view (x_plus) coordinates, i.e. it is the
// sampling transform of the backward warp.
struct AffineTransform2D {
  double m[6] = {1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static AffineTransform2D identity() { return {}; }

  std::pair<double, double> apply(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }

  double det() const { return m[0] * m[4] - m[1] * m[3]; }

  AffineTransform2D inverse() const {
    const double d = det();
    require(std::abs(d) > 1e-9, ErrorKind::Usage,
            cat("affine inverse: transform is degenerate, |det| = ", std::abs(d)));
    AffineTransform2D r;
    r.m[0] = m[4] / d;
    r.m[1] = -m[1] / d;
    r.m[3] = -m[3] / d;
    r.m[4] = m[0] / d;
    r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
    r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
    return r;
  }

  // (this o inner): apply inner first, then this.
  AffineTransform2D compose(const AffineTransform2D& inner) const {
    AffineTransform2D r;
    r.m[0] = m[0] * inner.m[0] + m[1] * inner.m[3];
    r.m[1] = m[0] * inner.m[1] + m[1] * inner.m[4];
    r.m[2] = m[0] * inner.m[2] + m[1] * inner.m[5] + m[2];
    r.m[3] = m[3] * inner.m[0] + m[4] * inner.m[3];
    r.m[4] = m[3] * inner.m[1] + m[4] * inner.m[4];
    r.m[5] = m[3] * inner.m[2] + m[4] * inner.m[5] + m[5];
    return r;
  }
};

struct AffineRanges {
  double max_rotate_deg = 15.0;
  double min_scale = 0.8;
  double max_scale = 1.2;
  double max_translate_frac = 0.1;  // of each image dimension
  double max_shear_deg = 5.0;
};

// Random affine about the image center. Fixed draw order (rotation, scale x,
// scale y, shear, translate x, translate y) so a seed pins the transform.
// The linear part is R(theta) * Shear(k) * Scale(sx, sy), so the determinant
// is exactly sx * sy.
inline AffineTransform2D sample_affine(Rng& rng, const AffineRanges& r,
                                       int64_t width, int64_t height) {
  require(width > 0 && height > 0, ErrorKind::Usage,
          "sample_affine: image dimensions must be positive");
  require(r.min_scale > 0.0 && r.min_scale <= r.max_scale, ErrorKind::Usage,
          "sample_affine: invalid scale range");
  const double deg = Rng::kPi / 180.0;
  const double theta = rng.uniform(-r.max_rotate_deg * deg, r.max_rotate_deg * deg);
  const double sx = rng.uniform(r.min_scale, r.max_scale);
  const double sy = rng.uniform(r.min_scale, r.max_scale);
  const double shear = std::tan(rng.uniform(-r.max_shear_deg * deg, r.max_shear_deg * deg));
  const double tx = rng.uniform(-r.max_translate_frac, r.max_translate_frac) *
                    static_cast<double>(width);
  const double ty = rng.uniform(-r.max_translate_frac, r.max_translate_frac) *
                    static_cast<double>(height);

  const double c = std::cos(theta), s = std::sin(theta);
  // A = R * Shear * Scale
  const double a00 = c * sx, a01 = (c * shear - s) * sy;
  const double a10 = s * sx, a11 = (s * shear + c) * sy;

  const double cx = static_cast<double>(width - 1) / 2.0;
  const double cy = static_cast<double>(height - 1) / 2.0;
  AffineTransform2D t;
  t.m[0] = a00;
  t.m[1] = a01;
  t.m[3] = a10;
  t.m[4] = a11;
  // p -> A (p - c) + c + translation
  t.m[2] = cx - (a00 * cx + a01 * cy) + tx;
  t.m[5] = cy - (a10 * cx + a11 * cy) + ty;
  return t;
}

// Backward-warp every channel: out(x, y) = bilinear(in, T(x, y)), zero
// outside the source bounds. An identity transform reproduces the input
// bit-exactly because the integer-tap weights are exactly {1, 0}.
inline EventImage apply_affine(const EventImage& img, const AffineTransform2D& t) {
  require(std::abs(t.det()) > 1e-6, ErrorKind::Usage,
          "apply_affine: transform is degenerate");
  EventImage out;
  out.channels = img.channels;
  out.height = img.height;
  out.width = img.width;
  out.values.assign(img.values.size(), 0.0);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      const auto [sx, sy] = t.apply(static_cast<double>(x), static_cast<double>(y));
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
      const double fx = sx - fx0, fy = sy - fy0;
      const double w00 = (1.0 - fx) * (1.0 - fy);
      const double w10 = fx * (1.0 - fy);
      const double w01 = (1.0 - fx) * fy;
      const double w11 = fx * fy;
      for (int64_t c = 0; c < img.channels; ++c) {
        double v = 0.0;
        const auto tap = [&](int64_t xx, int64_t yy, double w) {
          if (w == 0.0) return;
          if (xx < 0 || xx >= img.width || yy < 0 || yy >= img.height) return;
          v += w * img.at(c, yy, xx);
        };
        tap(x0, y0, w00);
        tap(x0 + 1, y0, w10);
        tap(x0, y0 + 1, w01);
        tap(x0 + 1, y0 + 1, w11);
        out.at(c, y, x) = v;
      }
    }
  }
  return out;
}

struct BlurJitterParams {
  double blur_prob = 0.5;
  double min_sigma = 0.1;
  double max_sigma = 2.0;
  double jitter_prob = 0.8;
  double min_gain = 0.6;
  double max_gain = 1.4;
  double max_offset = 0.2;
};

// Optional gaussian blur followed by optional per-channel affine jitter of
// the cell values. All random draws happen unconditionally and in a fixed
// order (blur coin, sigma, jitter coin, then per-channel gain and offset), so
// the consumed stream length never depends on earlier draws.
inline EventImage blur_and_jitter(const EventImage& img, Rng& rng,
                                  const BlurJitterParams& p) {
  require(p.min_sigma > 0.0 && p.min_sigma <= p.max_sigma, ErrorKind::Usage,
          "blur_and_jitter: invalid sigma range");
  const bool do_blur = rng.uniform() < p.blur_prob;
  const double sigma = rng.uniform(p.min_sigma, p.max_sigma);
  const bool do_jitter = rng.uniform() < p.jitter_prob;
  std::vector<double> gain(static_cast<size_t>(img.channels));
  std::vector<double> offset(static_cast<size_t>(img.channels));
  for (int64_t c = 0; c < img.channels; ++c) {
    gain[static_cast<size_t>(c)] = rng.uniform(p.min_gain, p.max_gain);
    offset[static_cast<size_t>(c)] = rng.uniform(-p.max_offset, p.max_offset);
  }

  EventImage out = img;
  if (do_blur) {
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
      const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
      kernel[static_cast<size_t>(i + radius)] = w;
      ksum += w;
    }
    for (double& w : kernel) w /= ksum;
    // separable passes, zero padding outside
    EventImage tmp = out;
    for (int64_t c = 0; c < img.channels; ++c) {
      for (int64_t y = 0; y < img.height; ++y) {
        for (int64_t x = 0; x < img.width; ++x) {
          double v = 0.0;
          for (int64_t i = -radius; i <= radius; ++i) {
            const int64_t xx = x + i;
            if (xx < 0 || xx >= img.width) continue;
            v += kernel[static_cast<size_t>(i + radius)] * out.at(c, y, xx);
          }
          tmp.at(c, y, x) = v;
        }
      }
    }
    for (int64_t c = 0; c < img.channels; ++c) {
      for (int64_t y = 0; y < img.height; ++y) {
        for (int64_t x = 0; x < img.width; ++x) {
          double v = 0.0;
          for (int64_t i = -radius; i <= radius; ++i) {
            const int64_t yy = y + i;
            if (yy < 0 || yy >= img.height) continue;
            v += kernel[static_cast<size_t>(i + radius)] * tmp.at(c, yy, x);
          }
          out.at(c, y, x) = v;
        }
      }
    }
  }
  if (do_jitter) {
    for (int64_t c = 0; c < img.channels; ++c) {
      for (int64_t y = 0; y < img.height; ++y) {
        for (int64_t x = 0; x < img.width; ++x) {
          out.at(c, y, x) = gain[static_cast<size_t>(c)] * out.at(c, y, x) +
                            offset[static_cast<size_t>(c)];
        }
      }
    }
  }
  return out;
}

// Non-overlapping patch tiling in row-major order: patch i covers rows
// [row*P, (row+1)*P) and columns [col*P, (col+1)*P) with row = i / cols.
struct PatchGrid {
  int64_t patch = 0;
  int64_t rows = 0;
  int64_t cols = 0;

  int64_t count() const { return rows * cols; }
  int64_t row_of(int64_t i) const { return i / cols; }
  int64_t col_of(int64_t i) const { return i % cols; }
};

inline PatchGrid make_patch_grid(int64_t height, int64_t width, int64_t patch) {
  require(patch >= 1, ErrorKind::Usage, "patch grid: patch size must be >= 1");
  require(height % patch == 0 && width % patch == 0, ErrorKind::Usage,
          cat("patch grid: patch size ", patch, " must divide image ", width, "x",
              height));
  return {patch, height / patch, width / patch};
}

// For each strong-view patch, the weak-view patch its center lands in, or
// kInvalid when the mapped center falls outside the image.
struct CorrespondenceMap {
  static constexpr int32_t kInvalid = -1;
  std::vector<int32_t> target;

  int64_t valid_count() const {
    int64_t n = 0;
    for (int32_t t : target) n += (t != kInvalid);
    return n;
  }
};

inline CorrespondenceMap build_correspondence(const AffineTransform2D& star_to_plus,
                                              const PatchGrid& grid, int64_t height,
                                              int64_t width) {
  require(std::abs(star_to_plus.det()) > 1e-6, ErrorKind::Usage,
          "build_correspondence: transform is degenerate");
  require(grid.rows * grid.patch == height && grid.cols * grid.patch == width,
          ErrorKind::Usage, "build_correspondence: grid does not tile the image");
  CorrespondenceMap map;
  map.target.assign(static_cast<size_t>(grid.count()), CorrespondenceMap::kInvalid);
  const double half = static_cast<double>(grid.patch - 1) / 2.0;
  for (int64_t i = 0; i < grid.count(); ++i) {
    const double cx = static_cast<double>(grid.col_of(i) * grid.patch) + half;
    const double cy = static_cast<double>(grid.row_of(i) * grid.patch) + half;
    const auto [px, py] = star_to_plus.apply(cx, cy);
    if (px < -0.5 || px >= static_cast<double>(width) - 0.5 || py < -0.5 ||
        py >= static_cast<double>(height) - 0.5) {
      continue;
    }
    const int64_t ix = static_cast<int64_t>(std::floor(px + 0.5));
    const int64_t iy = static_cast<int64_t>(std::floor(py + 0.5));
    map.target[static_cast<size_t>(i)] =
        static_cast<int32_t>((iy / grid.patch) * grid.cols + (ix / grid.patch));
  }
  return map;
}

// Binary patch mask with exactly round(ratio * n) ones, placed by a partial
// Fisher-Yates shuffle so every subset of that size is equally likely.
struct MaskVector {
  std::vector<uint8_t> m;

  int64_t count() const {
    int64_t n = 0;
    for (uint8_t b : m) n += b;
    return n;
  }
};

inline MaskVector sample_mask(Rng& rng, int64_t n, double ratio) {
  require(n >= 1, ErrorKind::Usage, "sample_mask: need at least one patch");
  require(std::isfinite(ratio) && ratio > 0.0 && ratio <= 1.0, ErrorKind::Usage,
          cat("sample_mask: ratio must be in (0, 1], got ", ratio));
  const int64_t count = std::llround(ratio * static_cast<double>(n));
  require(count >= 1, ErrorKind::Usage,
          cat("sample_mask: ratio ", ratio, " rounds to an empty mask for ", n,
              " patches"));
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  MaskVector mask;
  mask.m.assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < count; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    mask.m[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  }
  return mask;
}

// A weak/strong view pair: x_star = jitter(blur(affine(x_plus))) with the
// affine sampled here; the stored transform maps x_star coords to x_plus
// coords and drives the patch correspondence.
struct AugmentedPair {
  EventImage x_plus;
  EventImage x_star;
  AffineTransform2D star_to_plus;
  CorrespondenceMap correspondence;
};

inline AugmentedPair make_augmented_pair(const EventImage& x_plus, Rng& rng,
                                         const AffineRanges& ranges,
                                         const BlurJitterParams& bj,
                                         const PatchGrid& grid) {
  AugmentedPair pair;
  pair.x_plus = x_plus;
  pair.star_to_plus = sample_affine(rng, ranges, x_plus.width, x_plus.height);
  pair.x_star = blur_and_jitter(apply_affine(x_plus, pair.star_to_plus), rng, bj);
  pair.correspondence =
      build_correspondence(pair.star_to_plus, grid, x_plus.height, x_plus.width);
  return pair;
}

}  // namespace evssl
