#pragma once
// Per-image K-means over patch features: k-means++ seeding, Lloyd refinement
// with empty-cluster reseeding, assignment transfer across augmented views,
// and gathering of member features per context.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evssl/augment.hpp"
#include "evssl/common.hpp"
#include "evssl/png_io.hpp"
#include "evssl/tensor.hpp"

namespace evssl {

// One-hot membership matrix over N patches and K contexts. Rows flagged
// invalid stay all-zero and are skipped by every consumer.
struct ContextAssignment {
  int64_t n = 0;
  int64_t k = 0;
  std::vector<uint8_t> onehot;  // [n, k] row-major
  std::vector<uint8_t> valid;   // [n]

  static ContextAssignment zeros(int64_t n, int64_t k) {
    require(n >= 0 && k >= 1, ErrorKind::Usage,
            "ContextAssignment: need n >= 0 and k >= 1");
    ContextAssignment a;
    a.n = n;
    a.k = k;
    a.onehot.assign(static_cast<size_t>(n * k), 0);
    a.valid.assign(static_cast<size_t>(n), 0);
    return a;
  }

  void set_label(int64_t i, int64_t cluster) {
    require(i >= 0 && i < n && cluster >= 0 && cluster < k, ErrorKind::Usage,
            "ContextAssignment::set_label: index out of range");
    std::fill_n(onehot.begin() + i * k, k, uint8_t{0});
    onehot[static_cast<size_t>(i * k + cluster)] = 1;
    valid[static_cast<size_t>(i)] = 1;
  }

  void invalidate(int64_t i) {
    require(i >= 0 && i < n, ErrorKind::Usage,
            "ContextAssignment::invalidate: index out of range");
    std::fill_n(onehot.begin() + i * k, k, uint8_t{0});
    valid[static_cast<size_t>(i)] = 0;
  }

  // -1 for invalid rows.
  int64_t label(int64_t i) const {
    require(i >= 0 && i < n, ErrorKind::Usage,
            "ContextAssignment::label: index out of range");
    if (!valid[static_cast<size_t>(i)]) return -1;
    for (int64_t c = 0; c < k; ++c)
      if (onehot[static_cast<size_t>(i * k + c)]) return c;
    throw_data("ContextAssignment: valid row without a set bit");
  }

  int64_t valid_count() const {
    int64_t c = 0;
    for (uint8_t v : valid) c += v;
    return c;
  }
};

struct ContextSet {
  int64_t k = 0;
  int64_t dim = 0;
  std::vector<double> centers;  // [k, dim]
  std::vector<int64_t> counts;  // [k]

  std::span<const double> center(int64_t c) const {
    require(c >= 0 && c < k, ErrorKind::Usage, "ContextSet::center: index out of range");
    return {centers.data() + c * dim, static_cast<size_t>(dim)};
  }
};

struct KmeansResult {
  ContextSet set;
  ContextAssignment assignment;
  // Objective after each assignment pass: one entry per Lloyd iteration plus
  // the final exact reassignment. Non-increasing by construction.
  std::vector<double> objectives;

  double objective() const { return objectives.back(); }
};

namespace detail {

inline double sqdist(const double* a, const double* b, int64_t d) {
  double s = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

}  // namespace detail

// k-means++ seeding: first center uniform, the rest sampled proportional to
// the squared distance from the nearest already-chosen center.
inline std::vector<double> kmeanspp_init(std::span<const double> features, int64_t n,
                                         int64_t d, int64_t k, Rng& rng) {
  require(n >= 1 && d >= 1 && k >= 1, ErrorKind::Usage,
          "kmeanspp_init: need n, d, k >= 1");
  require(static_cast<int64_t>(features.size()) == n * d, ErrorKind::Usage,
          "kmeanspp_init: feature buffer size mismatch");
  std::vector<double> centers;
  centers.reserve(static_cast<size_t>(k * d));
  const double* f = features.data();

  const int64_t first = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
  centers.insert(centers.end(), f + first * d, f + (first + 1) * d);

  std::vector<double> best(static_cast<size_t>(n),
                           std::numeric_limits<double>::infinity());
  for (int64_t c = 1; c < k; ++c) {
    const double* last = centers.data() + (c - 1) * d;
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      best[static_cast<size_t>(i)] =
          std::min(best[static_cast<size_t>(i)], detail::sqdist(f + i * d, last, d));
      total += best[static_cast<size_t>(i)];
    }
    int64_t pick = n - 1;
    if (total > 0.0) {
      const double r = rng.uniform(0.0, total);
      double cum = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        cum += best[static_cast<size_t>(i)];
        if (cum >= r) {
          pick = i;
          break;
        }
      }
    } else {
      // Every point coincides with a chosen center; any pick works.
      pick = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
    }
    centers.insert(centers.end(), f + pick * d, f + (pick + 1) * d);
  }
  return centers;
}

// Lloyd refinement from explicit initial centers. Assignments use squared
// Euclidean distance with ties broken by lowest cluster index; a cluster left
// empty by an assignment pass is reseeded with the point farthest from its
// current center. The returned assignment is an exact nearest-center
// assignment against the returned centers.
inline KmeansResult lloyd(std::span<const double> features, int64_t n, int64_t d,
                          int64_t k, int64_t iters, std::vector<double> centers) {
  require(k >= 1, ErrorKind::Usage, "lloyd: need k >= 1");
  require(n >= k, ErrorKind::Usage,
          cat("lloyd: need at least as many points as clusters, got n=", n, " k=", k));
  require(d >= 1 && iters >= 0, ErrorKind::Usage, "lloyd: need d >= 1 and iters >= 0");
  require(static_cast<int64_t>(features.size()) == n * d, ErrorKind::Usage,
          "lloyd: feature buffer size mismatch");
  require(static_cast<int64_t>(centers.size()) == k * d, ErrorKind::Usage,
          "lloyd: center buffer size mismatch");
  for (double v : centers)
    require(std::isfinite(v), ErrorKind::Data, "lloyd: non-finite initial center");

  const double* f = features.data();
  std::vector<int64_t> labels(static_cast<size_t>(n), 0);
  std::vector<int64_t> counts(static_cast<size_t>(k), 0);

  const auto assign_all = [&]() {
    std::fill(counts.begin(), counts.end(), int64_t{0});
    for (int64_t i = 0; i < n; ++i) {
      int64_t bc = 0;
      double bd = detail::sqdist(f + i * d, centers.data(), d);
      for (int64_t c = 1; c < k; ++c) {
        const double dist = detail::sqdist(f + i * d, centers.data() + c * d, d);
        if (dist < bd) {
          bd = dist;
          bc = c;
        }
      }
      labels[static_cast<size_t>(i)] = bc;
      ++counts[static_cast<size_t>(bc)];
    }
  };

  const auto reseed_empty = [&]() {
    for (int64_t e = 0; e < k; ++e) {
      if (counts[static_cast<size_t>(e)] != 0) continue;
      // Steal the point farthest from its own center, from a cluster that can
      // spare one. Whenever an empty cluster exists some cluster has >= 2
      // members (n >= k and every point is assigned).
      int64_t take = -1;
      double far = -1.0;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t c = labels[static_cast<size_t>(i)];
        if (counts[static_cast<size_t>(c)] < 2) continue;
        const double dist = detail::sqdist(f + i * d, centers.data() + c * d, d);
        if (dist > far) {
          far = dist;
          take = i;
        }
      }
      require(take >= 0, ErrorKind::Data, "lloyd: no donor point for empty cluster");
      --counts[static_cast<size_t>(labels[static_cast<size_t>(take)])];
      labels[static_cast<size_t>(take)] = e;
      counts[static_cast<size_t>(e)] = 1;
      std::copy(f + take * d, f + (take + 1) * d, centers.begin() + e * d);
    }
  };

  const auto objective_of = [&]() {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i)
      s += detail::sqdist(f + i * d, centers.data() + labels[static_cast<size_t>(i)] * d, d);
    return s;
  };

  KmeansResult res;
  res.objectives.reserve(static_cast<size_t>(iters + 1));
  for (int64_t it = 0; it < iters; ++it) {
    assign_all();
    reseed_empty();
    res.objectives.push_back(objective_of());
    std::vector<double> sums(static_cast<size_t>(k * d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const int64_t c = labels[static_cast<size_t>(i)];
      for (int64_t j = 0; j < d; ++j) sums[static_cast<size_t>(c * d + j)] += f[i * d + j];
    }
    for (int64_t c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // keeps reseeded position
      const double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(c)]);
      for (int64_t j = 0; j < d; ++j)
        centers[static_cast<size_t>(c * d + j)] = sums[static_cast<size_t>(c * d + j)] * inv;
    }
  }
  assign_all();
  res.objectives.push_back(objective_of());

  res.set.k = k;
  res.set.dim = d;
  res.set.centers = std::move(centers);
  res.set.counts = counts;
  res.assignment = ContextAssignment::zeros(n, k);
  for (int64_t i = 0; i < n; ++i) res.assignment.set_label(i, labels[static_cast<size_t>(i)]);
  return res;
}

inline KmeansResult kmeans(std::span<const double> features, int64_t n, int64_t d,
                           int64_t k, int64_t iters, Rng& rng) {
  require(k >= 1 && n >= k, ErrorKind::Usage,
          cat("kmeans: need n >= k >= 1, got n=", n, " k=", k));
  return lloyd(features, n, d, k, iters, kmeanspp_init(features, n, d, k, rng));
}

// L2-normalizes each feature row into a double buffer and clusters that.
// Works off raw values, so nothing is recorded on any tape.
template <typename S>
KmeansResult mine_contexts(std::span<const S> features, int64_t n, int64_t d,
                           int64_t k, int64_t iters, Rng& rng) {
  require(n >= 1 && d >= 1, ErrorKind::Usage, "mine_contexts: need n, d >= 1");
  require(static_cast<int64_t>(features.size()) == n * d, ErrorKind::Usage,
          "mine_contexts: feature buffer size mismatch");
  std::vector<double> unit(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(features[static_cast<size_t>(i * d + j)]);
      unit[static_cast<size_t>(i * d + j)] = v;
      ss += v * v;
    }
    if (ss > 0.0) {
      const double inv = 1.0 / std::sqrt(ss);
      for (int64_t j = 0; j < d; ++j) unit[static_cast<size_t>(i * d + j)] *= inv;
    }
  }
  return kmeans(std::span<const double>(unit), n, d, k, iters, rng);
}

// a_star[i] = a_plus[corr(i)] where the correspondence is valid; every other
// row stays invalid. Memberships are only ever copied, never invented.
inline ContextAssignment transfer_assignments(const ContextAssignment& a_plus,
                                              const CorrespondenceMap& corr) {
  const int64_t n = static_cast<int64_t>(corr.target.size());
  ContextAssignment a = ContextAssignment::zeros(n, a_plus.k);
  for (int64_t i = 0; i < n; ++i) {
    const int32_t t = corr.target[static_cast<size_t>(i)];
    if (t == CorrespondenceMap::kInvalid) continue;
    require(t >= 0 && t < a_plus.n, ErrorKind::Usage,
            cat("transfer_assignments: correspondence target ", t,
                " outside assignment with ", a_plus.n, " rows"));
    if (!a_plus.valid[static_cast<size_t>(t)]) continue;
    std::copy_n(a_plus.onehot.begin() + t * a_plus.k, a_plus.k,
                a.onehot.begin() + i * a_plus.k);
    a.valid[static_cast<size_t>(i)] = 1;
  }
  return a;
}

// Indices of the valid patches assigned to `cluster`, in patch order.
inline std::vector<int64_t> context_members(const ContextAssignment& a, int64_t cluster) {
  require(cluster >= 0 && cluster < a.k, ErrorKind::Usage,
          "context_members: cluster index out of range");
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < a.n; ++i)
    if (a.valid[static_cast<size_t>(i)] && a.onehot[static_cast<size_t>(i * a.k + cluster)])
      idx.push_back(i);
  return idx;
}

template <typename S>
std::vector<S> gather_context(std::span<const S> features, int64_t d,
                              const ContextAssignment& a, int64_t cluster) {
  require(d >= 1, ErrorKind::Usage, "gather_context: need d >= 1");
  require(static_cast<int64_t>(features.size()) == a.n * d, ErrorKind::Usage,
          "gather_context: feature buffer size mismatch");
  std::vector<S> out;
  for (int64_t i : context_members(a, cluster))
    out.insert(out.end(), features.begin() + i * d, features.begin() + (i + 1) * d);
  return out;
}

// Tape-recorded gather for the student branch; gradient flows back to the
// member rows only. Empty contexts must be filtered out by the caller.
template <typename S>
Tensor<S> gather_context(const Tensor<S>& features, const ContextAssignment& a,
                         int64_t cluster) {
  require(features.valid(), ErrorKind::Usage, "gather_context: invalid tensor handle");
  auto idx = context_members(a, cluster);
  require(!idx.empty(), ErrorKind::Usage,
          cat("gather_context: context ", cluster, " has no members"));
  return gather_rows(features, std::move(idx));
}

namespace detail {

inline std::array<uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h / 360.0) * 360.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0));
  const double m = v - c;
  double r = 0.0, g = 0.0, b = 0.0;
  if (h < 60.0) {
    r = c, g = x;
  } else if (h < 120.0) {
    r = x, g = c;
  } else if (h < 180.0) {
    g = c, b = x;
  } else if (h < 240.0) {
    g = x, b = c;
  } else if (h < 300.0) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const auto q = [m](double u) {
    return static_cast<uint8_t>(std::lround(std::clamp(u + m, 0.0, 1.0) * 255.0));
  };
  return {q(r), q(g), q(b)};
}

}  // namespace detail

// Deterministic per-context color; invalid patches render black.
inline std::array<uint8_t, 3> context_color(int64_t cluster, int64_t k) {
  require(k >= 1 && cluster >= -1 && cluster < k, ErrorKind::Usage,
          "context_color: cluster index out of range");
  if (cluster < 0) return {0, 0, 0};
  const double hue = 360.0 * static_cast<double>(cluster) / static_cast<double>(k);
  return detail::hsv_to_rgb(hue, 0.75, 0.95);
}

// One block of `scale`x`scale` pixels per patch, row-major over the grid.
inline void save_context_map(const std::string& path, const ContextAssignment& a,
                             int64_t grid_w, int64_t grid_h, int64_t scale = 8) {
  require(grid_w >= 1 && grid_h >= 1 && grid_w * grid_h == a.n, ErrorKind::Usage,
          cat("save_context_map: grid ", grid_w, "x", grid_h, " does not cover ", a.n,
              " patches"));
  require(scale >= 1, ErrorKind::Usage, "save_context_map: scale must be >= 1");
  ImageRgb8 img;
  img.width = grid_w * scale;
  img.height = grid_h * scale;
  img.pixels.assign(static_cast<size_t>(img.width * img.height * 3), 0);
  for (int64_t gy = 0; gy < grid_h; ++gy) {
    for (int64_t gx = 0; gx < grid_w; ++gx) {
      const auto rgb = context_color(a.label(gy * grid_w + gx), a.k);
      for (int64_t py = 0; py < scale; ++py) {
        for (int64_t px = 0; px < scale; ++px) {
          const int64_t at = ((gy * scale + py) * img.width + gx * scale + px) * 3;
          img.pixels[static_cast<size_t>(at)] = rgb[0];
          img.pixels[static_cast<size_t>(at + 1)] = rgb[1];
          img.pixels[static_cast<size_t>(at + 2)] = rgb[2];
        }
      }
    }
  }
  write_png_rgb(path, img);
}

}  // namespace evssl
