#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evssl/augment.hpp"
#include "evssl/common.hpp"
#include "evssl/event.hpp"
#include "evssl/png_io.hpp"

namespace evssl {

constexpr const char* kSimulatorVersion = "evssl-sim/1.0.0";

// ---------------------------------------------------------------------------
// Contrast-threshold event simulation over linearly interpolated log
// intensity.
// ---------------------------------------------------------------------------

struct SimConfig {
  double contrast_threshold = 0.2;
  double log_eps = 1e-3;       // log(I + eps) guards log(0)
  uint64_t refractory_us = 0;  // events inside the window are dropped
  double noise_rate_hz = 0.0;  // per-pixel uniform background rate
  uint64_t seed = 0;

  void validate() const {
    require(std::isfinite(contrast_threshold) && contrast_threshold > 0.0,
            ErrorKind::Usage, "sim: contrast threshold must be positive");
    require(std::isfinite(log_eps) && log_eps > 0.0, ErrorKind::Usage,
            "sim: log epsilon must be positive");
    require(std::isfinite(noise_rate_hz) && noise_rate_hz >= 0.0, ErrorKind::Usage,
            "sim: noise rate must be non-negative");
  }
};

// Grayscale intensity frame, values in [0, 1].
struct ImageF {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<double> v;

  double at(int64_t y, int64_t x) const {
    return v[static_cast<size_t>(y * width + x)];
  }
  double& at(int64_t y, int64_t x) {
    return v[static_cast<size_t>(y * width + x)];
  }
};

inline ImageF to_imagef(const ImageU8& u) {
  ImageF f;
  f.width = u.width;
  f.height = u.height;
  f.v.resize(u.pixels.size());
  for (size_t i = 0; i < u.pixels.size(); ++i)
    f.v[i] = static_cast<double>(u.pixels[i]) / 255.0;
  return f;
}

namespace detail {

// Threshold-crossing tolerance in log-intensity units. Accumulated crossing
// levels (k * C) are not exactly representable, so an excursion intended to
// be exactly k thresholds can fall a few ulps short; the tolerance is about
// seven orders of magnitude below the default threshold, far below any
// physically meaningful contrast difference.
constexpr double kCrossingTol = 1e-9;

}  // namespace detail

// Simulate events from intensity keyframes at the given microsecond
// timestamps. Per pixel, the log intensity moves linearly between frames and
// an event fires each time it departs from the reference level by the
// contrast threshold; the reference then steps to the crossed level. An event
// inside the refractory window is dropped, but the reference level still
// advances. Poisson background noise is appended afterwards, and the result
// is sorted into canonical (t, y, x, polarity) order.
inline EventStream simulate_from_frames(const std::vector<ImageF>& frames,
                                        const std::vector<uint64_t>& timestamps,
                                        const SimConfig& cfg) {
  cfg.validate();
  require(frames.size() >= 2, ErrorKind::Usage, "sim: need at least two frames");
  require(frames.size() == timestamps.size(), ErrorKind::Usage,
          cat("sim: ", frames.size(), " frames but ", timestamps.size(),
              " timestamps"));
  const int64_t w = frames[0].width, h = frames[0].height;
  require(w > 0 && h > 0 && w <= UINT16_MAX && h <= UINT16_MAX, ErrorKind::Usage,
          "sim: invalid frame dimensions");
  for (size_t i = 0; i < frames.size(); ++i) {
    require(frames[i].width == w && frames[i].height == h, ErrorKind::Usage,
            cat("sim: frame ", i, " has mismatched dimensions"));
    require(static_cast<int64_t>(frames[i].v.size()) == w * h, ErrorKind::Usage,
            cat("sim: frame ", i, " has a malformed pixel buffer"));
    if (i > 0)
      require(timestamps[i] > timestamps[i - 1], ErrorKind::Usage,
              cat("sim: timestamps must be strictly increasing at index ", i));
  }

  const double c = cfg.contrast_threshold;
  EventStream out;
  out.width = static_cast<uint16_t>(w);
  out.height = static_cast<uint16_t>(h);

  std::vector<double> log_frames(frames.size() * static_cast<size_t>(w * h));
  for (size_t f = 0; f < frames.size(); ++f) {
    for (int64_t i = 0; i < w * h; ++i) {
      const double inten = frames[f].v[static_cast<size_t>(i)];
      require(std::isfinite(inten) && inten >= 0.0, ErrorKind::Data,
              cat("sim: frame ", f, " has an invalid intensity"));
      log_frames[f * static_cast<size_t>(w * h) + static_cast<size_t>(i)] =
          std::log(inten + cfg.log_eps);
    }
  }

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y * w + x);
      double ref = log_frames[pix];
      bool have_last = false;
      uint64_t last_t = 0;
      for (size_t f = 0; f + 1 < frames.size(); ++f) {
        const double l0 = log_frames[f * static_cast<size_t>(w * h) + pix];
        const double l1 = log_frames[(f + 1) * static_cast<size_t>(w * h) + pix];
        const double delta = l1 - l0;
        if (delta == 0.0) continue;
        const double dir = delta > 0.0 ? 1.0 : -1.0;
        const uint64_t t0 = timestamps[f], t1 = timestamps[f + 1];
        for (;;) {
          const double next_level = ref + dir * c;
          if ((l1 - next_level) * dir < -detail::kCrossingTol) break;
          // linear inverse for the crossing time, clamped into the interval
          double alpha = (next_level - l0) / delta;
          alpha = std::min(1.0, std::max(0.0, alpha));
          const uint64_t t = t0 + static_cast<uint64_t>(std::llround(
                                      alpha * static_cast<double>(t1 - t0)));
          ref = next_level;
          if (have_last && cfg.refractory_us > 0 && t - last_t < cfg.refractory_us) {
            continue;  // dropped, but the reference level has advanced
          }
          Event e;
          e.t = t;
          e.x = static_cast<uint16_t>(x);
          e.y = static_cast<uint16_t>(y);
          e.polarity = dir > 0.0 ? int8_t(1) : int8_t(-1);
          out.events.push_back(e);
          have_last = true;
          last_t = t;
        }
      }
    }
  }

  if (cfg.noise_rate_hz > 0.0) {
    Rng rng(mix_seed(cfg.seed, seed_tag::noise));
    const uint64_t t_begin = timestamps.front(), t_end = timestamps.back();
    const double span_s = static_cast<double>(t_end - t_begin) / 1e6;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int64_t n = rng.poisson(cfg.noise_rate_hz * span_s);
        for (int64_t i = 0; i < n; ++i) {
          Event e;
          e.t = t_begin + static_cast<uint64_t>(rng.uniform_index(t_end - t_begin + 1));
          e.x = static_cast<uint16_t>(x);
          e.y = static_cast<uint16_t>(y);
          e.polarity = rng.uniform() < 0.5 ? int8_t(1) : int8_t(-1);
          out.events.push_back(e);
        }
      }
    }
  }

  sort_events(out.events);
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Camera trajectories. A pose stores the sampling transform that produces the
// frame at its timestamp: output pixel -> source image pixel. For the pure
// translation patterns the content offset is (+dx, +dy), so the stored
// transform translates by (-dx, -dy).
// ---------------------------------------------------------------------------

enum class MotionPattern { Square, Vertical, Horizontal, RandomAffine };

inline MotionPattern parse_motion_pattern(const std::string& name) {
  if (name == "square") return MotionPattern::Square;
  if (name == "vertical") return MotionPattern::Vertical;
  if (name == "horizontal") return MotionPattern::Horizontal;
  if (name == "random_affine") return MotionPattern::RandomAffine;
  throw_usage(cat("unknown motion pattern '", name,
                  "' (expected square, vertical, horizontal, random_affine)"));
}

inline const char* motion_pattern_name(MotionPattern p) {
  switch (p) {
    case MotionPattern::Square: return "square";
    case MotionPattern::Vertical: return "vertical";
    case MotionPattern::Horizontal: return "horizontal";
    case MotionPattern::RandomAffine: return "random_affine";
  }
  return "?";
}

struct TrajectoryPose {
  uint64_t t_us = 0;
  AffineTransform2D transform;  // output pixel -> source pixel
};

struct CameraTrajectory {
  MotionPattern pattern = MotionPattern::Square;
  std::vector<TrajectoryPose> poses;
};

namespace detail {

inline AffineTransform2D translation_pose(double dx, double dy) {
  AffineTransform2D t;
  t.m[2] = -dx;
  t.m[5] = -dy;
  return t;
}

// Content offset along the square perimeter with corners (+-a, +-a),
// starting and ending at (-a, -a).
inline std::pair<double, double> square_offset(double a, double u) {
  const double p = u * 4.0;  // one unit per leg, each leg travels 2a
  if (p < 1.0) return {-a + 2.0 * a * p, -a};
  if (p < 2.0) return {a, -a + 2.0 * a * (p - 1.0)};
  if (p < 3.0) return {a - 2.0 * a * (p - 2.0), a};
  return {-a, a - 2.0 * a * (p - 3.0)};
}

}  // namespace detail

inline CameraTrajectory generate_trajectory(MotionPattern pattern,
                                            uint64_t duration_us,
                                            double amplitude_px, int64_t num_poses,
                                            uint64_t seed, int64_t width,
                                            int64_t height) {
  require(num_poses >= 2, ErrorKind::Usage, "trajectory: need at least two poses");
  require(duration_us > 0, ErrorKind::Usage, "trajectory: duration must be positive");
  require(std::isfinite(amplitude_px) && amplitude_px >= 0.0, ErrorKind::Usage,
          "trajectory: amplitude must be non-negative");
  CameraTrajectory traj;
  traj.pattern = pattern;
  traj.poses.resize(static_cast<size_t>(num_poses));

  // Endpoint parameters for the random pattern, interpolated from identity.
  double end_theta = 0.0, end_sx = 1.0, end_sy = 1.0, end_tx = 0.0, end_ty = 0.0;
  if (pattern == MotionPattern::RandomAffine) {
    Rng rng(mix_seed(seed, seed_tag::trajectory));
    const double deg = Rng::kPi / 180.0;
    end_theta = rng.uniform(-10.0 * deg, 10.0 * deg);
    end_sx = rng.uniform(0.9, 1.1);
    end_sy = rng.uniform(0.9, 1.1);
    end_tx = rng.uniform(-amplitude_px, amplitude_px);
    end_ty = rng.uniform(-amplitude_px, amplitude_px);
  }

  for (int64_t i = 0; i < num_poses; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(num_poses - 1);
    TrajectoryPose& pose = traj.poses[static_cast<size_t>(i)];
    pose.t_us = static_cast<uint64_t>(std::llround(
        u * static_cast<double>(duration_us)));
    switch (pattern) {
      case MotionPattern::Vertical:
        pose.transform = detail::translation_pose(0.0, -amplitude_px + 2.0 * amplitude_px * u);
        break;
      case MotionPattern::Horizontal:
        pose.transform = detail::translation_pose(-amplitude_px + 2.0 * amplitude_px * u, 0.0);
        break;
      case MotionPattern::Square: {
        const auto [dx, dy] = detail::square_offset(amplitude_px, std::min(u, 0.999999999));
        pose.transform = detail::translation_pose(dx, dy);
        break;
      }
      case MotionPattern::RandomAffine: {
        const double theta = end_theta * u;
        const double sx = 1.0 + (end_sx - 1.0) * u;
        const double sy = 1.0 + (end_sy - 1.0) * u;
        const double c = std::cos(theta), s = std::sin(theta);
        const double cx = static_cast<double>(width - 1) / 2.0;
        const double cy = static_cast<double>(height - 1) / 2.0;
        AffineTransform2D t;
        t.m[0] = c * sx;
        t.m[1] = -s * sy;
        t.m[3] = s * sx;
        t.m[4] = c * sy;
        t.m[2] = cx - (t.m[0] * cx + t.m[1] * cy) - end_tx * u;
        t.m[5] = cy - (t.m[3] * cx + t.m[4] * cy) - end_ty * u;
        pose.transform = t;
        break;
      }
    }
  }
  // llround of strictly increasing u * duration can only collide when
  // duration < num_poses; rule that out.
  for (size_t i = 1; i < traj.poses.size(); ++i)
    require(traj.poses[i].t_us > traj.poses[i - 1].t_us, ErrorKind::Usage,
            "trajectory: duration too short for the requested pose count");
  return traj;
}

// Bilinear backward warp of an intensity image, zero outside.
inline ImageF warp_imagef(const ImageF& img, const AffineTransform2D& t) {
  ImageF out;
  out.width = img.width;
  out.height = img.height;
  out.v.assign(img.v.size(), 0.0);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      const auto [sx, sy] = t.apply(static_cast<double>(x), static_cast<double>(y));
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
      const double fx = sx - fx0, fy = sy - fy0;
      double v = 0.0;
      const auto tap = [&](int64_t xx, int64_t yy, double wgt) {
        if (wgt == 0.0 || xx < 0 || xx >= img.width || yy < 0 || yy >= img.height)
          return;
        v += wgt * img.at(yy, xx);
      };
      tap(x0, y0, (1.0 - fx) * (1.0 - fy));
      tap(x0 + 1, y0, fx * (1.0 - fy));
      tap(x0, y0 + 1, (1.0 - fx) * fy);
      tap(x0 + 1, y0 + 1, fx * fy);
      out.at(y, x) = v;
    }
  }
  return out;
}

inline EventStream warp_and_simulate(const ImageF& image,
                                     const CameraTrajectory& traj,
                                     const SimConfig& cfg) {
  require(traj.poses.size() >= 2, ErrorKind::Usage,
          "warp_and_simulate: trajectory needs at least two poses");
  std::vector<ImageF> frames;
  std::vector<uint64_t> ts;
  frames.reserve(traj.poses.size());
  for (const auto& pose : traj.poses) {
    frames.push_back(warp_imagef(image, pose.transform));
    ts.push_back(pose.t_us);
  }
  return simulate_from_frames(frames, ts, cfg);
}

// ---------------------------------------------------------------------------
// Moving-shapes scenes: textured shapes translating over a flat background,
// with analytic segmentation labels at the middle of the interval.
// Class ids: 0 background, 1 circle, 2 rectangle.
// ---------------------------------------------------------------------------

struct ShapeSpec {
  int cls = 0;  // 1 circle, 2 rectangle
  double cx0 = 0.0, cy0 = 0.0;
  double vx = 0.0, vy = 0.0;  // px/s
  double half_a = 0.0;        // radius or half width
  double half_b = 0.0;        // unused for circles
  double phase = 0.0;

  std::pair<double, double> center_at(double t_s) const {
    return {cx0 + vx * t_s, cy0 + vy * t_s};
  }

  bool contains(double px, double py, double t_s) const {
    const auto [cx, cy] = center_at(t_s);
    if (cls == 1) {
      const double dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= half_a * half_a;
    }
    return std::abs(px - cx) <= half_a && std::abs(py - cy) <= half_b;
  }

  // Texture anchored to the shape center so it moves rigidly with the shape.
  double intensity(double px, double py, double t_s) const {
    const auto [cx, cy] = center_at(t_s);
    const double lx = px - cx, ly = py - cy;
    if (cls == 1) {
      // 2px checkerboard
      const int64_t ix = static_cast<int64_t>(std::floor(lx / 2.0 + phase));
      const int64_t iy = static_cast<int64_t>(std::floor(ly / 2.0));
      return ((ix + iy) & 1) ? 0.85 : 0.15;
    }
    // diagonal stripes, period 4px
    const double s = lx + ly + phase;
    return (static_cast<int64_t>(std::floor(s / 2.0)) & 1) ? 0.95 : 0.35;
  }
};

struct SceneConfig {
  int64_t width = 64;
  int64_t height = 64;
  int64_t num_frames = 9;
  uint64_t duration_us = 100000;
  double background = 0.55;
  double min_speed = 40.0;   // px/s
  double max_speed = 120.0;  // px/s
};

struct SceneSample {
  std::vector<ImageF> frames;
  std::vector<uint64_t> timestamps;
  ImageU8 labels;  // analytic footprints at t = duration / 2
  std::vector<ShapeSpec> shapes;
};

// One circle and one rectangle with random geometry and motion. The painter
// order (circle first, rectangle on top) is fixed and shared by the frames
// and the label map.
inline SceneSample generate_scene(Rng& rng, const SceneConfig& cfg) {
  require(cfg.num_frames >= 2, ErrorKind::Usage, "scene: need at least two frames");
  require(cfg.width >= 16 && cfg.height >= 16, ErrorKind::Usage,
          "scene: image too small for shapes");
  SceneSample sample;
  const double w = static_cast<double>(cfg.width);
  const double h = static_cast<double>(cfg.height);
  const double dur_s = static_cast<double>(cfg.duration_us) / 1e6;

  const auto random_velocity = [&](double& vx, double& vy) {
    const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
    const double ang = rng.uniform(0.0, 2.0 * Rng::kPi);
    vx = speed * std::cos(ang);
    vy = speed * std::sin(ang);
  };

  ShapeSpec circle;
  circle.cls = 1;
  circle.half_a = rng.uniform(0.12, 0.2) * std::min(w, h);
  circle.cx0 = rng.uniform(0.25 * w, 0.45 * w);
  circle.cy0 = rng.uniform(0.25 * h, 0.75 * h);
  random_velocity(circle.vx, circle.vy);
  circle.phase = rng.uniform(0.0, 1.0);

  ShapeSpec rect;
  rect.cls = 2;
  rect.half_a = rng.uniform(0.1, 0.18) * w;
  rect.half_b = rng.uniform(0.1, 0.18) * h;
  rect.cx0 = rng.uniform(0.55 * w, 0.75 * w);
  rect.cy0 = rng.uniform(0.25 * h, 0.75 * h);
  random_velocity(rect.vx, rect.vy);
  rect.phase = rng.uniform(0.0, 4.0);

  sample.shapes = {circle, rect};

  sample.frames.reserve(static_cast<size_t>(cfg.num_frames));
  sample.timestamps.reserve(static_cast<size_t>(cfg.num_frames));
  for (int64_t f = 0; f < cfg.num_frames; ++f) {
    const double u = static_cast<double>(f) / static_cast<double>(cfg.num_frames - 1);
    const double t_s = u * dur_s;
    ImageF frame;
    frame.width = cfg.width;
    frame.height = cfg.height;
    frame.v.assign(static_cast<size_t>(cfg.width * cfg.height), cfg.background);
    for (const ShapeSpec& shape : sample.shapes) {
      for (int64_t y = 0; y < cfg.height; ++y) {
        for (int64_t x = 0; x < cfg.width; ++x) {
          const double px = static_cast<double>(x), py = static_cast<double>(y);
          if (shape.contains(px, py, t_s)) frame.at(y, x) = shape.intensity(px, py, t_s);
        }
      }
    }
    sample.frames.push_back(std::move(frame));
    sample.timestamps.push_back(static_cast<uint64_t>(
        std::llround(u * static_cast<double>(cfg.duration_us))));
  }

  const double t_mid = 0.5 * dur_s;
  sample.labels.width = cfg.width;
  sample.labels.height = cfg.height;
  sample.labels.pixels.assign(static_cast<size_t>(cfg.width * cfg.height), 0);
  for (const ShapeSpec& shape : sample.shapes) {
    for (int64_t y = 0; y < cfg.height; ++y) {
      for (int64_t x = 0; x < cfg.width; ++x) {
        if (shape.contains(static_cast<double>(x), static_cast<double>(y), t_mid))
          sample.labels.pixels[static_cast<size_t>(y * cfg.width + x)] =
              static_cast<uint8_t>(shape.cls);
      }
    }
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Dataset packing and manifests.
// ---------------------------------------------------------------------------

struct SampleRecord {
  std::string event_file;  // relative to the manifest directory
  std::string label_file;  // empty when the source has no labels
  uint16_t width = 0;
  uint16_t height = 0;
  uint64_t duration_us = 0;
  uint64_t num_events = 0;
  std::string source;
};

struct DatasetManifest {
  std::string root;  // directory of the manifest file; set on load/save
  uint64_t seed = 0;
  std::string generator;
  std::vector<SampleRecord> samples;
};

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json j;
  j["generator"] = m.generator;
  j["seed"] = m.seed;
  j["sample_count"] = m.samples.size();
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : m.samples) {
    nlohmann::json js;
    js["event_file"] = s.event_file;
    if (!s.label_file.empty()) js["label_file"] = s.label_file;
    js["width"] = s.width;
    js["height"] = s.height;
    js["duration_us"] = s.duration_us;
    js["num_events"] = s.num_events;
    js["source"] = s.source;
    arr.push_back(std::move(js));
  }
  j["samples"] = std::move(arr);
  write_file_text(path, j.dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw_data(cat("manifest '", path, "': invalid JSON: ", e.what()));
  }
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  if (m.root.empty()) m.root = ".";
  try {
    m.generator = j.at("generator").get<std::string>();
    m.seed = j.at("seed").get<uint64_t>();
    for (const auto& js : j.at("samples")) {
      SampleRecord s;
      s.event_file = js.at("event_file").get<std::string>();
      if (js.contains("label_file")) s.label_file = js.at("label_file").get<std::string>();
      s.width = js.at("width").get<uint16_t>();
      s.height = js.at("height").get<uint16_t>();
      s.duration_us = js.at("duration_us").get<uint64_t>();
      s.num_events = js.at("num_events").get<uint64_t>();
      s.source = js.at("source").get<std::string>();
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw_data(cat("manifest '", path, "': missing or malformed field: ", e.what()));
  }
  require(j.at("sample_count").get<size_t>() == m.samples.size(), ErrorKind::Data,
          cat("manifest '", path, "': sample_count disagrees with the sample list"));
  for (size_t i = 0; i < m.samples.size(); ++i) {
    const auto ev = std::filesystem::path(m.root) / m.samples[i].event_file;
    require(std::filesystem::exists(ev), ErrorKind::Data,
            cat("manifest sample ", i, ": missing event file '", ev.string(), "'"));
    if (!m.samples[i].label_file.empty()) {
      const auto lb = std::filesystem::path(m.root) / m.samples[i].label_file;
      require(std::filesystem::exists(lb), ErrorKind::Data,
              cat("manifest sample ", i, ": missing label file '", lb.string(), "'"));
    }
  }
  return m;
}

struct PackConfig {
  std::string kind = "moving_shapes";  // or "image_folder"
  std::string image_dir;               // for image_folder
  std::string pattern = "mixed";       // trajectory pattern, or "mixed"
  int64_t count = 64;
  SceneConfig scene;
  double amplitude_px = 8.0;
  SimConfig sim;
  uint64_t seed = 7;
};

inline DatasetManifest pack_dataset(const PackConfig& cfg, const std::string& out_dir) {
  require(cfg.count >= 1, ErrorKind::Usage, "pack: sample count must be >= 1");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "samples");

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.seed = cfg.seed;
  manifest.generator = kSimulatorVersion;

  std::vector<std::string> images;
  if (cfg.kind == "image_folder") {
    require(!cfg.image_dir.empty(), ErrorKind::Usage,
            "pack: image_folder source needs an image directory");
    for (const auto& entry : fs::directory_iterator(cfg.image_dir)) {
      if (entry.path().extension() == ".png") images.push_back(entry.path().string());
    }
    std::sort(images.begin(), images.end());
    require(!images.empty(), ErrorKind::Data,
            cat("pack: no .png images found in '", cfg.image_dir, "'"));
  } else {
    require(cfg.kind == "moving_shapes", ErrorKind::Usage,
            cat("pack: unknown dataset kind '", cfg.kind, "'"));
  }

  const std::vector<MotionPattern> mixed = {
      MotionPattern::Square, MotionPattern::Vertical, MotionPattern::Horizontal,
      MotionPattern::RandomAffine};

  for (int64_t i = 0; i < cfg.count; ++i) {
    char event_name[64], label_name[64];
    std::snprintf(event_name, sizeof(event_name), "samples/sample_%06lld.evs",
                  static_cast<long long>(i));
    std::snprintf(label_name, sizeof(label_name), "samples/sample_%06lld_labels.png",
                  static_cast<long long>(i));

    SimConfig sim = cfg.sim;
    sim.seed = mix_seed(cfg.seed, seed_tag::noise, static_cast<uint64_t>(i));

    SampleRecord rec;
    EventStream stream;
    if (cfg.kind == "moving_shapes") {
      Rng rng(mix_seed(cfg.seed, seed_tag::scene, static_cast<uint64_t>(i)));
      SceneSample scene = generate_scene(rng, cfg.scene);
      stream = simulate_from_frames(scene.frames, scene.timestamps, sim);
      write_png_gray((fs::path(out_dir) / label_name).string(), scene.labels);
      rec.label_file = label_name;
      rec.source = "moving_shapes";
      rec.duration_us = cfg.scene.duration_us;
    } else {
      const std::string& img_path = images[static_cast<size_t>(i) % images.size()];
      const ImageF img = to_imagef(read_png_gray(img_path));
      MotionPattern pattern;
      if (cfg.pattern == "mixed") {
        pattern = mixed[static_cast<size_t>(i) % mixed.size()];
      } else {
        pattern = parse_motion_pattern(cfg.pattern);
      }
      const auto traj = generate_trajectory(
          pattern, cfg.scene.duration_us, cfg.amplitude_px, cfg.scene.num_frames,
          mix_seed(cfg.seed, seed_tag::trajectory, static_cast<uint64_t>(i)),
          img.width, img.height);
      stream = warp_and_simulate(img, traj, sim);
      rec.source = cat("image:", fs::path(img_path).filename().string(), "@",
                       motion_pattern_name(pattern));
      rec.duration_us = cfg.scene.duration_us;
    }
    write_events((fs::path(out_dir) / event_name).string(), stream);
    rec.event_file = event_name;
    rec.width = stream.width;
    rec.height = stream.height;
    rec.num_events = stream.events.size();
    manifest.samples.push_back(std::move(rec));
  }

  save_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  return manifest;
}

}  // namespace evssl
