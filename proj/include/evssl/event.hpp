#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "evssl/bytes.hpp"
#include "evssl/common.hpp"

namespace evssl {

// One DVS event: microsecond timestamp, pixel location, polarity +1/-1.
struct Event {
  uint64_t t = 0;
  uint16_t x = 0;
  uint16_t y = 0;
  int8_t polarity = 0;
};

inline bool event_order_less(const Event& a, const Event& b) {
  return std::tie(a.t, a.y, a.x, a.polarity) < std::tie(b.t, b.y, b.x, b.polarity);
}

struct EventStream {
  uint16_t width = 0;
  uint16_t height = 0;
  std::vector<Event> events;  // sorted by (t, y, x, polarity)

  void validate() const {
    require(width > 0 && height > 0, ErrorKind::Data,
            "event stream: sensor dimensions must be positive");
    for (size_t i = 0; i < events.size(); ++i) {
      const Event& e = events[i];
      require(e.polarity == 1 || e.polarity == -1, ErrorKind::Data,
              cat("event ", i, ": polarity must be +1 or -1, got ", int(e.polarity)));
      require(e.x < width && e.y < height, ErrorKind::Data,
              cat("event ", i, ": pixel (", e.x, ",", e.y, ") outside ", width, "x",
                  height, " sensor"));
      if (i > 0) {
        require(!event_order_less(e, events[i - 1]), ErrorKind::Data,
                cat("event ", i, ": stream is not sorted by (t, y, x, polarity)"));
      }
    }
  }
};

inline void sort_events(std::vector<Event>& events) {
  std::sort(events.begin(), events.end(), event_order_less);
}

// ---------------------------------------------------------------------------
// Binary event file. Little-endian throughout:
//   magic "EVS1" | width u16 | height u16 | count u64 |
//   count * { t u64 | x u16 | y u16 | polarity i8 | pad u8 (zero) }
// ---------------------------------------------------------------------------

constexpr char kEventMagic[4] = {'E', 'V', 'S', '1'};

inline std::vector<uint8_t> encode_events(const EventStream& s) {
  s.validate();
  ByteWriter w;
  w.bytes(kEventMagic, 4);
  w.u16(s.width);
  w.u16(s.height);
  w.u64(s.events.size());
  for (const Event& e : s.events) {
    w.u64(e.t);
    w.u16(e.x);
    w.u16(e.y);
    w.i8(e.polarity);
    w.u8(0);
  }
  return w.data();
}

inline EventStream decode_events(const std::vector<uint8_t>& buf,
                                 const std::string& what) {
  require(!buf.empty(), ErrorKind::Data, cat(what, ": file is empty"));
  ByteReader r(buf, what);
  char magic[4];
  r.raw(magic, 4);
  require(std::memcmp(magic, kEventMagic, 4) == 0, ErrorKind::Data,
          cat(what, ": bad magic at offset 0"));
  EventStream s;
  s.width = r.u16();
  s.height = r.u16();
  const uint64_t count = r.u64();
  s.events.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Event e;
    e.t = r.u64();
    e.x = r.u16();
    e.y = r.u16();
    e.polarity = r.i8();
    const size_t pad_off = r.offset();
    require(r.u8() == 0, ErrorKind::Data,
            cat(what, ": nonzero record padding at offset ", pad_off));
    s.events.push_back(e);
  }
  r.expect_end();
  s.validate();
  return s;
}

inline void write_events(const std::string& path, const EventStream& s) {
  write_file_bytes(path, encode_events(s));
}

inline EventStream read_events(const std::string& path) {
  return decode_events(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// Voxel grid: events deposited into B temporal bins with bilinear weights.
// ---------------------------------------------------------------------------

struct VoxelGrid {
  int64_t bins = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> values;  // [bins, height, width]

  double& at(int64_t b, int64_t y, int64_t x) {
    return values[static_cast<size_t>((b * height + y) * width + x)];
  }
  double at(int64_t b, int64_t y, int64_t x) const {
    return values[static_cast<size_t>((b * height + y) * width + x)];
  }
  double signed_sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
};

// Weights an event at normalized time t* contributes to bins floor(t*) and
// floor(t*) + 1. The pair sums to exactly 1.0 in IEEE double: for frac >= 0.5
// the subtraction 1 - frac is exact (Sterbenz), and for frac < 0.5 the
// rounding error of 1 - frac is at most half an ulp of 1.0, which the final
// addition rounds away.
inline std::pair<double, double> bilinear_time_weights(double t_star) {
  const double frac = t_star - std::floor(t_star);
  return {1.0 - frac, frac};
}

inline VoxelGrid voxelize(const EventStream& s, int64_t bins) {
  require(bins >= 1, ErrorKind::Usage, cat("voxelize: bins must be >= 1, got ", bins));
  require(!s.events.empty(), ErrorKind::Data, "voxelize: empty event stream");
  s.validate();
  VoxelGrid g;
  g.bins = bins;
  g.height = s.height;
  g.width = s.width;
  g.values.assign(static_cast<size_t>(bins * g.height * g.width), 0.0);
  const uint64_t t0 = s.events.front().t;
  const uint64_t span = s.events.back().t - t0;
  for (const Event& e : s.events) {
    double t_star = 0.0;
    if (span > 0 && bins > 1) {
      t_star = static_cast<double>(bins - 1) * (static_cast<double>(e.t - t0) /
                                                static_cast<double>(span));
    }
    const int64_t lo = static_cast<int64_t>(std::floor(t_star));
    const auto [w_lo, w_hi] = bilinear_time_weights(t_star);
    const double p = static_cast<double>(e.polarity);
    if (lo >= 0 && lo < bins && w_lo > 0.0) g.at(lo, e.y, e.x) += p * w_lo;
    if (lo + 1 >= 0 && lo + 1 < bins && w_hi > 0.0) g.at(lo + 1, e.y, e.x) += p * w_hi;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Event image: the voxel grid standardized for the encoder. Statistics use
// nonzero cells only, and zero cells stay exactly zero.
// ---------------------------------------------------------------------------

struct EventImage {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> values;  // [channels, height, width]

  double& at(int64_t c, int64_t y, int64_t x) {
    return values[static_cast<size_t>((c * height + y) * width + x)];
  }
  double at(int64_t c, int64_t y, int64_t x) const {
    return values[static_cast<size_t>((c * height + y) * width + x)];
  }
};

inline EventImage to_event_image(const VoxelGrid& g) {
  EventImage img;
  img.channels = g.bins;
  img.height = g.height;
  img.width = g.width;
  img.values.assign(g.values.size(), 0.0);
  double sum = 0.0;
  int64_t n = 0;
  for (double v : g.values) {
    if (v != 0.0) {
      sum += v;
      ++n;
    }
  }
  if (n == 0) return img;  // no events deposited anywhere
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (double v : g.values) {
    if (v != 0.0) {
      const double d = v - mean;
      var += d * d;
    }
  }
  var /= static_cast<double>(n);
  const double stddev = std::sqrt(var);
  if (stddev < 1e-12) {
    // All active cells share one value; center them and leave zeros alone.
    return img;
  }
  for (size_t i = 0; i < g.values.size(); ++i) {
    if (g.values[i] != 0.0) img.values[i] = (g.values[i] - mean) / stddev;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Visualization: net-positive pixels red, net-negative blue, inactive white.
// ---------------------------------------------------------------------------

struct ImageRgb8 {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;  // [height, width, 3]
};

inline ImageRgb8 render_rgb(const EventStream& s) {
  s.validate();
  std::vector<int64_t> net(static_cast<size_t>(s.width) * s.height, 0);
  for (const Event& e : s.events)
    net[static_cast<size_t>(e.y) * s.width + e.x] += e.polarity;
  ImageRgb8 img;
  img.width = s.width;
  img.height = s.height;
  img.pixels.assign(net.size() * 3, 255);
  for (size_t i = 0; i < net.size(); ++i) {
    if (net[i] > 0) {
      img.pixels[i * 3 + 1] = 0;
      img.pixels[i * 3 + 2] = 0;  // red
    } else if (net[i] < 0) {
      img.pixels[i * 3 + 0] = 0;
      img.pixels[i * 3 + 1] = 0;  // blue
    }
  }
  return img;
}

}  // namespace evssl
