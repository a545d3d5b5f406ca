#pragma once
// Typed config schema with a small TOML-style loader: [section] headers,
// key = value lines, comments, and dotted override strings. Unknown keys are
// rejected by name, and every printed value parses back to itself.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evssl/bytes.hpp"
#include "evssl/common.hpp"
#include "evssl/model.hpp"

namespace evssl {

enum class FieldType { I64, U64, F64, Bool, Str };

struct FieldBinding {
  std::string key;
  FieldType type = FieldType::I64;
  void* ptr = nullptr;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::string format_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

// Inverse of quote(); non-quoted tokens pass through verbatim so shell
// overrides like --set data.manifest=x.json stay convenient.
inline std::string unquote(std::string_view tok, const std::string& key) {
  if (tok.empty() || tok.front() != '"') return std::string(tok);
  require(tok.size() >= 2 && tok.back() == '"', ErrorKind::Usage,
          cat("config key '", key, "': unterminated string"));
  std::string out;
  for (size_t i = 1; i + 1 < tok.size(); ++i) {
    if (tok[i] == '\\') {
      ++i;
      require(i + 1 < tok.size() && (tok[i] == '"' || tok[i] == '\\'), ErrorKind::Usage,
              cat("config key '", key, "': bad escape in string"));
    }
    out.push_back(tok[i]);
  }
  return out;
}

}  // namespace detail

class ConfigSchema {
 public:
  void bind(std::string key, int64_t* p) { add(std::move(key), FieldType::I64, p); }
  void bind(std::string key, uint64_t* p) { add(std::move(key), FieldType::U64, p); }
  void bind(std::string key, double* p) { add(std::move(key), FieldType::F64, p); }
  void bind(std::string key, bool* p) { add(std::move(key), FieldType::Bool, p); }
  void bind(std::string key, std::string* p) { add(std::move(key), FieldType::Str, p); }

  bool has(const std::string& key) const {
    for (const auto& f : fields_)
      if (f.key == key) return true;
    return false;
  }

  // Accepts the token as it appears to the right of '=' in a config line.
  void set(const std::string& key, std::string_view token) {
    FieldBinding* f = find(key);
    require(f != nullptr, ErrorKind::Usage, cat("unknown config key '", key, "'"));
    token = detail::trim(token);
    require(!token.empty(), ErrorKind::Usage, cat("config key '", key, "': empty value"));
    switch (f->type) {
      case FieldType::I64:
        *static_cast<int64_t*>(f->ptr) = parse_int<int64_t>(key, token);
        break;
      case FieldType::U64:
        *static_cast<uint64_t*>(f->ptr) = parse_int<uint64_t>(key, token);
        break;
      case FieldType::F64: {
        double v = 0.0;
        const auto* b = token.data();
        const auto* e = token.data() + token.size();
        const auto res = std::from_chars(b, e, v);
        require(res.ec == std::errc{} && res.ptr == e, ErrorKind::Usage,
                cat("config key '", key, "': '", std::string(token),
                    "' is not a number"));
        *static_cast<double*>(f->ptr) = v;
        break;
      }
      case FieldType::Bool:
        if (token == "true") {
          *static_cast<bool*>(f->ptr) = true;
        } else if (token == "false") {
          *static_cast<bool*>(f->ptr) = false;
        } else {
          throw_usage(cat("config key '", key, "': expected true or false, got '",
                          std::string(token), "'"));
        }
        break;
      case FieldType::Str:
        *static_cast<std::string*>(f->ptr) = detail::unquote(token, key);
        break;
    }
  }

  std::string get(const std::string& key) const {
    const FieldBinding* f = find(key);
    require(f != nullptr, ErrorKind::Usage, cat("unknown config key '", key, "'"));
    switch (f->type) {
      case FieldType::I64:
        return std::to_string(*static_cast<const int64_t*>(f->ptr));
      case FieldType::U64:
        return std::to_string(*static_cast<const uint64_t*>(f->ptr));
      case FieldType::F64:
        return detail::format_f64(*static_cast<const double*>(f->ptr));
      case FieldType::Bool:
        return *static_cast<const bool*>(f->ptr) ? "true" : "false";
      case FieldType::Str:
        return detail::quote(*static_cast<const std::string*>(f->ptr));
    }
    throw_usage("unreachable field type");
  }

  const std::vector<FieldBinding>& fields() const { return fields_; }

 private:
  template <typename T>
  static T parse_int(const std::string& key, std::string_view token) {
    T v{};
    const auto* b = token.data();
    const auto* e = token.data() + token.size();
    const auto res = std::from_chars(b, e, v);
    require(res.ec == std::errc{} && res.ptr == e, ErrorKind::Usage,
            cat("config key '", key, "': '", std::string(token),
                "' is not a valid integer for this field"));
    return v;
  }

  void add(std::string key, FieldType type, void* ptr) {
    require(!has(key), ErrorKind::Usage, cat("duplicate config binding '", key, "'"));
    fields_.push_back({std::move(key), type, ptr});
  }

  FieldBinding* find(const std::string& key) {
    for (auto& f : fields_)
      if (f.key == key) return &f;
    return nullptr;
  }
  const FieldBinding* find(const std::string& key) const {
    for (const auto& f : fields_)
      if (f.key == key) return &f;
    return nullptr;
  }

  std::vector<FieldBinding> fields_;
};

// [section] headers prefix the keys that follow; a key may appear once.
inline void apply_config_text(ConfigSchema& schema, const std::string& text,
                              const std::string& what) {
  std::string prefix;
  std::vector<std::string> seen;
  size_t line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos,
                          (nl == std::string::npos ? text.size() : nl) - pos);
    pos = (nl == std::string::npos) ? text.size() + 1 : nl + 1;
    ++line_no;

    // strip comments outside quotes
    bool in_str = false;
    size_t cut = line.size();
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
      if (line[i] == '#' && !in_str) {
        cut = i;
        break;
      }
    }
    const std::string_view body = detail::trim(line.substr(0, cut));
    if (body.empty()) continue;

    if (body.front() == '[') {
      require(body.size() >= 3 && body.back() == ']', ErrorKind::Usage,
              cat(what, ":", line_no, ": malformed section header"));
      const auto name = detail::trim(body.substr(1, body.size() - 2));
      require(!name.empty(), ErrorKind::Usage,
              cat(what, ":", line_no, ": empty section name"));
      prefix = std::string(name) + ".";
      continue;
    }

    const size_t eq = body.find('=');
    require(eq != std::string_view::npos, ErrorKind::Usage,
            cat(what, ":", line_no, ": expected key = value"));
    const auto key_part = detail::trim(body.substr(0, eq));
    require(!key_part.empty(), ErrorKind::Usage,
            cat(what, ":", line_no, ": missing key"));
    for (char c : key_part)
      require(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.',
              ErrorKind::Usage,
              cat(what, ":", line_no, ": bad character in key '", std::string(key_part),
                  "'"));
    const std::string key = prefix + std::string(key_part);
    for (const auto& s : seen)
      require(s != key, ErrorKind::Usage,
              cat(what, ":", line_no, ": duplicate key '", key, "'"));
    seen.push_back(key);
    try {
      schema.set(key, body.substr(eq + 1));
    } catch (const Error& e) {
      throw Error(e.kind(), cat(what, ":", line_no, ": ", e.what()));
    }
  }
}

inline void apply_config_file(ConfigSchema& schema, const std::string& path) {
  apply_config_text(schema, read_file_text(path), path);
}

// --set key=value
inline void apply_override(ConfigSchema& schema, const std::string& kv) {
  const size_t eq = kv.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::Usage,
          cat("override '", kv, "' is not of the form key=value"));
  schema.set(std::string(detail::trim(std::string_view(kv).substr(0, eq))),
             std::string_view(kv).substr(eq + 1));
}

// Resolved config as a loadable file, grouped by section in binding order.
inline std::string render_config(const ConfigSchema& schema) {
  std::string out;
  std::string section;
  for (const auto& f : schema.fields()) {
    const size_t dot = f.key.rfind('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section || out.empty()) {
      if (!out.empty()) out.push_back('\n');
      if (!sec.empty()) out += cat("[", sec, "]\n");
      section = sec;
    }
    out += cat(leaf, " = ", schema.get(f.key), "\n");
  }
  return out;
}

// Every knob of a pre-training run. Paper-scale values (300 epochs at batch
// 1024) are impractical on one core; defaults are the desk-scale equivalents
// of 300 steps at batch 32.
struct TrainConfig {
  std::string manifest;
  std::string out_dir = "runs/pretrain";

  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t voxel_bins = 5;
  int64_t dim = 64;
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t head_hidden = 128;
  int64_t bottleneck = 64;
  int64_t prototypes = 256;

  double lambda1 = 0.1;
  double lambda2 = 0.9;
  int64_t contexts = 8;
  int64_t kmeans_iters = 10;
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  bool centering = true;
  double center_rate = 0.9;

  double mask_ratio_lo = 0.1;
  double mask_ratio_hi = 0.5;

  double momentum_start = 0.996;
  double momentum_end = 1.0;

  double lr = 1e-3;
  double weight_decay = 0.04;
  int64_t warmup_steps = 30;

  int64_t steps = 300;
  int64_t batch_size = 32;
  uint64_t seed = 7;
  int64_t threads = 1;
  int64_t checkpoint_every = 100;
  std::string resume;  // checkpoint path to continue from

  ConfigSchema schema() {
    ConfigSchema s;
    s.bind("data.manifest", &manifest);
    s.bind("data.out_dir", &out_dir);
    s.bind("model.image_size", &image_size);
    s.bind("model.patch_size", &patch_size);
    s.bind("model.voxel_bins", &voxel_bins);
    s.bind("model.dim", &dim);
    s.bind("model.layers", &layers);
    s.bind("model.heads", &heads);
    s.bind("model.mlp_ratio", &mlp_ratio);
    s.bind("model.head_hidden", &head_hidden);
    s.bind("model.bottleneck", &bottleneck);
    s.bind("model.prototypes", &prototypes);
    s.bind("loss.lambda1", &lambda1);
    s.bind("loss.lambda2", &lambda2);
    s.bind("loss.contexts", &contexts);
    s.bind("loss.kmeans_iters", &kmeans_iters);
    s.bind("loss.tau_student", &tau_student);
    s.bind("loss.tau_teacher", &tau_teacher);
    s.bind("loss.centering", &centering);
    s.bind("loss.center_rate", &center_rate);
    s.bind("mask.ratio_lo", &mask_ratio_lo);
    s.bind("mask.ratio_hi", &mask_ratio_hi);
    s.bind("ema.momentum_start", &momentum_start);
    s.bind("ema.momentum_end", &momentum_end);
    s.bind("optim.lr", &lr);
    s.bind("optim.weight_decay", &weight_decay);
    s.bind("optim.warmup_steps", &warmup_steps);
    s.bind("run.steps", &steps);
    s.bind("run.batch_size", &batch_size);
    s.bind("run.seed", &seed);
    s.bind("run.threads", &threads);
    s.bind("run.checkpoint_every", &checkpoint_every);
    s.bind("run.resume", &resume);
    return s;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.image_size = image_size;
    m.patch_size = patch_size;
    m.channels = voxel_bins;
    m.dim = dim;
    m.layers = layers;
    m.heads = heads;
    m.mlp_ratio = mlp_ratio;
    m.head_hidden = head_hidden;
    m.bottleneck = bottleneck;
    m.prototypes = prototypes;
    return m;
  }

  void validate() const {
    model().validate();
    require(lambda1 >= 0.0 && lambda2 >= 0.0, ErrorKind::Usage,
            "config: loss weights must be non-negative");
    require(contexts >= 1, ErrorKind::Usage, "config: loss.contexts must be >= 1");
    require(kmeans_iters >= 1, ErrorKind::Usage,
            "config: loss.kmeans_iters must be >= 1");
    require(tau_student > 0.0 && tau_teacher > 0.0, ErrorKind::Usage,
            "config: temperatures must be positive");
    require(center_rate >= 0.0 && center_rate <= 1.0, ErrorKind::Usage,
            "config: loss.center_rate must be in [0, 1]");
    require(mask_ratio_lo > 0.0 && mask_ratio_hi <= 1.0 &&
                mask_ratio_lo <= mask_ratio_hi,
            ErrorKind::Usage, "config: mask ratio range must satisfy 0 < lo <= hi <= 1");
    require(momentum_start >= 0.0 && momentum_end <= 1.0 &&
                momentum_start <= momentum_end,
            ErrorKind::Usage,
            "config: momentum schedule must satisfy 0 <= start <= end <= 1");
    require(lr > 0.0, ErrorKind::Usage, "config: optim.lr must be positive");
    require(weight_decay >= 0.0, ErrorKind::Usage,
            "config: optim.weight_decay must be non-negative");
    require(steps >= 0, ErrorKind::Usage, "config: run.steps must be >= 0");
    require(warmup_steps >= 0 && warmup_steps <= std::max<int64_t>(steps, 1),
            ErrorKind::Usage, "config: optim.warmup_steps must be in [0, steps]");
    require(batch_size >= 1, ErrorKind::Usage, "config: run.batch_size must be >= 1");
    require(threads >= 1, ErrorKind::Usage, "config: run.threads must be >= 1");
    require(checkpoint_every >= 1, ErrorKind::Usage,
            "config: run.checkpoint_every must be >= 1");
  }
};

// Dataset generation knobs for the simulate subcommand.
struct SimulateConfig {
  std::string kind = "moving_shapes";  // or image_folder
  std::string image_dir;
  std::string pattern = "mixed";
  std::string out_dir = "runs/dataset";
  int64_t count = 64;
  int64_t width = 64;
  int64_t height = 64;
  int64_t frames = 9;
  int64_t duration_us = 100000;
  double amplitude_px = 8.0;
  double contrast_threshold = 0.2;
  double noise_rate_hz = 0.0;
  int64_t refractory_us = 0;
  uint64_t seed = 7;

  ConfigSchema schema() {
    ConfigSchema s;
    s.bind("data.kind", &kind);
    s.bind("data.image_dir", &image_dir);
    s.bind("data.pattern", &pattern);
    s.bind("data.out_dir", &out_dir);
    s.bind("data.count", &count);
    s.bind("scene.width", &width);
    s.bind("scene.height", &height);
    s.bind("scene.frames", &frames);
    s.bind("scene.duration_us", &duration_us);
    s.bind("scene.amplitude_px", &amplitude_px);
    s.bind("sim.contrast_threshold", &contrast_threshold);
    s.bind("sim.noise_rate_hz", &noise_rate_hz);
    s.bind("sim.refractory_us", &refractory_us);
    s.bind("run.seed", &seed);
    return s;
  }

  void validate() const {
    require(kind == "moving_shapes" || kind == "image_folder", ErrorKind::Usage,
            cat("config: unknown data.kind '", kind, "'"));
    require(count >= 1, ErrorKind::Usage, "config: data.count must be >= 1");
    require(width >= 16 && height >= 16, ErrorKind::Usage,
            "config: scene must be at least 16x16");
    require(frames >= 2, ErrorKind::Usage, "config: scene.frames must be >= 2");
    require(duration_us >= 1, ErrorKind::Usage,
            "config: scene.duration_us must be >= 1");
    require(std::isfinite(amplitude_px) && amplitude_px >= 0.0, ErrorKind::Usage,
            "config: scene.amplitude_px must be non-negative");
    require(std::isfinite(contrast_threshold) && contrast_threshold > 0.0,
            ErrorKind::Usage, "config: sim.contrast_threshold must be positive");
    require(std::isfinite(noise_rate_hz) && noise_rate_hz >= 0.0, ErrorKind::Usage,
            "config: sim.noise_rate_hz must be non-negative");
    require(refractory_us >= 0, ErrorKind::Usage,
            "config: sim.refractory_us must be non-negative");
  }
};

// Frozen-feature linear probing knobs.
struct ProbeConfig {
  std::string checkpoint;
  std::string manifest;
  std::string out_dir = "runs/probe";
  int64_t classes = 3;
  int64_t probe_steps = 200;
  double probe_lr = 0.5;
  int64_t train_fraction_pct = 75;
  uint64_t seed = 7;
  bool random_backbone = false;  // evaluates an untrained control instead

  ConfigSchema schema() {
    ConfigSchema s;
    s.bind("probe.checkpoint", &checkpoint);
    s.bind("probe.manifest", &manifest);
    s.bind("probe.out_dir", &out_dir);
    s.bind("probe.classes", &classes);
    s.bind("probe.steps", &probe_steps);
    s.bind("probe.lr", &probe_lr);
    s.bind("probe.train_fraction_pct", &train_fraction_pct);
    s.bind("probe.seed", &seed);
    s.bind("probe.random_backbone", &random_backbone);
    return s;
  }

  void validate() const {
    require(classes >= 2, ErrorKind::Usage, "config: probe.classes must be >= 2");
    require(probe_steps >= 1, ErrorKind::Usage, "config: probe.steps must be >= 1");
    require(probe_lr > 0.0, ErrorKind::Usage, "config: probe.lr must be positive");
    require(train_fraction_pct >= 1 && train_fraction_pct <= 99, ErrorKind::Usage,
            "config: probe.train_fraction_pct must be in [1, 99]");
  }
};

// Visualization knobs for the render subcommand.
struct RenderConfig {
  std::string manifest;
  std::string checkpoint;
  std::string out_dir = "runs/render";
  int64_t count = 4;  // samples from the front of the manifest
  int64_t contexts = 8;
  int64_t kmeans_iters = 10;
  uint64_t seed = 7;

  ConfigSchema schema() {
    ConfigSchema s;
    s.bind("data.manifest", &manifest);
    s.bind("data.checkpoint", &checkpoint);
    s.bind("data.out_dir", &out_dir);
    s.bind("render.count", &count);
    s.bind("render.contexts", &contexts);
    s.bind("render.kmeans_iters", &kmeans_iters);
    s.bind("run.seed", &seed);
    return s;
  }

  void validate() const {
    require(count >= 1, ErrorKind::Usage, "config: render.count must be >= 1");
    require(contexts >= 1, ErrorKind::Usage, "config: render.contexts must be >= 1");
    require(kmeans_iters >= 1, ErrorKind::Usage,
            "config: render.kmeans_iters must be >= 1");
  }
};

// One-command comparison of pre-training with and without the context loss.
// The embedded training config supplies everything but the output layout:
// each leg writes under out_dir, so data.out_dir is ignored here.
struct AblationConfig {
  TrainConfig train;
  std::string out_dir = "runs/ablation";
  int64_t probe_classes = 3;
  int64_t probe_steps = 200;
  double probe_lr = 0.5;
  int64_t probe_train_fraction_pct = 75;
  uint64_t probe_seed = 7;

  ConfigSchema schema() {
    ConfigSchema s = train.schema();
    s.bind("ablate.out_dir", &out_dir);
    s.bind("ablate.probe_classes", &probe_classes);
    s.bind("ablate.probe_steps", &probe_steps);
    s.bind("ablate.probe_lr", &probe_lr);
    s.bind("ablate.probe_train_fraction_pct", &probe_train_fraction_pct);
    s.bind("ablate.probe_seed", &probe_seed);
    return s;
  }

  void validate() const {
    train.validate();
    require(train.lambda1 > 0.0, ErrorKind::Usage,
            "config: the ablation compares loss.lambda1 against 0, so it must be > 0");
    require(probe_classes >= 2, ErrorKind::Usage,
            "config: ablate.probe_classes must be >= 2");
    require(probe_steps >= 1, ErrorKind::Usage,
            "config: ablate.probe_steps must be >= 1");
    require(probe_lr > 0.0, ErrorKind::Usage, "config: ablate.probe_lr must be positive");
    require(probe_train_fraction_pct >= 1 && probe_train_fraction_pct <= 99,
            ErrorKind::Usage,
            "config: ablate.probe_train_fraction_pct must be in [1, 99]");
  }
};

}  // namespace evssl
