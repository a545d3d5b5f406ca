#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "evssl/common.hpp"
#include "evssl/config.hpp"
#include "evssl/model.hpp"
#include "evssl/png_io.hpp"
#include "evssl/serialize.hpp"
#include "evssl/tensor.hpp"
#include "evssl/trainer.hpp"

// Frozen-feature linear probing. The teacher backbone embeds every sample
// intact (no masking, no augmentation); a multinomial logistic-regression
// head is trained on the frozen per-patch features and scored as patch-level
// segmentation against majority-vote patch labels.

namespace evssl {

// ---------------------------------------------------------------------------
// Parameter fingerprints.
// ---------------------------------------------------------------------------

// FNV-1a over names, shapes, and raw value bytes. Cheap identity for
// before/after comparisons and for naming the probed backbone in reports.
inline uint64_t param_fingerprint(const ParamStore<float>& store) {
  uint64_t h = 0xcbf29ce484222325ull;
  const auto mix = [&h](const void* data, size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& p : store.items) {
    mix(p.name.data(), p.name.size());
    for (const int64_t d : p.shape) mix(&d, sizeof(d));
    mix(p.value.data(), p.value.size() * sizeof(float));
  }
  return h;
}

inline std::string hex_u64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Feature extraction.
// ---------------------------------------------------------------------------

// Per-patch backbone features for a set of samples, row-major
// [samples * tokens, dim] with sample i occupying rows [i*tokens, (i+1)*tokens).
struct FeatureSet {
  int64_t tokens = 0;
  int64_t dim = 0;
  std::vector<std::string> sample_ids;
  std::vector<float> values;

  int64_t samples() const { return static_cast<int64_t>(sample_ids.size()); }

  std::span<const float> sample_rows(int64_t i) const {
    require(i >= 0 && i < samples(), ErrorKind::Usage,
            cat("feature set: sample index ", i, " out of range [0, ", samples(), ")"));
    return std::span<const float>(values).subspan(
        static_cast<size_t>(i * tokens * dim), static_cast<size_t>(tokens * dim));
  }
};

// Runs the backbone over each intact image. `threads` only partitions the
// sample loop; every partition writes a disjoint slice, so the result is
// identical for any thread count.
inline FeatureSet extract_features(const Network<float>& net, const ModelConfig& cfg,
                                   const std::vector<EventImage>& images,
                                   std::vector<std::string> sample_ids,
                                   int64_t threads = 1) {
  require(!images.empty(), ErrorKind::Usage, "extract_features: no samples");
  require(images.size() == sample_ids.size(), ErrorKind::Usage,
          cat("extract_features: ", images.size(), " images but ", sample_ids.size(),
              " sample ids"));
  require(threads >= 1, ErrorKind::Usage, "extract_features: threads must be >= 1");
  for (size_t i = 0; i < images.size(); ++i) {
    const EventImage& img = images[i];
    require(img.channels == cfg.channels && img.height == cfg.image_size &&
                img.width == cfg.image_size,
            ErrorKind::Data,
            cat("extract_features: sample '", sample_ids[i], "' is ", img.channels, "x",
                img.height, "x", img.width, ", model wants ", cfg.channels, "x",
                cfg.image_size, "x", cfg.image_size));
  }

  FeatureSet fs;
  fs.tokens = cfg.tokens();
  fs.dim = cfg.dim;
  fs.sample_ids = std::move(sample_ids);
  fs.values.assign(images.size() * static_cast<size_t>(fs.tokens * fs.dim), 0.0f);

  const auto run_range = [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      Tape<float> tp;
      detail::NoGradGuard<float> off(tp);
      const BoundParams<float> p = bind_params(tp, net.params, false);
      Tensor<float> patches =
          tp.leaf({cfg.tokens(), cfg.patch_dim()},
                  patchify<float>(images[i], cfg.patch_size), false, "probe_input");
      const auto v = encode(tp, p, cfg, patches).value();
      std::copy(v.begin(), v.end(),
                fs.values.begin() + static_cast<size_t>(i) *
                                        static_cast<size_t>(fs.tokens * fs.dim));
    }
  };

  const size_t n = images.size();
  const size_t workers = std::min<size_t>(static_cast<size_t>(threads), n);
  if (workers <= 1) {
    run_range(0, n);
    return fs;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (size_t w = 0; w < workers; ++w) {
    const size_t lo = n * w / workers, hi = n * (w + 1) / workers;
    pool.emplace_back([&, w, lo, hi] {
      try {
        run_range(lo, hi);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return fs;
}

// Features travel in the same container as checkpoints: one [tokens, dim]
// float tensor per sample, named by its id, in dataset order.
inline void save_features(const std::string& path, const FeatureSet& fs) {
  Checkpoint out;
  for (int64_t i = 0; i < fs.samples(); ++i) {
    out.put(make_tensor<float>(cat("features.", fs.sample_ids[static_cast<size_t>(i)]),
                               {fs.tokens, fs.dim}, fs.sample_rows(i)));
  }
  save_checkpoint(path, out);
}

inline FeatureSet load_features(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  require(!ckpt.tensors.empty(), ErrorKind::Data,
          cat("feature file '", path, "' holds no tensors"));
  FeatureSet fs;
  for (const auto& t : ckpt.tensors) {
    require(t.name.rfind("features.", 0) == 0, ErrorKind::Data,
            cat("feature file '", path, "': unexpected tensor '", t.name, "'"));
    require(t.dims.size() == 2, ErrorKind::Data,
            cat("feature file '", path, "': tensor '", t.name, "' is not 2-D"));
    if (fs.sample_ids.empty()) {
      fs.tokens = t.dims[0];
      fs.dim = t.dims[1];
    }
    require(t.dims[0] == fs.tokens && t.dims[1] == fs.dim, ErrorKind::Data,
            cat("feature file '", path, "': tensor '", t.name, "' shape ",
                shape_str(t.dims), " does not match [", fs.tokens, "x", fs.dim, "]"));
    const auto v = tensor_values<float>(t);
    fs.sample_ids.push_back(t.name.substr(9));
    fs.values.insert(fs.values.end(), v.begin(), v.end());
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Patch labels.
// ---------------------------------------------------------------------------

// Majority pixel label within each patch cell, in the same row-major cell
// order as patchify. Ties resolve to the lowest class id.
inline std::vector<int32_t> patch_majority_labels(const ImageU8& labels, int64_t patch,
                                                  int64_t classes) {
  require(classes >= 2, ErrorKind::Usage, "patch labels: need at least 2 classes");
  const PatchGrid g = make_patch_grid(labels.height, labels.width, patch);
  std::vector<int32_t> out(static_cast<size_t>(g.count()));
  std::vector<int64_t> hist(static_cast<size_t>(classes));
  for (int64_t i = 0; i < g.count(); ++i) {
    std::fill(hist.begin(), hist.end(), 0);
    const int64_t y0 = g.row_of(i) * patch, x0 = g.col_of(i) * patch;
    for (int64_t py = 0; py < patch; ++py) {
      for (int64_t px = 0; px < patch; ++px) {
        const uint8_t v = labels.at(y0 + py, x0 + px);
        require(v < classes, ErrorKind::Data,
                cat("patch labels: pixel value ", static_cast<int>(v),
                    " outside [0, ", classes, ")"));
        ++hist[v];
      }
    }
    int32_t best = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (hist[static_cast<size_t>(c)] > hist[static_cast<size_t>(best)])
        best = static_cast<int32_t>(c);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression.
// ---------------------------------------------------------------------------

// Linear map dim -> classes plus bias, applied per patch. Weights live in
// double so the convex optimum is reached to tight tolerance.
struct ProbeHead {
  int64_t dim = 0;
  int64_t classes = 0;
  std::vector<double> w;  // [dim, classes]
  std::vector<double> b;  // [classes]
};

namespace detail {

inline void probe_check(const ProbeHead& h, std::span<const float> feats,
                        int64_t* rows_out) {
  require(h.dim >= 1 && h.classes >= 2, ErrorKind::Usage, "probe head: not initialized");
  require(h.w.size() == static_cast<size_t>(h.dim * h.classes) &&
              h.b.size() == static_cast<size_t>(h.classes),
          ErrorKind::Usage, "probe head: weight buffers do not match dims");
  require(feats.size() % static_cast<size_t>(h.dim) == 0, ErrorKind::Usage,
          cat("probe: ", feats.size(), " feature values are not a multiple of dim ",
              h.dim));
  *rows_out = static_cast<int64_t>(feats.size()) / h.dim;
}

// logits = x W + b for one row, in double.
inline void probe_row_logits(const ProbeHead& h, const float* x, double* out) {
  for (int64_t c = 0; c < h.classes; ++c) out[c] = h.b[static_cast<size_t>(c)];
  for (int64_t d = 0; d < h.dim; ++d) {
    const double xd = static_cast<double>(x[d]);
    const double* wrow = h.w.data() + d * h.classes;
    for (int64_t c = 0; c < h.classes; ++c) out[c] += xd * wrow[c];
  }
}

// In place: logits -> softmax probabilities; returns log-sum-exp minus the
// true-class logit, i.e. the row's cross-entropy.
inline double probe_row_softmax(std::span<double> z, int32_t label) {
  double mx = z[0];
  for (const double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  const double loss = std::log(sum) - std::log(z[static_cast<size_t>(label)]);
  for (double& v : z) v /= sum;
  return loss;
}

}  // namespace detail

// Mean cross-entropy of the head on labeled rows.
inline double probe_loss(const ProbeHead& h, std::span<const float> feats,
                         std::span<const int32_t> labels) {
  int64_t rows = 0;
  detail::probe_check(h, feats, &rows);
  require(rows == static_cast<int64_t>(labels.size()), ErrorKind::Usage,
          cat("probe: ", rows, " feature rows but ", labels.size(), " labels"));
  require(rows >= 1, ErrorKind::Usage, "probe: no rows");
  std::vector<double> z(static_cast<size_t>(h.classes));
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t y = labels[static_cast<size_t>(r)];
    require(y >= 0 && y < h.classes, ErrorKind::Data,
            cat("probe: label ", y, " outside [0, ", h.classes, ")"));
    detail::probe_row_logits(h, feats.data() + r * h.dim, z.data());
    total += detail::probe_row_softmax(z, y);
  }
  return total / static_cast<double>(rows);
}

// Argmax class per row; ties resolve to the lowest class id.
inline std::vector<int32_t> probe_predict(const ProbeHead& h,
                                          std::span<const float> feats) {
  int64_t rows = 0;
  detail::probe_check(h, feats, &rows);
  std::vector<int32_t> out(static_cast<size_t>(rows));
  std::vector<double> z(static_cast<size_t>(h.classes));
  for (int64_t r = 0; r < rows; ++r) {
    detail::probe_row_logits(h, feats.data() + r * h.dim, z.data());
    int32_t best = 0;
    for (int64_t c = 1; c < h.classes; ++c)
      if (z[static_cast<size_t>(c)] > z[static_cast<size_t>(best)])
        best = static_cast<int32_t>(c);
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

inline double label_accuracy(std::span<const int32_t> pred,
                             std::span<const int32_t> truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::Usage,
          "accuracy: size mismatch or empty");
  size_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) hit += (pred[i] == truth[i]);
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct ProbeTrainResult {
  ProbeHead head;
  double final_loss = 0.0;      // evaluated after the last update
  double train_accuracy = 0.0;  // on the training rows
};

// Full-batch gradient descent on the softmax cross-entropy. The objective is
// convex, so any seed's init lands at the same loss; the seed only has to
// make the run reproducible.
inline ProbeTrainResult train_probe(std::span<const float> feats,
                                    std::span<const int32_t> labels, int64_t dim,
                                    int64_t classes, int64_t steps, double lr,
                                    uint64_t seed) {
  require(dim >= 1, ErrorKind::Usage, "train_probe: dim must be >= 1");
  require(classes >= 2, ErrorKind::Usage, "train_probe: need at least 2 classes");
  require(steps >= 1, ErrorKind::Usage, "train_probe: steps must be >= 1");
  require(std::isfinite(lr) && lr > 0.0, ErrorKind::Usage,
          "train_probe: lr must be positive");
  const int64_t rows = static_cast<int64_t>(labels.size());
  require(rows >= 1, ErrorKind::Usage, "train_probe: no training rows");
  require(feats.size() == static_cast<size_t>(rows * dim), ErrorKind::Usage,
          cat("train_probe: ", feats.size(), " feature values for ", rows, " rows x ",
              dim, " dims"));
  for (const int32_t y : labels)
    require(y >= 0 && y < classes, ErrorKind::Data,
            cat("train_probe: label ", y, " outside [0, ", classes, ")"));

  ProbeTrainResult res;
  ProbeHead& h = res.head;
  h.dim = dim;
  h.classes = classes;
  h.w.resize(static_cast<size_t>(dim * classes));
  h.b.assign(static_cast<size_t>(classes), 0.0);
  Rng rng(mix_seed(seed, seed_tag::probe));
  for (double& v : h.w) v = 0.01 * rng.normal();

  std::vector<double> gw(h.w.size()), gb(h.b.size()), z(static_cast<size_t>(classes));
  for (int64_t s = 0; s < steps; ++s) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
      const float* x = feats.data() + r * dim;
      detail::probe_row_logits(h, x, z.data());
      detail::probe_row_softmax(z, labels[static_cast<size_t>(r)]);
      z[static_cast<size_t>(labels[static_cast<size_t>(r)])] -= 1.0;
      for (int64_t d = 0; d < dim; ++d) {
        const double xd = static_cast<double>(x[d]);
        double* grow = gw.data() + d * classes;
        for (int64_t c = 0; c < classes; ++c) grow[c] += xd * z[static_cast<size_t>(c)];
      }
      for (int64_t c = 0; c < classes; ++c) gb[static_cast<size_t>(c)] += z[static_cast<size_t>(c)];
    }
    const double scale = lr / static_cast<double>(rows);
    for (size_t i = 0; i < h.w.size(); ++i) h.w[i] -= scale * gw[i];
    for (size_t i = 0; i < h.b.size(); ++i) h.b[i] -= scale * gb[i];
  }
  res.final_loss = probe_loss(h, feats, labels);
  res.train_accuracy = label_accuracy(probe_predict(h, feats), labels);
  return res;
}

// ---------------------------------------------------------------------------
// Segmentation scoring.
// ---------------------------------------------------------------------------

struct ProbeReport {
  std::vector<int64_t> classes_scored;  // ids present in prediction or truth
  std::vector<double> per_class_iou;    // parallel to classes_scored
  double miou = 0.0;
  double pixel_accuracy = 0.0;
  uint64_t probe_seed = 0;
  std::string backbone_id;
  int64_t train_patches = 0;
  int64_t eval_patches = 0;
};

// Per-class IoU = TP / (TP + FP + FN) over patch cells; classes absent from
// both prediction and ground truth are excluded from the mean.
inline ProbeReport evaluate_miou(const ProbeHead& h, std::span<const float> feats,
                                 std::span<const int32_t> labels) {
  const std::vector<int32_t> pred = probe_predict(h, feats);
  require(pred.size() == labels.size() && !pred.empty(), ErrorKind::Usage,
          cat("evaluate_miou: ", pred.size(), " predictions but ", labels.size(),
              " labels"));
  for (const int32_t y : labels)
    require(y >= 0 && y < h.classes, ErrorKind::Data,
            cat("evaluate_miou: label ", y, " outside [0, ", h.classes, ")"));

  ProbeReport rep;
  rep.eval_patches = static_cast<int64_t>(labels.size());
  size_t hit = 0;
  std::vector<int64_t> tp(static_cast<size_t>(h.classes)),
      fp(static_cast<size_t>(h.classes)), fn(static_cast<size_t>(h.classes));
  for (size_t i = 0; i < labels.size(); ++i) {
    const auto p = static_cast<size_t>(pred[i]);
    const auto t = static_cast<size_t>(labels[i]);
    if (p == t) {
      ++tp[p];
      ++hit;
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  rep.pixel_accuracy = static_cast<double>(hit) / static_cast<double>(labels.size());
  double sum = 0.0;
  for (int64_t c = 0; c < h.classes; ++c) {
    const int64_t denom = tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] +
                          fn[static_cast<size_t>(c)];
    if (denom == 0) continue;  // class absent on both sides
    const double iou =
        static_cast<double>(tp[static_cast<size_t>(c)]) / static_cast<double>(denom);
    rep.classes_scored.push_back(c);
    rep.per_class_iou.push_back(iou);
    sum += iou;
  }
  require(!rep.classes_scored.empty(), ErrorKind::Data,
          "evaluate_miou: no class present in predictions or labels");
  rep.miou = sum / static_cast<double>(rep.classes_scored.size());
  return rep;
}

inline nlohmann::json probe_report_json(const ProbeReport& r) {
  nlohmann::json iou = nlohmann::json::object();
  for (size_t i = 0; i < r.classes_scored.size(); ++i)
    iou[std::to_string(r.classes_scored[i])] = r.per_class_iou[i];
  nlohmann::json j;
  j["per_class_iou"] = iou;
  j["miou"] = r.miou;
  j["pixel_accuracy"] = r.pixel_accuracy;
  j["seeds"] = {{"probe", r.probe_seed}};
  j["backbone_id"] = r.backbone_id;
  j["train_patches"] = r.train_patches;
  j["eval_patches"] = r.eval_patches;
  return j;
}

// ---------------------------------------------------------------------------
// End-to-end probe run.
// ---------------------------------------------------------------------------

struct ProbeRunResult {
  ProbeReport report;
  std::string report_path;
  std::string features_path;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

// Loads the teacher backbone from a checkpoint (or a freshly initialized
// control when random_backbone is set), embeds every labeled sample, splits
// whole samples into train/eval, fits the probe, and writes the feature file
// plus the JSON report into out_dir.
inline ProbeRunResult run_probe(const ProbeConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  require(!cfg.checkpoint.empty(), ErrorKind::Usage, "probe: no checkpoint path");
  require(!cfg.manifest.empty(), ErrorKind::Usage, "probe: no manifest path");

  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  TrainConfig tc;
  {
    ConfigSchema schema = tc.schema();
    apply_config_text(schema, ckpt.config_json, cfg.checkpoint);
  }
  const ModelConfig mcfg = tc.model();
  mcfg.validate();

  Network<float> net = Network<float>::init(
      mcfg, cfg.random_backbone ? mix_seed(cfg.seed, seed_tag::init) : 0);
  std::string backbone_id;
  if (cfg.random_backbone) {
    backbone_id = cat("random#", hex_u64(param_fingerprint(net.params)));
  } else {
    read_params(ckpt, "teacher.", net.params);
    backbone_id = cat(fs::path(cfg.checkpoint).filename().string(), "#",
                      hex_u64(param_fingerprint(net.params)));
  }

  const LoadedDataset data = load_dataset(cfg.manifest, tc.voxel_bins);
  const int64_t samples = static_cast<int64_t>(data.images.size());
  require(samples >= 2, ErrorKind::Data,
          cat("probe: need at least 2 samples to split, got ", samples));
  for (int64_t i = 0; i < samples; ++i)
    require(!data.label_files[static_cast<size_t>(i)].empty(), ErrorKind::Data,
            cat("probe: sample '", data.sample_ids[static_cast<size_t>(i)],
                "' has no label map"));

  const FeatureSet feats =
      extract_features(net, mcfg, data.images, data.sample_ids);

  std::vector<int32_t> labels;
  labels.reserve(static_cast<size_t>(samples * feats.tokens));
  for (int64_t i = 0; i < samples; ++i) {
    const ImageU8 lbl = read_png_gray(data.label_files[static_cast<size_t>(i)]);
    require(lbl.width == data.width && lbl.height == data.height, ErrorKind::Data,
            cat("probe: label map for '", data.sample_ids[static_cast<size_t>(i)],
                "' is ", lbl.width, "x", lbl.height, ", events are ", data.width, "x",
                data.height));
    const auto cell = patch_majority_labels(lbl, tc.patch_size, cfg.classes);
    labels.insert(labels.end(), cell.begin(), cell.end());
  }

  // Whole samples are held out, not individual patches.
  std::vector<int64_t> order(static_cast<size_t>(samples));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(mix_seed(cfg.seed, seed_tag::probe, 1));
  for (int64_t i = samples - 1; i > 0; --i) {
    const auto j = static_cast<int64_t>(
        split_rng.uniform_index(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const int64_t n_train =
      std::clamp<int64_t>(samples * cfg.train_fraction_pct / 100, 1, samples - 1);

  const auto gather = [&](int64_t lo, int64_t hi, std::vector<float>& x,
                          std::vector<int32_t>& y) {
    for (int64_t k = lo; k < hi; ++k) {
      const int64_t s = order[static_cast<size_t>(k)];
      const auto rows = feats.sample_rows(s);
      x.insert(x.end(), rows.begin(), rows.end());
      y.insert(y.end(), labels.begin() + s * feats.tokens,
               labels.begin() + (s + 1) * feats.tokens);
    }
  };
  std::vector<float> train_x, eval_x;
  std::vector<int32_t> train_y, eval_y;
  gather(0, n_train, train_x, train_y);
  gather(n_train, samples, eval_x, eval_y);

  const ProbeTrainResult fit = train_probe(train_x, train_y, feats.dim, cfg.classes,
                                           cfg.probe_steps, cfg.probe_lr, cfg.seed);

  ProbeRunResult res;
  res.report = evaluate_miou(fit.head, eval_x, eval_y);
  res.report.probe_seed = cfg.seed;
  res.report.backbone_id = backbone_id;
  res.report.train_patches = static_cast<int64_t>(train_y.size());
  res.train_accuracy = fit.train_accuracy;
  res.final_loss = fit.final_loss;

  fs::create_directories(cfg.out_dir);
  res.features_path = (fs::path(cfg.out_dir) / "features.eckp").string();
  save_features(res.features_path, feats);
  res.report_path = (fs::path(cfg.out_dir) / "probe_report.json").string();
  write_file_text(res.report_path, probe_report_json(res.report).dump(2) + "\n");
  return res;
}

}  // namespace evssl
