#pragma once
// Pre-training orchestration: augmented pair assembly, the patch / context /
// image losses on a per-sample tape, gradient accumulation, AdamW with warmup
// plus cosine decay, the EMA teacher, centering, checkpoints, and metrics.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evssl/augment.hpp"
#include "evssl/common.hpp"
#include "evssl/config.hpp"
#include "evssl/context.hpp"
#include "evssl/event.hpp"
#include "evssl/model.hpp"
#include "evssl/serialize.hpp"
#include "evssl/simulate.hpp"
#include "evssl/tensor.hpp"

namespace evssl {

// Linear warmup to the base rate, then cosine decay toward zero.
inline double lr_at(const TrainConfig& cfg, int64_t step) {
  require(step >= 0, ErrorKind::Usage, "lr_at: negative step");
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const int64_t span = std::max<int64_t>(cfg.steps - cfg.warmup_steps, 1);
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.lr * 0.5 * (1.0 + std::cos(Rng::kPi * std::min(progress, 1.0)));
}

// Cosine ramp of the EMA momentum from start to end over the full run.
inline double momentum_at(const TrainConfig& cfg, int64_t step) {
  require(step >= 0, ErrorKind::Usage, "momentum_at: negative step");
  const double total = static_cast<double>(std::max<int64_t>(cfg.steps, 1));
  const double phase = std::min(static_cast<double>(step) / total, 1.0);
  return cfg.momentum_end -
         (cfg.momentum_end - cfg.momentum_start) * 0.5 *
             (std::cos(Rng::kPi * phase) + 1.0);
}

namespace detail {

template <typename S>
struct NoGradGuard {
  Tape<S>* tape;
  bool prev;
  explicit NoGradGuard(Tape<S>& t) : tape(&t), prev(t.grad_enabled()) {
    t.set_grad_enabled(false);
  }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  ~NoGradGuard() { tape->set_grad_enabled(prev); }
};

inline double entropy_of_rows(const std::vector<double>& probs, int64_t rows, int64_t d) {
  double sum = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double h = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double p = probs[static_cast<size_t>(r * d + j)];
      if (p > 0.0) h -= p * std::log(p);
    }
    sum += h;
  }
  return sum;
}

}  // namespace detail

// Mean cross-entropy between teacher and student patch predictions over the
// masked rows only; unmasked rows are never gathered, so they contribute
// nothing to the value or the gradient.
template <typename S>
Tensor<S> loss_patch(Tensor<S> student_logits, std::span<const S> teacher_logits,
                     const MaskVector& mask, double tau_s, double tau_t,
                     const std::vector<S>& center) {
  require(student_logits.valid(), ErrorKind::Usage, "loss_patch: invalid tensor handle");
  Tape<S>& tape = *student_logits.tape();
  const Shape sh = tape.node(student_logits.id()).shape;
  require(sh.size() == 2, ErrorKind::Usage, "loss_patch: logits must be rank-2");
  const int64_t n = sh[0], d = sh[1];
  require(static_cast<int64_t>(teacher_logits.size()) == n * d, ErrorKind::Usage,
          "loss_patch: teacher row count mismatch");
  require(static_cast<int64_t>(mask.m.size()) == n, ErrorKind::Usage,
          "loss_patch: mask length mismatch");

  std::vector<int64_t> idx;
  for (int64_t i = 0; i < n; ++i)
    if (mask.m[static_cast<size_t>(i)]) idx.push_back(i);
  require(!idx.empty(), ErrorKind::Usage, "loss_patch: mask selects no patches");

  std::vector<S> t_rows;
  t_rows.reserve(idx.size() * static_cast<size_t>(d));
  for (const int64_t i : idx)
    t_rows.insert(t_rows.end(), teacher_logits.begin() + i * d,
                  teacher_logits.begin() + (i + 1) * d);
  const auto probs = teacher_distributions(std::span<const S>(t_rows),
                                           static_cast<int64_t>(idx.size()), d, center,
                                           tau_t);
  const auto gathered = gather_rows(student_logits, std::move(idx));
  return cross_entropy_probs(probs, gathered, tau_s);
}

template <typename S>
struct ContextLoss {
  Tensor<S> loss;
  int64_t used = 0;            // contexts non-empty on both sides
  std::vector<S> teacher_rows;  // [used, prototypes] teacher context logits
};

// Clusters teacher features of the uncropped view, transfers the assignments
// through the correspondence map, pools both sides per context, and averages
// the cross-entropies over the usable contexts.
template <typename S>
ContextLoss<S> loss_context(Tape<S>& tape, const ModelConfig& cfg,
                            const BoundParams<S>& student, const BoundParams<S>& teacher,
                            Tensor<S> z_star_student, Tensor<S> z_plus_teacher,
                            const CorrespondenceMap& corr, int64_t contexts,
                            int64_t kmeans_iters, uint64_t kmeans_seed, double tau_s,
                            double tau_t, const std::vector<S>& center) {
  Rng rng(kmeans_seed);
  const Shape zs = tape.node(z_plus_teacher.id()).shape;
  const auto mined =
      mine_contexts(z_plus_teacher.value(), zs[0], zs[1], contexts, kmeans_iters, rng);
  const ContextAssignment& a_plus = mined.assignment;
  const ContextAssignment a_star = transfer_assignments(a_plus, corr);

  std::vector<int64_t> usable;
  for (int64_t c = 0; c < contexts; ++c)
    if (!context_members(a_plus, c).empty() && !context_members(a_star, c).empty())
      usable.push_back(c);
  require(!usable.empty(), ErrorKind::Data,
          "loss_context: no context survived the correspondence transfer");

  Tensor<S> t_logits;
  {
    detail::NoGradGuard<S> guard(tape);
    std::vector<Tensor<S>> pooled;
    for (const int64_t c : usable)
      pooled.push_back(
          attention_pool(tape, teacher, cfg, gather_context(z_plus_teacher, a_plus, c)));
    const auto stacked = pooled.size() == 1 ? pooled[0] : concat(0, pooled);
    t_logits = project_head(tape, teacher, cfg, HeadRole::Context, stacked);
  }
  const auto probs =
      teacher_distributions(t_logits.value(), static_cast<int64_t>(usable.size()),
                            cfg.prototypes, center, tau_t);

  std::vector<Tensor<S>> pooled_s;
  for (const int64_t c : usable)
    pooled_s.push_back(
        attention_pool(tape, student, cfg, gather_context(z_star_student, a_star, c)));
  const auto stacked_s = pooled_s.size() == 1 ? pooled_s[0] : concat(0, pooled_s);
  const auto s_logits = project_head(tape, student, cfg, HeadRole::Context, stacked_s);

  ContextLoss<S> out;
  out.loss = cross_entropy_probs(probs, s_logits, tau_s);
  out.used = static_cast<int64_t>(usable.size());
  const auto tv = t_logits.value();
  out.teacher_rows.assign(tv.begin(), tv.end());
  return out;
}

template <typename S>
struct ImageLoss {
  Tensor<S> loss;
  std::vector<S> teacher_row;  // [1, prototypes]
};

// Mean-pools both feature sets over patches and compares the image heads.
template <typename S>
ImageLoss<S> loss_image(Tape<S>& tape, const ModelConfig& cfg,
                        const BoundParams<S>& student, const BoundParams<S>& teacher,
                        Tensor<S> z_star_student, Tensor<S> z_plus_teacher, double tau_s,
                        double tau_t, const std::vector<S>& center) {
  Tensor<S> t_logits;
  {
    detail::NoGradGuard<S> guard(tape);
    t_logits =
        project_head(tape, teacher, cfg, HeadRole::Image, mean_rows(z_plus_teacher));
  }
  const auto probs =
      teacher_distributions(t_logits.value(), 1, cfg.prototypes, center, tau_t);
  const auto s_logits =
      project_head(tape, student, cfg, HeadRole::Image, mean_rows(z_star_student));
  ImageLoss<S> out;
  out.loss = cross_entropy_probs(probs, s_logits, tau_s);
  const auto tv = t_logits.value();
  out.teacher_row.assign(tv.begin(), tv.end());
  return out;
}

template <typename S>
struct SampleGraph {
  Tensor<S> total;  // scalar actually differentiated (single-precision path)
  double patch = 0.0;
  double context = 0.0;
  double image = 0.0;
  double total_value = 0.0;  // decomposition recombined in double
  int64_t mask_count = 0;
  int64_t contexts_used = 0;
  double entropy_sum = 0.0;  // teacher patch distributions, all rows
  int64_t entropy_rows = 0;
  std::vector<S> teacher_patch_rows;
  std::vector<S> teacher_context_rows;
  std::vector<S> teacher_image_row;
};

// One sample's full loss graph. The teacher runs first with gradients
// disabled (intact view for the patch targets, the uncropped view for context
// and image targets); the student forwards the masked view once and all three
// losses share that pass.
template <typename S>
SampleGraph<S> build_sample_graph(Tape<S>& tape, const ModelConfig& cfg,
                                  const TrainConfig& tc, const BoundParams<S>& student,
                                  const BoundParams<S>& teacher,
                                  const std::array<std::vector<S>, 3>& centers,
                                  const AugmentedPair& pair, const MaskVector& mask,
                                  uint64_t kmeans_seed) {
  const int64_t n = cfg.tokens(), d = cfg.prototypes;
  require(static_cast<int64_t>(mask.m.size()) == n, ErrorKind::Usage,
          "build_sample_graph: mask length mismatch");
  const auto star_patches = patchify<S>(pair.x_star, cfg.patch_size);
  const auto plus_patches = patchify<S>(pair.x_plus, cfg.patch_size);

  const std::vector<S> no_center;
  const auto center_for = [&](HeadRole role) -> const std::vector<S>& {
    return tc.centering ? centers[static_cast<size_t>(role)] : no_center;
  };

  SampleGraph<S> g;
  g.mask_count = mask.count();

  Tensor<S> t_patch_logits, z_plus_t;
  {
    detail::NoGradGuard<S> guard(tape);
    const auto x_star_t =
        tape.leaf({n, cfg.patch_dim()}, star_patches, false, "x_star_teacher");
    const auto z_star_t = encode(tape, teacher, cfg, x_star_t, nullptr);
    t_patch_logits = project_head(tape, teacher, cfg, HeadRole::Patch, z_star_t);
    const auto x_plus_t =
        tape.leaf({n, cfg.patch_dim()}, plus_patches, false, "x_plus_teacher");
    z_plus_t = encode(tape, teacher, cfg, x_plus_t, nullptr);
  }
  {
    const auto tv = t_patch_logits.value();
    g.teacher_patch_rows.assign(tv.begin(), tv.end());
    const auto all_probs = teacher_distributions(tv, n, d,
                                                 center_for(HeadRole::Patch),
                                                 tc.tau_teacher);
    g.entropy_sum = detail::entropy_of_rows(all_probs, n, d);
    g.entropy_rows = n;
  }

  const auto x_star_s =
      tape.leaf({n, cfg.patch_dim()}, star_patches, false, "x_star_student");
  const auto z_star_s = encode(tape, student, cfg, x_star_s, &mask);
  const auto s_patch_logits = project_head(tape, student, cfg, HeadRole::Patch, z_star_s);

  const auto l_patch = loss_patch(s_patch_logits, t_patch_logits.value(), mask,
                                  tc.tau_student, tc.tau_teacher,
                                  center_for(HeadRole::Patch));
  g.patch = static_cast<double>(l_patch.scalar());
  Tensor<S> total = l_patch;

  if (tc.lambda1 > 0.0) {
    auto ctx = loss_context(tape, cfg, student, teacher, z_star_s, z_plus_t,
                            pair.correspondence, tc.contexts, tc.kmeans_iters,
                            kmeans_seed, tc.tau_student, tc.tau_teacher,
                            center_for(HeadRole::Context));
    g.context = static_cast<double>(ctx.loss.scalar());
    g.contexts_used = ctx.used;
    g.teacher_context_rows = std::move(ctx.teacher_rows);
    total = add(total, scale(ctx.loss, tc.lambda1));
  }
  if (tc.lambda2 > 0.0) {
    auto img = loss_image(tape, cfg, student, teacher, z_star_s, z_plus_t,
                          tc.tau_student, tc.tau_teacher, center_for(HeadRole::Image));
    g.image = static_cast<double>(img.loss.scalar());
    g.teacher_image_row = std::move(img.teacher_row);
    total = add(total, scale(img.loss, tc.lambda2));
  }

  g.total = total;
  g.total_value = g.patch + tc.lambda1 * g.context + tc.lambda2 * g.image;
  return g;
}

// Batch-mean metrics for one optimization step. l_total is the weighted sum
// of the three parts recombined in double precision.
struct LossReport {
  int64_t step = 0;
  double l_patch = 0.0;
  double l_context = 0.0;
  double l_image = 0.0;
  double l_total = 0.0;
  int64_t mask_count = 0;       // summed over the batch
  double contexts_used = 0.0;   // mean per sample
  double teacher_entropy = 0.0; // mean over all teacher patch rows
  double lr = 0.0;
  double momentum = 0.0;
};

struct LoadedDataset {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<EventImage> images;        // voxelized, normalized
  std::vector<std::string> label_files;  // empty string when absent
  std::vector<std::string> sample_ids;
};

inline LoadedDataset load_dataset(const std::string& manifest_path, int64_t bins) {
  namespace fs = std::filesystem;
  const DatasetManifest man = load_manifest(manifest_path);
  require(!man.samples.empty(), ErrorKind::Data,
          cat("dataset '", manifest_path, "' has no samples"));
  LoadedDataset out;
  out.width = man.samples[0].width;
  out.height = man.samples[0].height;
  out.images.reserve(man.samples.size());
  for (const auto& s : man.samples) {
    require(s.width == out.width && s.height == out.height, ErrorKind::Data,
            cat("dataset '", manifest_path, "': sample '", s.event_file,
                "' has mixed dimensions"));
    const EventStream stream = read_events((fs::path(man.root) / s.event_file).string());
    out.images.push_back(to_event_image(voxelize(stream, bins)));
    out.label_files.push_back(
        s.label_file.empty() ? std::string()
                             : (fs::path(man.root) / s.label_file).string());
    out.sample_ids.push_back(s.event_file);
  }
  return out;
}

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<EventImage> dataset)
      : cfg_(cfg),
        mcfg_(cfg.model()),
        pair_(StudentTeacherPair<float>::init(mcfg_, cfg.seed)),
        data_(std::move(dataset)),
        sample_rng_(mix_seed(cfg.seed, seed_tag::sample)),
        grid_(make_patch_grid(mcfg_.image_size, mcfg_.image_size, mcfg_.patch_size)) {
    cfg_.validate();
    require(!data_.empty(), ErrorKind::Data, "trainer: empty dataset");
    for (const auto& img : data_)
      require(img.channels == mcfg_.channels && img.height == mcfg_.image_size &&
                  img.width == mcfg_.image_size,
              ErrorKind::Data,
              cat("trainer: dataset sample is ", img.channels, "x", img.height, "x",
                  img.width, ", config wants ", mcfg_.channels, "x", mcfg_.image_size,
                  "x", mcfg_.image_size));
    grads_.resize(pair_.student.params.items.size());
    for (size_t i = 0; i < grads_.size(); ++i)
      grads_[i].assign(static_cast<size_t>(pair_.student.params.items[i].numel()), 0.0f);
  }

  const TrainConfig& config() const { return cfg_; }
  const ModelConfig& model_config() const { return mcfg_; }
  int64_t step() const { return step_; }
  const StudentTeacherPair<float>& pair() const { return pair_; }
  StudentTeacherPair<float>& pair() { return pair_; }

  // Inspection hooks for the last sample of the last step.
  void keep_last_tape(bool on) { keep_last_tape_ = on; }
  const Tape<float>* last_tape() const { return last_tape_.get(); }
  const std::vector<int32_t>& last_teacher_leaves() const { return last_teacher_leaves_; }
  const std::vector<int32_t>& last_student_leaves() const { return last_student_leaves_; }

  LossReport train_step() {
    const int64_t batch = cfg_.batch_size;
    for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0f);

    LossReport rep;
    rep.step = step_;
    rep.lr = lr_at(cfg_, step_);
    rep.momentum = momentum_at(cfg_, step_);
    double entropy_sum = 0.0;
    int64_t entropy_rows = 0;
    std::vector<std::vector<float>> patch_rows, context_rows, image_rows;
    const int64_t d = mcfg_.prototypes;
    const auto append_rows = [d](std::vector<std::vector<float>>& dst,
                                 const std::vector<float>& flat) {
      for (size_t off = 0; off + static_cast<size_t>(d) <= flat.size();
           off += static_cast<size_t>(d))
        dst.emplace_back(flat.begin() + static_cast<int64_t>(off),
                         flat.begin() + static_cast<int64_t>(off) + d);
    };

    for (int64_t b = 0; b < batch; ++b) {
      const auto data_index =
          static_cast<int64_t>(sample_rng_.uniform_index(data_.size()));

      Rng aug_rng(mix_seed(cfg_.seed, seed_tag::augment, static_cast<uint64_t>(step_),
                           static_cast<uint64_t>(b)));
      const AugmentedPair pair =
          make_augmented_pair(data_[static_cast<size_t>(data_index)], aug_rng,
                              aug_ranges_, blur_jitter_, grid_);
      Rng mask_rng(mix_seed(cfg_.seed, seed_tag::mask, static_cast<uint64_t>(step_),
                            static_cast<uint64_t>(b)));
      const double ratio = mask_rng.uniform(cfg_.mask_ratio_lo, cfg_.mask_ratio_hi);
      const MaskVector mask = sample_mask(mask_rng, mcfg_.tokens(), ratio);
      const uint64_t km_seed = mix_seed(cfg_.seed, seed_tag::kmeans,
                                        static_cast<uint64_t>(step_),
                                        static_cast<uint64_t>(b));

      auto tape = std::make_unique<Tape<float>>();
      BoundParams<float> student, teacher;
      SampleGraph<float> g;
      try {
        student = bind_params(*tape, pair_.student.params, true);
        teacher = bind_params(*tape, pair_.teacher.params, false);
        g = build_sample_graph(*tape, mcfg_, cfg_, student, teacher, pair_.centers,
                               pair, mask, km_seed);
        require(std::isfinite(g.total_value) &&
                    std::isfinite(static_cast<double>(g.total.scalar())),
                ErrorKind::Numeric, "non-finite loss");
        tape->backward(scale(g.total, 1.0 / static_cast<double>(batch)));
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::Numeric)
          throw Error(ErrorKind::Numeric, cat("step ", step_, ", sample ", data_index,
                                              ": ", e.what()));
        throw;
      }
      for (size_t i = 0; i < student.leaves.size(); ++i) {
        const float* gv = tape->grad_buffer(student.leaves[i].id());
        auto& acc = grads_[i];
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += gv[j];
      }

      rep.l_patch += g.patch / batch;
      rep.l_context += g.context / batch;
      rep.l_image += g.image / batch;
      rep.mask_count += g.mask_count;
      rep.contexts_used += static_cast<double>(g.contexts_used) / batch;
      entropy_sum += g.entropy_sum;
      entropy_rows += g.entropy_rows;
      append_rows(patch_rows, g.teacher_patch_rows);
      append_rows(context_rows, g.teacher_context_rows);
      append_rows(image_rows, g.teacher_image_row);

      if (keep_last_tape_ && b == batch - 1) {
        last_teacher_leaves_.clear();
        last_student_leaves_.clear();
        for (const auto& t : teacher.leaves) last_teacher_leaves_.push_back(t.id());
        for (const auto& t : student.leaves) last_student_leaves_.push_back(t.id());
        last_tape_ = std::move(tape);
      }
    }
    rep.l_total = rep.l_patch + cfg_.lambda1 * rep.l_context + cfg_.lambda2 * rep.l_image;
    rep.teacher_entropy = entropy_rows > 0 ? entropy_sum / entropy_rows : 0.0;

    AdamWConfig ac;
    ac.lr = rep.lr;
    for (size_t i = 0; i < pair_.student.params.items.size(); ++i) {
      auto& p = pair_.student.params.items[i];
      ac.weight_decay = decayed(p) ? cfg_.weight_decay : 0.0;
      adamw_update(p, std::span<const float>(grads_[i]), ac, step_ + 1);
    }
    ema_update(pair_, rep.momentum);
    if (cfg_.centering) {
      if (!patch_rows.empty())
        update_center(pair_.center(HeadRole::Patch), patch_rows, cfg_.center_rate);
      if (!context_rows.empty())
        update_center(pair_.center(HeadRole::Context), context_rows, cfg_.center_rate);
      if (!image_rows.empty())
        update_center(pair_.center(HeadRole::Image), image_rows, cfg_.center_rate);
    }
    ++step_;
    return rep;
  }

  Checkpoint to_checkpoint() {
    Checkpoint ckpt;
    TrainConfig snapshot = cfg_;
    ckpt.config_json = render_config(snapshot.schema());
    ensure_moments();
    put_params(ckpt, "student.", pair_.student.params);
    put_params(ckpt, "teacher.", pair_.teacher.params);
    for (const auto& p : pair_.student.params.items) {
      ckpt.put(make_tensor<float>(cat("adam.m.", p.name), p.shape,
                                  std::span<const float>(p.adam_m)));
      ckpt.put(make_tensor<float>(cat("adam.v.", p.name), p.shape,
                                  std::span<const float>(p.adam_v)));
    }
    ckpt.put(make_tensor<float>("center.patch", {mcfg_.prototypes},
                                std::span<const float>(pair_.center(HeadRole::Patch))));
    ckpt.put(make_tensor<float>("center.context", {mcfg_.prototypes},
                                std::span<const float>(pair_.center(HeadRole::Context))));
    ckpt.put(make_tensor<float>("center.image", {mcfg_.prototypes},
                                std::span<const float>(pair_.center(HeadRole::Image))));
    set_checkpoint_step(ckpt, static_cast<uint64_t>(step_));
    const std::string state = sample_rng_.save_state();
    ckpt.rng_state.assign(state.begin(), state.end());
    return ckpt;
  }

  void restore(const Checkpoint& ckpt) {
    read_params(ckpt, "student.", pair_.student.params);
    read_params(ckpt, "teacher.", pair_.teacher.params);
    for (auto& p : pair_.student.params.items) {
      p.adam_m = tensor_values<float>(ckpt.at(cat("adam.m.", p.name)));
      p.adam_v = tensor_values<float>(ckpt.at(cat("adam.v.", p.name)));
    }
    pair_.center(HeadRole::Patch) = tensor_values<float>(ckpt.at("center.patch"));
    pair_.center(HeadRole::Context) = tensor_values<float>(ckpt.at("center.context"));
    pair_.center(HeadRole::Image) = tensor_values<float>(ckpt.at("center.image"));
    step_ = static_cast<int64_t>(checkpoint_step(ckpt));
    require(!ckpt.rng_state.empty(), ErrorKind::Data,
            "checkpoint is missing the RNG state");
    sample_rng_.load_state(std::string(ckpt.rng_state.begin(), ckpt.rng_state.end()));
  }

 private:
  // Weight decay applies to genuine matrices only; biases, gains, the mask
  // token, and the pooling query are left undecayed.
  static bool decayed(const ParamTensor<float>& p) {
    return p.shape.size() == 2 && p.shape[0] > 1 && p.shape[1] > 1;
  }

  void ensure_moments() {
    for (auto& p : pair_.student.params.items) {
      const size_t n = static_cast<size_t>(p.numel());
      if (p.adam_m.size() != n) p.adam_m.assign(n, 0.0f);
      if (p.adam_v.size() != n) p.adam_v.assign(n, 0.0f);
    }
  }

  TrainConfig cfg_;
  ModelConfig mcfg_;
  StudentTeacherPair<float> pair_;
  std::vector<EventImage> data_;
  Rng sample_rng_;
  PatchGrid grid_;
  AffineRanges aug_ranges_;
  BlurJitterParams blur_jitter_;
  std::vector<std::vector<float>> grads_;
  int64_t step_ = 0;
  bool keep_last_tape_ = false;
  std::unique_ptr<Tape<float>> last_tape_;
  std::vector<int32_t> last_teacher_leaves_;
  std::vector<int32_t> last_student_leaves_;
};

struct TrainRunResult {
  std::string checkpoint_path;  // final checkpoint
  std::string metrics_path;
  double initial_total = 0.0;
  double final_total = 0.0;
  int64_t steps_run = 0;
};

inline std::string checkpoint_name(int64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.eckp",
                static_cast<long long>(step));
  return buf;
}

// Full pre-training run: loads the dataset, optionally resumes, writes the
// resolved config, appends CSV metrics, and checkpoints periodically plus at
// the end.
inline TrainRunResult run_training(TrainConfig cfg) {
  cfg.validate();
  require(!cfg.manifest.empty(), ErrorKind::Usage,
          "config: data.manifest is required for pre-training");
  const LoadedDataset data = load_dataset(cfg.manifest, cfg.voxel_bins);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  Trainer trainer(cfg, data.images);
  if (!cfg.resume.empty()) trainer.restore(load_checkpoint(cfg.resume));

  {
    TrainConfig snapshot = cfg;
    write_file_text(cfg.out_dir + "/resolved.toml",
                    cat("# ", kToolVersion, "\n", render_config(snapshot.schema())));
  }

  const std::string metrics_path = cfg.out_dir + "/metrics.csv";
  std::ofstream csv;
  if (trainer.step() == 0 || !fs::exists(metrics_path)) {
    csv.open(metrics_path, std::ios::trunc);
    csv << "step,l_patch,l_context,l_image,l_total,mask_count,contexts_used,"
           "teacher_entropy,lr,momentum\n";
  } else {
    csv.open(metrics_path, std::ios::app);
  }
  require(csv.good(), ErrorKind::Data, cat("cannot write metrics to '", metrics_path, "'"));

  TrainRunResult res;
  res.metrics_path = metrics_path;
  char line[320];
  while (trainer.step() < cfg.steps) {
    const LossReport r = trainer.train_step();
    if (res.steps_run == 0) res.initial_total = r.l_total;
    res.final_total = r.l_total;
    ++res.steps_run;
    std::snprintf(line, sizeof(line),
                  "%lld,%.9g,%.9g,%.9g,%.9g,%lld,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(r.step), r.l_patch, r.l_context, r.l_image,
                  r.l_total, static_cast<long long>(r.mask_count), r.contexts_used,
                  r.teacher_entropy, r.lr, r.momentum);
    csv << line;
    csv.flush();
    if (trainer.step() % cfg.checkpoint_every == 0 && trainer.step() < cfg.steps)
      save_checkpoint(cfg.out_dir + "/" + checkpoint_name(trainer.step()),
                      trainer.to_checkpoint());
  }
  res.checkpoint_path = cfg.out_dir + "/checkpoint_final.eckp";
  save_checkpoint(res.checkpoint_path, trainer.to_checkpoint());
  return res;
}

}  // namespace evssl
