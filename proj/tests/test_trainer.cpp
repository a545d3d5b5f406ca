#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "evssl/config.hpp"
#include "evssl/simulate.hpp"
#include "evssl/trainer.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace evssl;
using testutil::TempDir;

namespace {

// Small enough that a sample graph builds in microseconds, big enough that
// every branch (multi-head attention, several contexts, masking) is real.
TrainConfig tiny_train_config() {
  TrainConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.voxel_bins = 2;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.head_hidden = 8;
  c.bottleneck = 6;
  c.prototypes = 10;
  c.contexts = 3;
  c.kmeans_iters = 4;
  c.warmup_steps = 2;
  c.steps = 6;
  c.batch_size = 2;
  c.checkpoint_every = 2;
  c.seed = 11;
  c.lr = 5e-3;
  return c;
}

std::vector<EventImage> synth_images(int64_t n, const ModelConfig& m, uint64_t seed) {
  Rng rng(seed);
  std::vector<EventImage> out;
  for (int64_t i = 0; i < n; ++i) {
    EventImage img;
    img.channels = m.channels;
    img.height = m.image_size;
    img.width = m.image_size;
    img.values.resize(static_cast<size_t>(m.channels * m.image_size * m.image_size));
    for (double& v : img.values)
      v = rng.uniform() < 0.3 ? 0.0 : rng.normal(0.0, 1.0);
    out.push_back(std::move(img));
  }
  return out;
}

template <typename S>
std::vector<S> leaf_values(Rng& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<S> v(static_cast<size_t>(n));
  for (S& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return v;
}

double mean_row_entropy(const std::vector<double>& probs, int64_t rows, int64_t d) {
  double sum = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    std::vector<double> p(probs.begin() + r * d, probs.begin() + (r + 1) * d);
    sum += oracle::entropy_ref(p);
  }
  return sum / static_cast<double>(rows);
}

void expect_numeric(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
    FAIL("expected a numeric error mentioning '" << needle << "'");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Numeric);
    REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("learning rate schedule warms up linearly then decays to zero") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 30;
  cfg.steps = 300;
  REQUIRE(lr_at(cfg, 0) == Catch::Approx(cfg.lr / 30.0));
  REQUIRE(lr_at(cfg, 14) == Catch::Approx(cfg.lr * 15.0 / 30.0));
  REQUIRE(lr_at(cfg, 29) == Catch::Approx(cfg.lr));
  REQUIRE(lr_at(cfg, 30) == Catch::Approx(cfg.lr));
  // linear during warmup
  for (int64_t s = 1; s < 30; ++s)
    REQUIRE(lr_at(cfg, s) - lr_at(cfg, s - 1) == Catch::Approx(cfg.lr / 30.0));
  // nonincreasing afterwards, reaching zero at the horizon
  for (int64_t s = 31; s <= 300; ++s) REQUIRE(lr_at(cfg, s) <= lr_at(cfg, s - 1) + 1e-18);
  REQUIRE(lr_at(cfg, 300) == Catch::Approx(0.0).margin(1e-18));
  REQUIRE_THROWS_AS(lr_at(cfg, -1), Error);

  // no warmup at all is allowed
  cfg.warmup_steps = 0;
  REQUIRE(lr_at(cfg, 0) == Catch::Approx(cfg.lr));
}

TEST_CASE("momentum schedule rides a cosine from start to end") {
  TrainConfig cfg;
  cfg.momentum_start = 0.996;
  cfg.momentum_end = 1.0;
  cfg.steps = 300;
  REQUIRE(momentum_at(cfg, 0) == Catch::Approx(cfg.momentum_start).margin(1e-15));
  REQUIRE(momentum_at(cfg, 300) == cfg.momentum_end);
  REQUIRE(momentum_at(cfg, 150) ==
          Catch::Approx(0.5 * (cfg.momentum_start + cfg.momentum_end)));
  for (int64_t s = 1; s <= 300; ++s)
    REQUIRE(momentum_at(cfg, s) >= momentum_at(cfg, s - 1) - 1e-18);
  REQUIRE_THROWS_AS(momentum_at(cfg, -5), Error);
}

TEST_CASE("patch loss ignores unmasked rows in value and gradient") {
  const int64_t n = 6, d = 5;
  Rng rng(31);
  const auto t_logits = leaf_values<double>(rng, n * d);
  auto s_vals = leaf_values<double>(rng, n * d);
  MaskVector mask;
  mask.m.assign(static_cast<size_t>(n), 0);
  mask.m[1] = 1;
  mask.m[4] = 1;
  const std::vector<double> no_center;

  Tape<double> tp;
  auto s = tp.leaf({n, d}, s_vals, true, "s");
  auto loss = loss_patch(s, std::span<const double>(t_logits), mask, 0.1, 0.04,
                         no_center);
  tp.backward(loss);
  const auto grad = s.grad();
  REQUIRE(static_cast<int64_t>(grad.size()) == n * d);
  for (int64_t i = 0; i < n; ++i) {
    double g1 = 0.0;
    for (int64_t j = 0; j < d; ++j) g1 += std::abs(grad[static_cast<size_t>(i * d + j)]);
    if (mask.m[static_cast<size_t>(i)]) {
      REQUIRE(g1 > 0.0);
    } else {
      REQUIRE(g1 == 0.0);
    }
  }

  // perturbing an unmasked row leaves the loss bit-identical
  auto s_perturbed = s_vals;
  for (int64_t j = 0; j < d; ++j) s_perturbed[static_cast<size_t>(2 * d + j)] += 13.5;
  Tape<double> tp2;
  auto loss2 = loss_patch(tp2.leaf({n, d}, s_perturbed, true, "s"),
                          std::span<const double>(t_logits), mask, 0.1, 0.04, no_center);
  REQUIRE(loss2.scalar() == loss.scalar());

  // perturbing a masked row does not
  auto s_masked = s_vals;
  s_masked[static_cast<size_t>(1 * d)] += 1.0;
  Tape<double> tp3;
  auto loss3 = loss_patch(tp3.leaf({n, d}, s_masked, true, "s"),
                          std::span<const double>(t_logits), mask, 0.1, 0.04, no_center);
  REQUIRE(loss3.scalar() != loss.scalar());

  MaskVector none;
  none.m.assign(static_cast<size_t>(n), 0);
  Tape<double> tp4;
  auto s4 = tp4.leaf({n, d}, s_vals, true, "s");
  REQUIRE_THROWS_AS(
      loss_patch(s4, std::span<const double>(t_logits), mask, 0.1, 0.04,
                 std::vector<double>(3, 0.0)),
      Error);  // center width mismatch
  REQUIRE_THROWS_AS(
      loss_patch(s4, std::span<const double>(t_logits), none, 0.1, 0.04, no_center),
      Error);  // empty mask
}

TEST_CASE("patch loss matches the reference cross-entropy row by row") {
  const int64_t n = 5, d = 7;
  Rng rng(77);
  const auto t_logits = leaf_values<double>(rng, n * d, -2.0, 2.0);
  const auto s_vals = leaf_values<double>(rng, n * d, -2.0, 2.0);
  auto center = leaf_values<double>(rng, d, -0.5, 0.5);
  MaskVector mask;
  mask.m = {1, 0, 1, 1, 0};

  Tape<double> tp;
  auto loss = loss_patch(tp.leaf({n, d}, s_vals, true, "s"),
                         std::span<const double>(t_logits), mask, 0.1, 0.04, center);

  double expect = 0.0;
  int64_t rows = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!mask.m[static_cast<size_t>(i)]) continue;
    std::vector<double> t_row(d), s_row(d);
    for (int64_t j = 0; j < d; ++j) {
      t_row[static_cast<size_t>(j)] =
          t_logits[static_cast<size_t>(i * d + j)] - center[static_cast<size_t>(j)];
      s_row[static_cast<size_t>(j)] = s_vals[static_cast<size_t>(i * d + j)];
    }
    expect += oracle::cross_entropy_ref(t_row, s_row, 0.04, 0.1);
    ++rows;
  }
  expect /= static_cast<double>(rows);
  REQUIRE(loss.scalar() == Catch::Approx(expect).epsilon(1e-10));

  // with constant rows the mean is mask-size invariant
  std::vector<double> t_const(static_cast<size_t>(n * d)), s_const(t_const.size());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      t_const[static_cast<size_t>(i * d + j)] = 0.3 * static_cast<double>(j);
      s_const[static_cast<size_t>(i * d + j)] = -0.2 * static_cast<double>(j);
    }
  MaskVector one, many;
  one.m = {1, 0, 0, 0, 0};
  many.m = {1, 1, 1, 0, 1};
  Tape<double> ta, tb;
  auto la = loss_patch(ta.leaf({n, d}, s_const, true, "s"),
                       std::span<const double>(t_const), one, 0.1, 0.04,
                       std::vector<double>());
  auto lb = loss_patch(tb.leaf({n, d}, s_const, true, "s"),
                       std::span<const double>(t_const), many, 0.1, 0.04,
                       std::vector<double>());
  REQUIRE(la.scalar() == Catch::Approx(lb.scalar()).epsilon(1e-13));
}

TEST_CASE("losses achieve the entropy lower bound when both sides agree") {
  const ModelConfig cfg = tiny_train_config().model();
  auto net = Network<double>::init(cfg, 5);
  const int64_t n = cfg.tokens();
  Rng rng(9);
  const auto feats = leaf_values<double>(rng, n * cfg.dim, -0.8, 0.8);
  const std::vector<double> no_center;
  const double tau = 0.1;

  Tape<double> tp;
  auto bound = bind_params(tp, net.params, true);
  auto z = tp.leaf({n, cfg.dim}, feats, false, "z");

  // image loss: identical params, identical features, equal temperatures
  auto img = loss_image(tp, cfg, bound, bound, z, z, tau, tau, no_center);
  const auto p_img =
      teacher_distributions(std::span<const double>(img.teacher_row), 1,
                            cfg.prototypes, no_center, tau);
  REQUIRE(img.loss.scalar() ==
          Catch::Approx(mean_row_entropy(p_img, 1, cfg.prototypes)).epsilon(1e-9));

  // context loss under the identity correspondence
  CorrespondenceMap ident;
  ident.target.resize(static_cast<size_t>(n));
  std::iota(ident.target.begin(), ident.target.end(), 0);
  auto ctx = loss_context(tp, cfg, bound, bound, z, z, ident, 3, 4, 42, tau, tau,
                          no_center);
  REQUIRE(ctx.used >= 1);
  const auto p_ctx =
      teacher_distributions(std::span<const double>(ctx.teacher_rows), ctx.used,
                            cfg.prototypes, no_center, tau);
  REQUIRE(ctx.loss.scalar() ==
          Catch::Approx(mean_row_entropy(p_ctx, ctx.used, cfg.prototypes))
              .epsilon(1e-9));

  // patch loss: student logits equal to the teacher logits
  auto logits = project_head(tp, bound, cfg, HeadRole::Patch, z);
  const auto lv = logits.value();
  MaskVector mask;
  mask.m.assign(static_cast<size_t>(n), 0);
  mask.m[0] = mask.m[3] = mask.m[7] = 1;
  auto lp = loss_patch(logits, lv, mask, tau, tau, no_center);
  std::vector<double> masked_rows;
  for (int64_t i : {int64_t(0), int64_t(3), int64_t(7)})
    masked_rows.insert(masked_rows.end(), lv.begin() + i * cfg.prototypes,
                       lv.begin() + (i + 1) * cfg.prototypes);
  const auto p_patch =
      teacher_distributions(std::span<const double>(masked_rows), 3, cfg.prototypes,
                            no_center, tau);
  REQUIRE(lp.scalar() ==
          Catch::Approx(mean_row_entropy(p_patch, 3, cfg.prototypes)).epsilon(1e-9));
}

TEST_CASE("context loss averages the per-context cross-entropies") {
  const ModelConfig cfg = tiny_train_config().model();
  auto student_net = Network<double>::init(cfg, 5);
  auto teacher_net = Network<double>::init(cfg, 6);
  const int64_t n = cfg.tokens();
  Rng rng(123);
  const auto zs_vals = leaf_values<double>(rng, n * cfg.dim, -0.8, 0.8);
  const auto zp_vals = leaf_values<double>(rng, n * cfg.dim, -0.8, 0.8);
  auto center = leaf_values<double>(rng, cfg.prototypes, -0.2, 0.2);

  // drop a few correspondences so the transfer has invalid rows
  CorrespondenceMap corr;
  corr.target.resize(static_cast<size_t>(n));
  std::iota(corr.target.begin(), corr.target.end(), 0);
  corr.target[2] = CorrespondenceMap::kInvalid;
  corr.target[9] = CorrespondenceMap::kInvalid;

  const double tau_s = 0.1, tau_t = 0.04;
  const int64_t k = 3, iters = 4;
  const uint64_t seed = 77;

  Tape<double> tp;
  auto student = bind_params(tp, student_net.params, true);
  auto teacher = bind_params(tp, teacher_net.params, false);
  auto zs = tp.leaf({n, cfg.dim}, zs_vals, true, "zs");
  auto zp = tp.leaf({n, cfg.dim}, zp_vals, false, "zp");
  auto ctx = loss_context(tp, cfg, student, teacher, zs, zp, corr, k, iters, seed,
                          tau_s, tau_t, center);

  // independent replay of the assignment pipeline
  Rng km_rng(seed);
  const auto mined =
      mine_contexts(std::span<const double>(zp_vals), n, cfg.dim, k, iters, km_rng);
  const auto a_star = transfer_assignments(mined.assignment, corr);
  std::vector<int64_t> usable;
  for (int64_t c = 0; c < k; ++c)
    if (!context_members(mined.assignment, c).empty() &&
        !context_members(a_star, c).empty())
      usable.push_back(c);
  REQUIRE(ctx.used == static_cast<int64_t>(usable.size()));
  REQUIRE(static_cast<int64_t>(ctx.teacher_rows.size()) == ctx.used * cfg.prototypes);

  // per-context recomputation, one CE at a time
  double mean_ce = 0.0;
  for (size_t u = 0; u < usable.size(); ++u) {
    const int64_t c = usable[u];
    auto pooled_t =
        attention_pool(tp, teacher, cfg, gather_context(zp, mined.assignment, c));
    auto t_logit = project_head(tp, teacher, cfg, HeadRole::Context, pooled_t);
    const auto tv = t_logit.value();
    for (int64_t j = 0; j < cfg.prototypes; ++j)
      REQUIRE(tv[static_cast<size_t>(j)] ==
              Catch::Approx(ctx.teacher_rows[u * static_cast<size_t>(cfg.prototypes) +
                                             static_cast<size_t>(j)])
                  .margin(1e-9));

    auto pooled_s = attention_pool(tp, student, cfg, gather_context(zs, a_star, c));
    auto s_logit = project_head(tp, student, cfg, HeadRole::Context, pooled_s);
    const auto probs = teacher_distributions(tv, 1, cfg.prototypes, center, tau_t);
    auto ce = cross_entropy_probs(probs, s_logit, tau_s);
    mean_ce += ce.scalar();
  }
  mean_ce /= static_cast<double>(usable.size());
  REQUIRE(ctx.loss.scalar() == Catch::Approx(mean_ce).epsilon(1e-9));
}

TEST_CASE("sample graphs decompose exactly and gate the side losses") {
  TrainConfig tc = tiny_train_config();
  const ModelConfig cfg = tc.model();
  auto pair = StudentTeacherPair<float>::init(cfg, tc.seed);
  const auto data = synth_images(1, cfg, 3);
  const auto grid = make_patch_grid(cfg.image_size, cfg.image_size, cfg.patch_size);
  Rng aug_rng(mix_seed(tc.seed, seed_tag::augment, 0, 0));
  const auto ap = make_augmented_pair(data[0], aug_rng, AffineRanges{},
                                      BlurJitterParams{}, grid);
  Rng mask_rng(mix_seed(tc.seed, seed_tag::mask, 0, 0));
  const auto mask = sample_mask(mask_rng, cfg.tokens(), 0.4);

  Tape<float> tp;
  auto student = bind_params(tp, pair.student.params, true);
  auto teacher = bind_params(tp, pair.teacher.params, false);
  auto g = build_sample_graph(tp, cfg, tc, student, teacher, pair.centers, ap, mask,
                              99);
  REQUIRE(g.total_value == g.patch + tc.lambda1 * g.context + tc.lambda2 * g.image);
  REQUIRE(oracle::rel_err(static_cast<double>(g.total.scalar()), g.total_value) < 1e-5);
  REQUIRE(g.mask_count == mask.count());
  REQUIRE(g.contexts_used >= 1);
  REQUIRE(g.entropy_rows == cfg.tokens());
  REQUIRE(g.entropy_sum > 0.0);
  REQUIRE(static_cast<int64_t>(g.teacher_patch_rows.size()) ==
          cfg.tokens() * cfg.prototypes);
  REQUIRE(static_cast<int64_t>(g.teacher_context_rows.size()) ==
          g.contexts_used * cfg.prototypes);
  REQUIRE(static_cast<int64_t>(g.teacher_image_row.size()) == cfg.prototypes);

  // with both weights zero the total IS the patch loss and the branches are
  // never built
  TrainConfig off = tc;
  off.lambda1 = 0.0;
  off.lambda2 = 0.0;
  Tape<float> tp2;
  auto student2 = bind_params(tp2, pair.student.params, true);
  auto teacher2 = bind_params(tp2, pair.teacher.params, false);
  auto g2 = build_sample_graph(tp2, cfg, off, student2, teacher2, pair.centers, ap,
                               mask, 99);
  REQUIRE(g2.context == 0.0);
  REQUIRE(g2.image == 0.0);
  REQUIRE(g2.contexts_used == 0);
  REQUIRE(g2.teacher_context_rows.empty());
  REQUIRE(g2.teacher_image_row.empty());
  REQUIRE(g2.total_value == g2.patch);
  REQUIRE(g2.total.scalar() == Catch::Approx(g2.patch));
  // the patch loss itself is identical with and without the side branches
  REQUIRE(g2.patch == g.patch);
}

TEST_CASE("sample graph losses respect the teacher entropy bound") {
  TrainConfig tc = tiny_train_config();
  tc.centering = false;
  tc.tau_teacher = tc.tau_student;  // equal temperatures
  const ModelConfig cfg = tc.model();
  auto pair = StudentTeacherPair<float>::init(cfg, 4);
  const auto data = synth_images(1, cfg, 8);
  const auto grid = make_patch_grid(cfg.image_size, cfg.image_size, cfg.patch_size);
  Rng aug_rng(mix_seed(tc.seed, seed_tag::augment, 1, 0));
  const auto ap = make_augmented_pair(data[0], aug_rng, AffineRanges{},
                                      BlurJitterParams{}, grid);
  Rng mask_rng(mix_seed(tc.seed, seed_tag::mask, 1, 0));
  const auto mask = sample_mask(mask_rng, cfg.tokens(), 0.3);

  Tape<float> tp;
  auto student = bind_params(tp, pair.student.params, true);
  auto teacher = bind_params(tp, pair.teacher.params, false);
  auto g = build_sample_graph(tp, cfg, tc, student, teacher, pair.centers, ap, mask,
                              17);

  const std::vector<float> no_center;
  const int64_t d = cfg.prototypes;

  std::vector<float> masked_rows;
  for (int64_t i = 0; i < cfg.tokens(); ++i)
    if (mask.m[static_cast<size_t>(i)])
      masked_rows.insert(masked_rows.end(), g.teacher_patch_rows.begin() + i * d,
                         g.teacher_patch_rows.begin() + (i + 1) * d);
  const int64_t mrows = g.mask_count;
  const auto p_patch = teacher_distributions(std::span<const float>(masked_rows),
                                             mrows, d, no_center, tc.tau_teacher);
  REQUIRE(g.patch + 1e-4 >= mean_row_entropy(p_patch, mrows, d));

  const auto p_ctx =
      teacher_distributions(std::span<const float>(g.teacher_context_rows),
                            g.contexts_used, d, no_center, tc.tau_teacher);
  REQUIRE(g.context + 1e-4 >= mean_row_entropy(p_ctx, g.contexts_used, d));

  const auto p_img = teacher_distributions(std::span<const float>(g.teacher_image_row),
                                           1, d, no_center, tc.tau_teacher);
  REQUIRE(g.image + 1e-4 >= mean_row_entropy(p_img, 1, d));
}

TEST_CASE("a train step matches an external single-sample recomputation") {
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 1;
  const ModelConfig m = cfg.model();
  const auto data = synth_images(3, m, 17);
  Trainer trainer(cfg, data);

  // replicate everything the step will do, on copies
  auto mirror = trainer.pair();
  Rng sample_rng(mix_seed(cfg.seed, seed_tag::sample));
  const auto idx = sample_rng.uniform_index(data.size());
  Rng aug_rng(mix_seed(cfg.seed, seed_tag::augment, 0, 0));
  const auto grid = make_patch_grid(m.image_size, m.image_size, m.patch_size);
  const auto ap = make_augmented_pair(data[idx], aug_rng, AffineRanges{},
                                      BlurJitterParams{}, grid);
  Rng mask_rng(mix_seed(cfg.seed, seed_tag::mask, 0, 0));
  const double ratio = mask_rng.uniform(cfg.mask_ratio_lo, cfg.mask_ratio_hi);
  const auto mask = sample_mask(mask_rng, m.tokens(), ratio);
  const uint64_t km_seed = mix_seed(cfg.seed, seed_tag::kmeans, 0, 0);

  Tape<float> tp;
  auto student = bind_params(tp, mirror.student.params, true);
  auto teacher = bind_params(tp, mirror.teacher.params, false);
  auto g = build_sample_graph(tp, m, cfg, student, teacher, mirror.centers, ap, mask,
                              km_seed);
  tp.backward(scale(g.total, 1.0));

  AdamWConfig ac;
  ac.lr = lr_at(cfg, 0);
  for (size_t i = 0; i < mirror.student.params.items.size(); ++i) {
    auto& p = mirror.student.params.items[i];
    const bool matrix = p.shape.size() == 2 && p.shape[0] > 1 && p.shape[1] > 1;
    ac.weight_decay = matrix ? cfg.weight_decay : 0.0;
    const auto grad = student.leaves[i].grad_or_zero();
    adamw_update(p, std::span<const float>(grad), ac, 1);
  }
  ema_update(mirror, momentum_at(cfg, 0));
  std::vector<std::vector<float>> patch_rows, ctx_rows, img_rows;
  const int64_t d = m.prototypes;
  for (int64_t r = 0; r < m.tokens(); ++r)
    patch_rows.emplace_back(g.teacher_patch_rows.begin() + r * d,
                            g.teacher_patch_rows.begin() + (r + 1) * d);
  for (int64_t r = 0; r < g.contexts_used; ++r)
    ctx_rows.emplace_back(g.teacher_context_rows.begin() + r * d,
                          g.teacher_context_rows.begin() + (r + 1) * d);
  img_rows.emplace_back(g.teacher_image_row.begin(), g.teacher_image_row.end());
  update_center(mirror.center(HeadRole::Patch), patch_rows, cfg.center_rate);
  update_center(mirror.center(HeadRole::Context), ctx_rows, cfg.center_rate);
  update_center(mirror.center(HeadRole::Image), img_rows, cfg.center_rate);

  const LossReport rep = trainer.train_step();

  REQUIRE(rep.step == 0);
  REQUIRE(rep.lr == lr_at(cfg, 0));
  REQUIRE(rep.momentum == momentum_at(cfg, 0));
  REQUIRE(rep.l_patch == g.patch);
  REQUIRE(rep.l_context == g.context);
  REQUIRE(rep.l_image == g.image);
  REQUIRE(rep.l_total ==
          rep.l_patch + cfg.lambda1 * rep.l_context + cfg.lambda2 * rep.l_image);
  REQUIRE(rep.mask_count == g.mask_count);
  REQUIRE(rep.contexts_used == static_cast<double>(g.contexts_used));
  REQUIRE(rep.teacher_entropy ==
          g.entropy_sum / static_cast<double>(g.entropy_rows));

  const auto& got = trainer.pair();
  for (size_t i = 0; i < mirror.student.params.items.size(); ++i) {
    REQUIRE(got.student.params.items[i].value == mirror.student.params.items[i].value);
    REQUIRE(got.teacher.params.items[i].value == mirror.teacher.params.items[i].value);
    REQUIRE(got.student.params.items[i].adam_m == mirror.student.params.items[i].adam_m);
    REQUIRE(got.student.params.items[i].adam_v == mirror.student.params.items[i].adam_v);
  }
  for (size_t r = 0; r < 3; ++r) REQUIRE(got.centers[r] == mirror.centers[r]);
  REQUIRE(trainer.step() == 1);
}

TEST_CASE("teacher leaves never enter the gradient table") {
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 1;
  const ModelConfig m = cfg.model();
  Trainer trainer(cfg, synth_images(2, m, 21));
  trainer.keep_last_tape(true);
  trainer.train_step();

  const Tape<float>* tape = trainer.last_tape();
  REQUIRE(tape != nullptr);
  REQUIRE_FALSE(trainer.last_teacher_leaves().empty());
  REQUIRE(trainer.last_teacher_leaves().size() == trainer.last_student_leaves().size());
  for (int32_t id : trainer.last_teacher_leaves()) {
    REQUIRE_FALSE(tape->node(id).needs_grad);
    REQUIRE(tape->node(id).grad.empty());
  }
  bool any_student_grad = false;
  for (int32_t id : trainer.last_student_leaves()) {
    REQUIRE(tape->node(id).needs_grad);
    any_student_grad = any_student_grad || !tape->node(id).grad.empty();
  }
  REQUIRE(any_student_grad);
}

TEST_CASE("training is deterministic per seed and diverges across seeds") {
  TrainConfig cfg = tiny_train_config();
  const ModelConfig m = cfg.model();
  const auto data = synth_images(4, m, 33);

  Trainer a(cfg, data), b(cfg, data);
  for (int s = 0; s < 2; ++s) {
    const LossReport ra = a.train_step();
    const LossReport rb = b.train_step();
    REQUIRE(ra.l_total == rb.l_total);
    REQUIRE(ra.l_patch == rb.l_patch);
    REQUIRE(ra.l_context == rb.l_context);
    REQUIRE(ra.l_image == rb.l_image);
    REQUIRE(ra.mask_count == rb.mask_count);
    REQUIRE(ra.teacher_entropy == rb.teacher_entropy);
    REQUIRE(ra.teacher_entropy > 0.0);
    REQUIRE(ra.teacher_entropy <=
            std::log(static_cast<double>(m.prototypes)) + 1e-9);
  }
  for (size_t i = 0; i < a.pair().student.params.items.size(); ++i)
    REQUIRE(a.pair().student.params.items[i].value ==
            b.pair().student.params.items[i].value);

  TrainConfig other = cfg;
  other.seed = 12;
  Trainer c(other, data);
  const LossReport rc = c.train_step();
  Trainer a2(cfg, data);
  REQUIRE(rc.l_total != a2.train_step().l_total);
}

TEST_CASE("ema keeps the teacher a convex trail of the student") {
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 2;
  cfg.momentum_start = 0.9;  // far from 1 so the blend moves visibly
  cfg.momentum_end = 0.999;
  const ModelConfig m = cfg.model();
  Trainer trainer(cfg, synth_images(2, m, 55));

  const auto before = trainer.pair().teacher;  // copy
  trainer.train_step();
  const double mom = momentum_at(cfg, 0);
  const auto& after_t = trainer.pair().teacher.params.items;
  const auto& after_s = trainer.pair().student.params.items;
  double worst = 0.0;
  for (size_t i = 0; i < after_t.size(); ++i) {
    for (size_t j = 0; j < after_t[i].value.size(); ++j) {
      const float expect = static_cast<float>(
          mom * static_cast<double>(before.params.items[i].value[j]) +
          (1.0 - mom) * static_cast<double>(after_s[i].value[j]));
      worst = std::max(worst, std::abs(static_cast<double>(expect) -
                                       static_cast<double>(after_t[i].value[j])));
    }
  }
  REQUIRE(worst <= 1e-12);
}

TEST_CASE("checkpoints restore a trainer bit-exactly and resume seamlessly") {
  TrainConfig cfg = tiny_train_config();
  const ModelConfig m = cfg.model();
  const auto data = synth_images(4, m, 71);

  // uninterrupted run of 6 steps
  Trainer a(cfg, data);
  std::vector<LossReport> a_reports;
  for (int s = 0; s < 6; ++s) a_reports.push_back(a.train_step());

  // interrupted at step 3, checkpointed, restored into a fresh trainer
  Trainer b(cfg, data);
  for (int s = 0; s < 3; ++s) b.train_step();
  const Checkpoint ckpt = b.to_checkpoint();
  REQUIRE(checkpoint_step(ckpt) == 3);

  Trainer c(cfg, data);
  c.restore(ckpt);
  REQUIRE(c.step() == 3);
  std::vector<LossReport> c_reports;
  for (int s = 0; s < 3; ++s) c_reports.push_back(c.train_step());

  for (int s = 0; s < 3; ++s) {
    REQUIRE(c_reports[s].step == a_reports[s + 3].step);
    REQUIRE(c_reports[s].l_total == a_reports[s + 3].l_total);
    REQUIRE(c_reports[s].l_patch == a_reports[s + 3].l_patch);
    REQUIRE(c_reports[s].mask_count == a_reports[s + 3].mask_count);
    REQUIRE(c_reports[s].lr == a_reports[s + 3].lr);
  }
  for (size_t i = 0; i < a.pair().student.params.items.size(); ++i) {
    REQUIRE(a.pair().student.params.items[i].value ==
            c.pair().student.params.items[i].value);
    REQUIRE(a.pair().teacher.params.items[i].value ==
            c.pair().teacher.params.items[i].value);
    REQUIRE(a.pair().student.params.items[i].adam_m ==
            c.pair().student.params.items[i].adam_m);
  }
  for (size_t r = 0; r < 3; ++r) REQUIRE(a.pair().centers[r] == c.pair().centers[r]);

  // an untouched trainer round-trips through its own checkpoint
  Trainer d(cfg, data);
  const Checkpoint fresh = d.to_checkpoint();
  Trainer e(cfg, data);
  e.restore(fresh);
  REQUIRE(e.step() == 0);
  for (size_t i = 0; i < d.pair().student.params.items.size(); ++i)
    REQUIRE(d.pair().student.params.items[i].value ==
            e.pair().student.params.items[i].value);
  const LossReport rd = d.train_step();
  const LossReport re = e.train_step();
  REQUIRE(rd.l_total == re.l_total);
}

TEST_CASE("numeric faults name the failing step and sample") {
  TrainConfig cfg = tiny_train_config();
  cfg.batch_size = 1;
  const ModelConfig m = cfg.model();
  Trainer trainer(cfg, synth_images(2, m, 91));
  trainer.pair().student.params.items[0].value[0] =
      std::numeric_limits<float>::quiet_NaN();
  expect_numeric([&] { trainer.train_step(); }, "step 0, sample");
}

TEST_CASE("trainers reject datasets that do not match the model") {
  TrainConfig cfg = tiny_train_config();
  const ModelConfig m = cfg.model();
  ModelConfig wrong = m;
  wrong.image_size = 32;
  try {
    Trainer t(cfg, synth_images(1, wrong, 5));
    FAIL("expected a data error");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Data);
  }
  REQUIRE_THROWS_AS(Trainer(cfg, {}), Error);
}

TEST_CASE("datasets load through manifests with strict dimension checks") {
  TempDir dir("trainer_data");
  const auto make_stream = [](uint16_t size) {
    EventStream s;
    s.width = size;
    s.height = size;
    for (uint64_t t = 0; t < 40; ++t) {
      Event e;
      e.t = t * 100;
      e.x = static_cast<uint16_t>((3 * t) % size);
      e.y = static_cast<uint16_t>((5 * t) % size);
      e.polarity = (t % 2 == 0) ? 1 : -1;
      s.events.push_back(e);
    }
    sort_events(s.events);
    return s;
  };
  write_events(dir.str() + "/a.evs", make_stream(16));
  write_events(dir.str() + "/b.evs", make_stream(32));

  DatasetManifest man;
  man.generator = "test";
  man.seed = 1;
  for (const char* name : {"a.evs", "b.evs"}) {
    SampleRecord rec;
    rec.event_file = name;
    rec.width = (name[0] == 'a') ? 16 : 32;
    rec.height = rec.width;
    rec.duration_us = 4000;
    rec.num_events = 40;
    rec.source = "test";
    man.samples.push_back(rec);
  }
  save_manifest(dir.str() + "/manifest.json", man);
  try {
    load_dataset(dir.str() + "/manifest.json", 2);
    FAIL("expected a data error about mixed dimensions");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Data);
    REQUIRE(std::string(e.what()).find("mixed dimensions") != std::string::npos);
  }

  man.samples.pop_back();
  save_manifest(dir.str() + "/manifest.json", man);
  const LoadedDataset ds = load_dataset(dir.str() + "/manifest.json", 2);
  REQUIRE(ds.images.size() == 1);
  REQUIRE(ds.width == 16);
  REQUIRE(ds.images[0].channels == 2);
  REQUIRE(ds.sample_ids[0] == "a.evs");
  REQUIRE(ds.label_files[0].empty());
}

TEST_CASE("full runs write metrics and resume to the uninterrupted result") {
  TempDir dir("trainer_run");

  PackConfig pack;
  pack.kind = "moving_shapes";
  pack.count = 3;
  pack.scene.width = 32;
  pack.scene.height = 32;
  pack.scene.num_frames = 5;
  pack.scene.duration_us = 50000;
  pack.seed = 21;
  const std::string data_dir = dir.str() + "/data";
  pack_dataset(pack, data_dir);

  TrainConfig base;
  base.manifest = data_dir + "/manifest.json";
  base.image_size = 32;
  base.patch_size = 8;
  base.voxel_bins = 2;
  base.dim = 16;
  base.layers = 1;
  base.heads = 2;
  base.mlp_ratio = 2;
  base.head_hidden = 16;
  base.bottleneck = 8;
  base.prototypes = 12;
  base.contexts = 3;
  base.kmeans_iters = 4;
  base.warmup_steps = 1;
  base.steps = 4;
  base.batch_size = 2;
  base.checkpoint_every = 2;
  base.seed = 13;
  base.lr = 5e-3;

  TrainConfig run_a = base;
  run_a.out_dir = dir.str() + "/a";
  const TrainRunResult res_a = run_training(run_a);
  REQUIRE(res_a.steps_run == 4);
  REQUIRE(std::isfinite(res_a.initial_total));
  REQUIRE(std::isfinite(res_a.final_total));
  REQUIRE(std::filesystem::exists(run_a.out_dir + "/checkpoint_000002.eckp"));
  REQUIRE(std::filesystem::exists(res_a.checkpoint_path));

  // resolved config echoes back and re-parses to the same values
  TrainConfig echoed;
  auto schema = echoed.schema();
  apply_config_file(schema, run_a.out_dir + "/resolved.toml");
  REQUIRE(echoed.steps == base.steps);
  REQUIRE(echoed.lr == base.lr);
  REQUIRE(echoed.prototypes == base.prototypes);

  // treat run a's periodic checkpoint as an interruption point: resuming from
  // it under the same config must land on run a's final state
  TrainConfig run_b = base;
  run_b.out_dir = dir.str() + "/b";
  run_b.resume = run_a.out_dir + "/checkpoint_000002.eckp";
  const TrainRunResult res_b = run_training(run_b);
  REQUIRE(res_b.steps_run == 2);

  const Checkpoint fin_a = load_checkpoint(res_a.checkpoint_path);
  const Checkpoint fin_b = load_checkpoint(res_b.checkpoint_path);
  REQUIRE(checkpoint_step(fin_a) == 4);
  REQUIRE(checkpoint_step(fin_b) == 4);
  REQUIRE(fin_a.tensors == fin_b.tensors);
  REQUIRE(fin_a.rng_state == fin_b.rng_state);

  // metrics: header plus one row per step, in both directories
  const auto count_lines = [](const std::string& path) {
    std::ifstream in(path);
    std::string line;
    int64_t rows = 0;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    return rows;
  };
  REQUIRE(count_lines(res_a.metrics_path) == 5);
  REQUIRE(count_lines(res_b.metrics_path) == 3);  // header + steps 2 and 3
  std::ifstream in(res_a.metrics_path);
  std::string header;
  std::getline(in, header);
  REQUIRE(header ==
          "step,l_patch,l_context,l_image,l_total,mask_count,contexts_used,"
          "teacher_entropy,lr,momentum");

  // zero steps leaves the initial parameters in the final checkpoint
  TrainConfig run_z = base;
  run_z.out_dir = dir.str() + "/z";
  run_z.steps = 0;
  run_z.warmup_steps = 0;
  const TrainRunResult res_z = run_training(run_z);
  REQUIRE(res_z.steps_run == 0);
  const Checkpoint fin_z = load_checkpoint(res_z.checkpoint_path);
  REQUIRE(checkpoint_step(fin_z) == 0);
  const auto fresh = StudentTeacherPair<float>::init(base.model(), base.seed);
  for (const auto& p : fresh.student.params.items)
    REQUIRE(tensor_values<float>(fin_z.at("student." + p.name)) == p.value);
}
