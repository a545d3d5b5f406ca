#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "evssl/augment.hpp"
#include "evssl/common.hpp"
#include "evssl/event.hpp"
#include "evssl/tensor.hpp"

namespace evssl {

struct ModelConfig {
  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t channels = 5;
  int64_t dim = 64;
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t head_hidden = 128;
  int64_t bottleneck = 64;
  int64_t prototypes = 256;

  int64_t grid() const { return image_size / patch_size; }
  int64_t tokens() const { return grid() * grid(); }
  int64_t patch_dim() const { return patch_size * patch_size * channels; }
  int64_t mlp_hidden() const { return dim * mlp_ratio; }

  void validate() const {
    require(image_size >= 1 && patch_size >= 1 && channels >= 1 && dim >= 1 &&
                layers >= 1 && heads >= 1 && mlp_ratio >= 1 && head_hidden >= 1 &&
                bottleneck >= 1 && prototypes >= 2,
            ErrorKind::Usage, "model config: all dimensions must be positive");
    require(image_size % patch_size == 0, ErrorKind::Usage,
            cat("model config: patch size ", patch_size, " must divide image size ",
                image_size));
    require(dim % heads == 0, ErrorKind::Usage,
            cat("model config: ", heads, " heads must divide width ", dim));
  }
};

enum class HeadRole { Patch = 0, Image = 1, Context = 2 };

inline const char* head_role_name(HeadRole r) {
  switch (r) {
    case HeadRole::Patch: return "patch";
    case HeadRole::Image: return "image";
    case HeadRole::Context: return "context";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Parameter store: insertion-ordered named tensors. The order is the binding,
// EMA, optimizer, and checkpoint order, so it must be identical between
// student and teacher.
// ---------------------------------------------------------------------------

template <typename S>
struct ParamStore {
  std::vector<ParamTensor<S>> items;
  std::unordered_map<std::string, size_t> index;

  ParamTensor<S>& add(std::string name, Shape shape, std::vector<S> value) {
    require(index.find(name) == index.end(), ErrorKind::Usage,
            cat("param store: duplicate parameter '", name, "'"));
    require(shape_numel(shape) == static_cast<int64_t>(value.size()),
            ErrorKind::Usage, cat("param store: bad init size for '", name, "'"));
    index.emplace(name, items.size());
    ParamTensor<S> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value = std::move(value);
    items.push_back(std::move(p));
    return items.back();
  }

  size_t find(const std::string& name) const {
    const auto it = index.find(name);
    require(it != index.end(), ErrorKind::Usage,
            cat("param store: unknown parameter '", name, "'"));
    return it->second;
  }

  ParamTensor<S>& at(const std::string& name) { return items[find(name)]; }
  const ParamTensor<S>& at(const std::string& name) const { return items[find(name)]; }

  int64_t total_numel() const {
    int64_t n = 0;
    for (const auto& p : items) n += p.numel();
    return n;
  }
};

// Per-tape leaves for every parameter, in store order.
template <typename S>
struct BoundParams {
  const ParamStore<S>* store = nullptr;
  std::vector<Tensor<S>> leaves;

  Tensor<S> operator[](const std::string& name) const {
    return leaves[store->find(name)];
  }
};

template <typename S>
BoundParams<S> bind_params(Tape<S>& tp, const ParamStore<S>& store,
                           bool requires_grad) {
  BoundParams<S> b;
  b.store = &store;
  b.leaves.reserve(store.items.size());
  for (const auto& p : store.items) {
    b.leaves.push_back(tp.leaf(p.shape, std::span<const S>(p.value), requires_grad,
                               p.name.c_str()));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Network: backbone + three projection heads + attention pool, one flat
// parameter store.
// ---------------------------------------------------------------------------

template <typename S>
struct Network {
  ModelConfig cfg;
  ParamStore<S> params;

  static Network init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Network net;
    net.cfg = cfg;
    Rng rng(mix_seed(seed, seed_tag::init));

    const auto trunc_normal = [&rng](Shape shape) {
      std::vector<S> v(static_cast<size_t>(shape_numel(shape)));
      for (S& x : v) x = static_cast<S>(rng.truncated_normal(0.0, 0.02));
      return v;
    };
    const auto constant = [](Shape shape, S value) {
      return std::vector<S>(static_cast<size_t>(shape_numel(shape)), value);
    };
    auto& ps = net.params;
    const int64_t d = cfg.dim, pd = cfg.patch_dim(), n = cfg.tokens();

    ps.add("backbone.patch_embed.w", {pd, d}, trunc_normal({pd, d}));
    ps.add("backbone.patch_embed.b", {1, d}, constant({1, d}, S(0)));
    ps.add("backbone.mask_token", {1, d}, trunc_normal({1, d}));
    ps.add("backbone.pos", {n, d}, trunc_normal({n, d}));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      const std::string b = cat("backbone.block", l, ".");
      ps.add(b + "ln1.g", {1, d}, constant({1, d}, S(1)));
      ps.add(b + "ln1.b", {1, d}, constant({1, d}, S(0)));
      for (const char* w : {"wq", "wk", "wv", "wo"})
        ps.add(b + "attn." + w, {d, d}, trunc_normal({d, d}));
      for (const char* bias : {"bq", "bk", "bv", "bo"})
        ps.add(b + "attn." + bias, {1, d}, constant({1, d}, S(0)));
      ps.add(b + "ln2.g", {1, d}, constant({1, d}, S(1)));
      ps.add(b + "ln2.b", {1, d}, constant({1, d}, S(0)));
      const int64_t h = cfg.mlp_hidden();
      ps.add(b + "mlp.w1", {d, h}, trunc_normal({d, h}));
      ps.add(b + "mlp.b1", {1, h}, constant({1, h}, S(0)));
      ps.add(b + "mlp.w2", {h, d}, trunc_normal({h, d}));
      ps.add(b + "mlp.b2", {1, d}, constant({1, d}, S(0)));
    }
    ps.add("backbone.norm.g", {1, d}, constant({1, d}, S(1)));
    ps.add("backbone.norm.b", {1, d}, constant({1, d}, S(0)));

    ps.add("pool.query", {1, d}, trunc_normal({1, d}));
    for (const char* w : {"wk", "wv", "wo"})
      ps.add(std::string("pool.") + w, {d, d}, trunc_normal({d, d}));
    for (const char* b : {"bk", "bv", "bo"})
      ps.add(std::string("pool.") + b, {1, d}, constant({1, d}, S(0)));

    for (HeadRole role : {HeadRole::Patch, HeadRole::Image, HeadRole::Context}) {
      const std::string h = cat("head.", head_role_name(role), ".");
      const int64_t hh = cfg.head_hidden, bo = cfg.bottleneck, pr = cfg.prototypes;
      ps.add(h + "w1", {d, hh}, trunc_normal({d, hh}));
      ps.add(h + "b1", {1, hh}, constant({1, hh}, S(0)));
      ps.add(h + "w2", {hh, hh}, trunc_normal({hh, hh}));
      ps.add(h + "b2", {1, hh}, constant({1, hh}, S(0)));
      ps.add(h + "w3", {hh, bo}, trunc_normal({hh, bo}));
      ps.add(h + "b3", {1, bo}, constant({1, bo}, S(0)));
      ps.add(h + "proto", {pr, bo}, trunc_normal({pr, bo}));
    }
    return net;
  }
};

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

// Row i of the patch tensor holds patch i's pixels, channel-major then row
// then column within the patch. Patches tile the image in row-major order.
template <typename S>
std::vector<S> patchify(const EventImage& img, int64_t patch) {
  const PatchGrid g = make_patch_grid(img.height, img.width, patch);
  const int64_t row_len = patch * patch * img.channels;
  std::vector<S> out(static_cast<size_t>(g.count() * row_len));
  for (int64_t i = 0; i < g.count(); ++i) {
    S* row = out.data() + i * row_len;
    const int64_t y0 = g.row_of(i) * patch, x0 = g.col_of(i) * patch;
    int64_t k = 0;
    for (int64_t c = 0; c < img.channels; ++c)
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px)
          row[k++] = static_cast<S>(img.at(c, y0 + py, x0 + px));
  }
  return out;
}

// Backbone forward: patch tensor [N, P²·C] -> patch features [N, D]. Masked
// rows are replaced by the [MASK] embedding after the patch projection and
// before the positional embeddings are added.
template <typename S>
Tensor<S> encode(Tape<S>& tp, const BoundParams<S>& p, const ModelConfig& cfg,
                 Tensor<S> patches, const MaskVector* mask = nullptr) {
  const Shape in = tp.node(patches.id()).shape;
  require(in.size() == 2 && in[0] == cfg.tokens() && in[1] == cfg.patch_dim(),
          ErrorKind::Usage,
          cat("encode: expected [", cfg.tokens(), "x", cfg.patch_dim(), "] patches, got ",
              shape_str(in)));
  if (mask) {
    require(static_cast<int64_t>(mask->m.size()) == cfg.tokens(), ErrorKind::Usage,
            cat("encode: mask length ", mask->m.size(), " != ", cfg.tokens(),
                " patches"));
  }

  Tensor<S> tok =
      add(matmul(patches, p["backbone.patch_embed.w"]), p["backbone.patch_embed.b"]);
  if (mask) tok = replace_rows(tok, p["backbone.mask_token"], mask->m);
  tok = add(tok, p["backbone.pos"]);

  const int64_t dh = cfg.dim / cfg.heads;
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string b = cat("backbone.block", l, ".");
    Tensor<S> pre = layernorm(tok, p[b + "ln1.g"], p[b + "ln1.b"]);
    Tensor<S> q = add(matmul(pre, p[b + "attn.wq"]), p[b + "attn.bq"]);
    Tensor<S> k = add(matmul(pre, p[b + "attn.wk"]), p[b + "attn.bk"]);
    Tensor<S> v = add(matmul(pre, p[b + "attn.wv"]), p[b + "attn.bv"]);
    std::vector<Tensor<S>> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int64_t h = 0; h < cfg.heads; ++h) {
      Tensor<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
      Tensor<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
      Tensor<S> attn =
          softmax(matmul(qh, kh, false, true), 1, std::sqrt(static_cast<double>(dh)));
      heads.push_back(matmul(attn, vh));
    }
    Tensor<S> mixed = concat(1, heads);
    tok = add(tok, add(matmul(mixed, p[b + "attn.wo"]), p[b + "attn.bo"]));
    Tensor<S> pre2 = layernorm(tok, p[b + "ln2.g"], p[b + "ln2.b"]);
    Tensor<S> hidden = gelu(add(matmul(pre2, p[b + "mlp.w1"]), p[b + "mlp.b1"]));
    tok = add(tok, add(matmul(hidden, p[b + "mlp.w2"]), p[b + "mlp.b2"]));
  }
  return layernorm(tok, p["backbone.norm.g"], p["backbone.norm.b"]);
}

// Projection head: features [M, D] -> prototype logits [M, d]. Three GELU MLP
// layers to a bottleneck, L2-normalized, then cosine scores against
// L2-normalized prototype vectors.
template <typename S>
Tensor<S> project_head(Tape<S>& tp, const BoundParams<S>& p, const ModelConfig& cfg,
                       HeadRole role, Tensor<S> feats) {
  (void)tp;
  const std::string h = cat("head.", head_role_name(role), ".");
  Tensor<S> x = gelu(add(matmul(feats, p[h + "w1"]), p[h + "b1"]));
  x = gelu(add(matmul(x, p[h + "w2"]), p[h + "b2"]));
  x = add(matmul(x, p[h + "w3"]), p[h + "b3"]);
  x = l2_normalize_rows(x);
  Tensor<S> protos = l2_normalize_rows(p[h + "proto"]);
  Tensor<S> logits = matmul(x, protos, false, true);
  (void)cfg;
  return logits;
}

// Attention pooling of a feature set [M, D] -> [1, D]: softmax(K·q/√D)
// weights over the set, weighted value sum, output projection. No positional
// information, so the result is permutation invariant.
template <typename S>
Tensor<S> attention_pool(Tape<S>& tp, const BoundParams<S>& p, const ModelConfig& cfg,
                         Tensor<S> feats) {
  const Shape in = tp.node(feats.id()).shape;
  require(in.size() == 2 && in[1] == cfg.dim, ErrorKind::Usage,
          cat("attention_pool: expected [*x", cfg.dim, "] features, got ",
              shape_str(in)));
  require(in[0] >= 1, ErrorKind::Usage, "attention_pool: empty feature set");
  Tensor<S> k = add(matmul(feats, p["pool.wk"]), p["pool.bk"]);
  Tensor<S> v = add(matmul(feats, p["pool.wv"]), p["pool.bv"]);
  Tensor<S> scores = matmul(k, p["pool.query"], false, true);  // [M, 1]
  Tensor<S> attn = softmax(scores, 0, std::sqrt(static_cast<double>(cfg.dim)));
  Tensor<S> pooled = matmul(attn, v, true, false);  // [1, D]
  return add(matmul(pooled, p["pool.wo"]), p["pool.bo"]);
}

// ---------------------------------------------------------------------------
// Student-teacher pairing.
// ---------------------------------------------------------------------------

template <typename S>
struct StudentTeacherPair {
  Network<S> student;
  Network<S> teacher;
  // centering state per head role, length = prototypes
  std::array<std::vector<S>, 3> centers;

  static StudentTeacherPair init(const ModelConfig& cfg, uint64_t seed) {
    StudentTeacherPair pair;
    pair.student = Network<S>::init(cfg, seed);
    pair.teacher = pair.student;  // teacher starts as an exact copy
    for (auto& c : pair.centers)
      c.assign(static_cast<size_t>(cfg.prototypes), S(0));
    return pair;
  }

  std::vector<S>& center(HeadRole role) { return centers[static_cast<size_t>(role)]; }
  const std::vector<S>& center(HeadRole role) const {
    return centers[static_cast<size_t>(role)];
  }
};

// theta_t <- m * theta_t + (1 - m) * theta_s, elementwise over every tensor.
// The endpoints short-circuit so that m=1 and m=0 are bit-exact.
template <typename S>
void ema_update(StudentTeacherPair<S>& pair, double m) {
  require(std::isfinite(m) && m >= 0.0 && m <= 1.0, ErrorKind::Usage,
          cat("ema_update: momentum must be in [0, 1], got ", m));
  auto& ts = pair.teacher.params.items;
  const auto& ss = pair.student.params.items;
  require(ts.size() == ss.size(), ErrorKind::Usage,
          "ema_update: student and teacher parameter lists differ");
  if (m == 1.0) return;
  for (size_t i = 0; i < ts.size(); ++i) {
    require(ts[i].name == ss[i].name && ts[i].shape == ss[i].shape, ErrorKind::Usage,
            cat("ema_update: parameter mismatch at '", ts[i].name, "'"));
    if (m == 0.0) {
      ts[i].value = ss[i].value;
      continue;
    }
    for (size_t j = 0; j < ts[i].value.size(); ++j) {
      ts[i].value[j] = static_cast<S>(m * static_cast<double>(ts[i].value[j]) +
                                      (1.0 - m) * static_cast<double>(ss[i].value[j]));
    }
  }
}

// center <- rate * center + (1 - rate) * mean of the batch logit rows.
template <typename S>
void update_center(std::vector<S>& center, const std::vector<std::vector<S>>& rows,
                   double rate) {
  require(std::isfinite(rate) && rate >= 0.0 && rate <= 1.0, ErrorKind::Usage,
          cat("update_center: rate must be in [0, 1], got ", rate));
  if (rate == 1.0) return;
  require(!rows.empty(), ErrorKind::Usage, "update_center: empty logit batch");
  const size_t d = center.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& r : rows) {
    require(r.size() == d, ErrorKind::Usage,
            cat("update_center: logit width ", r.size(), " != center width ", d));
    for (size_t j = 0; j < d; ++j) mean[j] += static_cast<double>(r[j]);
  }
  for (size_t j = 0; j < d; ++j) {
    mean[j] /= static_cast<double>(rows.size());
    center[j] = static_cast<S>(rate * static_cast<double>(center[j]) +
                               (1.0 - rate) * mean[j]);
  }
}

// Teacher output distributions: rows of softmax((logits - center) / tau_t),
// computed in double. Pass an empty center to disable centering.
template <typename S>
std::vector<double> teacher_distributions(std::span<const S> logits, int64_t rows,
                                          int64_t d, const std::vector<S>& center,
                                          double tau_t) {
  require(static_cast<int64_t>(logits.size()) == rows * d, ErrorKind::Usage,
          "teacher_distributions: logits size mismatch");
  require(center.empty() || static_cast<int64_t>(center.size()) == d,
          ErrorKind::Usage, "teacher_distributions: center width mismatch");
  require(std::isfinite(tau_t) && tau_t > 0.0, ErrorKind::Usage,
          "teacher_distributions: temperature must be positive");
  std::vector<double> out(static_cast<size_t>(rows * d));
  for (int64_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < d; ++j) {
      const double c = center.empty() ? 0.0 : static_cast<double>(center[static_cast<size_t>(j)]);
      const double u = (static_cast<double>(logits[static_cast<size_t>(r * d + j)]) - c) / tau_t;
      out[static_cast<size_t>(r * d + j)] = u;
      mx = std::max(mx, u);
    }
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double& u = out[static_cast<size_t>(r * d + j)];
      u = std::exp(u - mx);
      sum += u;
    }
    require(sum > 0.0 && std::isfinite(sum), ErrorKind::Numeric,
            "teacher_distributions: degenerate softmax row");
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] /= sum;
  }
  return out;
}

template <typename S>
std::vector<double> teacher_distributions(const std::vector<S>& logits, int64_t rows,
                                          int64_t d, const std::vector<S>& center,
                                          double tau_t) {
  return teacher_distributions(std::span<const S>(logits), rows, d, center, tau_t);
}

}  // namespace evssl
