#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "evssl/common.hpp"
#include "evssl/config.hpp"
#include "evssl/context.hpp"
#include "evssl/event.hpp"
#include "evssl/model.hpp"
#include "evssl/probe.hpp"
#include "evssl/serialize.hpp"
#include "evssl/simulate.hpp"

// Event-stream and context-map visualization: one polarity-colored PNG per
// sample plus a patch-grid PNG of the contexts the teacher's features mine.

namespace evssl {

struct RenderRunResult {
  std::vector<std::string> event_images;
  std::vector<std::string> context_maps;
};

inline RenderRunResult run_render(const RenderConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  require(!cfg.manifest.empty(), ErrorKind::Usage, "render: no manifest path");
  require(!cfg.checkpoint.empty(), ErrorKind::Usage, "render: no checkpoint path");

  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  TrainConfig tc;
  {
    ConfigSchema schema = tc.schema();
    apply_config_text(schema, ckpt.config_json, cfg.checkpoint);
  }
  const ModelConfig mcfg = tc.model();
  mcfg.validate();
  require(cfg.contexts <= mcfg.tokens(), ErrorKind::Usage,
          cat("render: ", cfg.contexts, " contexts exceed the ", mcfg.tokens(),
              " patches per image"));
  Network<float> net = Network<float>::init(mcfg, 0);
  read_params(ckpt, "teacher.", net.params);

  const DatasetManifest man = load_manifest(cfg.manifest);
  require(!man.samples.empty(), ErrorKind::Data,
          cat("render: dataset '", cfg.manifest, "' has no samples"));
  const int64_t n =
      std::min<int64_t>(cfg.count, static_cast<int64_t>(man.samples.size()));
  fs::create_directories(cfg.out_dir);

  RenderRunResult res;
  const int64_t grid = mcfg.grid();
  for (int64_t i = 0; i < n; ++i) {
    const SampleRecord& s = man.samples[static_cast<size_t>(i)];
    require(s.width == mcfg.image_size && s.height == mcfg.image_size,
            ErrorKind::Data,
            cat("render: sample '", s.event_file, "' is ", s.width, "x", s.height,
                ", checkpoint wants ", mcfg.image_size, "x", mcfg.image_size));
    const EventStream stream =
        read_events((fs::path(man.root) / s.event_file).string());
    const std::string stem = fs::path(s.event_file).stem().string();

    const std::string ev_path =
        (fs::path(cfg.out_dir) / cat(stem, "_events.png")).string();
    write_png_rgb(ev_path, render_rgb(stream));
    res.event_images.push_back(ev_path);

    const EventImage img = to_event_image(voxelize(stream, tc.voxel_bins));
    const FeatureSet feats = extract_features(net, mcfg, {img}, {s.event_file});
    Rng rng(mix_seed(cfg.seed, seed_tag::kmeans, static_cast<uint64_t>(i)));
    const KmeansResult km =
        mine_contexts(std::span<const float>(feats.values), mcfg.tokens(), mcfg.dim,
                      cfg.contexts, cfg.kmeans_iters, rng);
    const std::string cm_path =
        (fs::path(cfg.out_dir) / cat(stem, "_contexts.png")).string();
    save_context_map(cm_path, km.assignment, grid, grid, mcfg.patch_size);
    res.context_maps.push_back(cm_path);
  }
  return res;
}

}  // namespace evssl
