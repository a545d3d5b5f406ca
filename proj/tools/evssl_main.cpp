#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evssl/ablation.hpp"
#include "evssl/config.hpp"
#include "evssl/probe.hpp"
#include "evssl/render.hpp"
#include "evssl/serialize.hpp"
#include "evssl/simulate.hpp"
#include "evssl/trainer.hpp"

namespace {

using namespace evssl;

// Flags shared by every run-producing subcommand. Dedicated flags win over
// --set pairs, which win over the config file, which wins over defaults.
struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  std::string out;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "TOML config file");
  cmd->add_option("--set", a.sets, "override as section.key=value (repeatable)");
  a.seed_opt = cmd->add_option("--seed", a.seed, "override the run seed");
  a.out_opt = cmd->add_option("--out", a.out, "override the output directory");
}

void resolve(ConfigSchema& schema, const CommonArgs& a, const char* seed_key,
             const char* out_key) {
  if (!a.config.empty()) {
    require(std::filesystem::exists(a.config), ErrorKind::Usage,
            cat("config file '", a.config, "' does not exist"));
    apply_config_file(schema, a.config);
  }
  for (const std::string& kv : a.sets) apply_override(schema, kv);
  if (a.seed_opt->count() > 0) {
    const std::string v = cat(a.seed);
    schema.set(seed_key, v);
  }
  if (a.out_opt->count() > 0) schema.set(out_key, a.out);
}

// Resolved config plus version line, echoed to stdout and (for subcommands
// that do not write their own) into the output directory.
std::string emit_header(const ConfigSchema& schema, const std::string& out_dir,
                        bool write_file) {
  const std::string header = cat("# ", kToolVersion, "\n", render_config(schema));
  std::fputs(header.c_str(), stdout);
  std::fputs("\n", stdout);
  if (write_file) {
    std::filesystem::create_directories(out_dir);
    write_file_text(out_dir + "/resolved.toml", header);
  }
  return header;
}

int cmd_simulate(const CommonArgs& args) {
  SimulateConfig cfg;
  ConfigSchema schema = cfg.schema();
  resolve(schema, args, "run.seed", "data.out_dir");
  cfg.validate();
  emit_header(schema, cfg.out_dir, true);

  PackConfig pack;
  pack.kind = cfg.kind;
  pack.image_dir = cfg.image_dir;
  pack.pattern = cfg.pattern;
  pack.count = cfg.count;
  pack.scene.width = cfg.width;
  pack.scene.height = cfg.height;
  pack.scene.num_frames = cfg.frames;
  pack.scene.duration_us = static_cast<uint64_t>(cfg.duration_us);
  pack.amplitude_px = cfg.amplitude_px;
  pack.sim.contrast_threshold = cfg.contrast_threshold;
  pack.sim.noise_rate_hz = cfg.noise_rate_hz;
  pack.sim.refractory_us = static_cast<uint64_t>(cfg.refractory_us);
  pack.seed = cfg.seed;

  const DatasetManifest man = pack_dataset(pack, cfg.out_dir);
  std::printf("wrote %zu samples under '%s'\n", man.samples.size(),
              cfg.out_dir.c_str());
  return 0;
}

int cmd_pretrain(const CommonArgs& args, const CLI::Option* threads_opt,
                 int64_t threads) {
  TrainConfig cfg;
  ConfigSchema schema = cfg.schema();
  resolve(schema, args, "run.seed", "data.out_dir");
  if (threads_opt->count() > 0) {
    const std::string v = cat(threads);
    schema.set("run.threads", v);
  }
  cfg.validate();
  emit_header(schema, cfg.out_dir, false);  // run_training writes its own copy

  const TrainRunResult res = run_training(cfg);
  std::printf("ran %lld steps: l_total %.6f -> %.6f\n",
              static_cast<long long>(res.steps_run), res.initial_total,
              res.final_total);
  std::printf("checkpoint: %s\nmetrics: %s\n", res.checkpoint_path.c_str(),
              res.metrics_path.c_str());
  return 0;
}

int cmd_probe(const CommonArgs& args) {
  ProbeConfig cfg;
  ConfigSchema schema = cfg.schema();
  resolve(schema, args, "probe.seed", "probe.out_dir");
  cfg.validate();
  emit_header(schema, cfg.out_dir, true);

  const ProbeRunResult res = run_probe(cfg);
  std::printf("backbone: %s\n", res.report.backbone_id.c_str());
  std::printf("probe fit: train accuracy %.4f, loss %.6f\n", res.train_accuracy,
              res.final_loss);
  std::printf("held-out miou %.4f, pixel accuracy %.4f\n", res.report.miou,
              res.report.pixel_accuracy);
  std::printf("report: %s\n", res.report_path.c_str());
  return 0;
}

int cmd_render(const CommonArgs& args) {
  RenderConfig cfg;
  ConfigSchema schema = cfg.schema();
  resolve(schema, args, "run.seed", "data.out_dir");
  cfg.validate();
  emit_header(schema, cfg.out_dir, true);

  const RenderRunResult res = run_render(cfg);
  std::printf("rendered %zu event images and %zu context maps into '%s'\n",
              res.event_images.size(), res.context_maps.size(),
              cfg.out_dir.c_str());
  return 0;
}

int cmd_ablate(const CommonArgs& args, const CLI::Option* threads_opt,
               int64_t threads) {
  AblationConfig cfg;
  ConfigSchema schema = cfg.schema();
  resolve(schema, args, "run.seed", "ablate.out_dir");
  if (threads_opt->count() > 0) {
    const std::string v = cat(threads);
    schema.set("run.threads", v);
  }
  cfg.validate();
  emit_header(schema, cfg.out_dir, true);

  const AblationResult res = run_ablation(cfg);
  std::fputs(res.table.c_str(), stdout);
  std::printf("table: %s\n", res.table_path.c_str());
  return 0;
}

int cmd_inspect(const std::string& path) {
  namespace fs = std::filesystem;
  require(fs::exists(path), ErrorKind::Usage, cat("'", path, "' does not exist"));

  if (fs::path(path).extension() == ".json") {
    const DatasetManifest man = load_manifest(path);
    std::printf("manifest: %s\n", path.c_str());
    std::printf("generator: %s\n", man.generator.c_str());
    std::printf("seed: %llu\n", static_cast<unsigned long long>(man.seed));
    std::printf("samples: %zu\n", man.samples.size());
    size_t labeled = 0;
    uint64_t events = 0;
    for (const auto& s : man.samples) {
      labeled += !s.label_file.empty();
      events += s.num_events;
    }
    std::printf("labeled: %zu\n", labeled);
    std::printf("events: %llu\n", static_cast<unsigned long long>(events));
    if (!man.samples.empty())
      std::printf("resolution: %lldx%lld\n",
                  static_cast<long long>(man.samples[0].width),
                  static_cast<long long>(man.samples[0].height));
    return 0;
  }

  const Checkpoint ckpt = load_checkpoint(path);
  std::printf("checkpoint: %s\n", path.c_str());
  if (ckpt.find(kStepTensorName) != nullptr)
    std::printf("step: %llu\n",
                static_cast<unsigned long long>(checkpoint_step(ckpt)));
  int64_t values = 0;
  for (const auto& t : ckpt.tensors) values += t.numel();
  std::printf("tensors: %zu\n", ckpt.tensors.size());
  std::printf("values: %lld\n", static_cast<long long>(values));
  std::printf("rng state: %zu bytes\n", ckpt.rng_state.size());
  if (!ckpt.config_json.empty()) {
    std::printf("config:\n");
    std::string line;
    for (const char c : ckpt.config_json) {
      if (c == '\n') {
        std::printf("  %s\n", line.c_str());
        line.clear();
      } else {
        line.push_back(c);
      }
    }
    if (!line.empty()) std::printf("  %s\n", line.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"event-camera self-supervised pre-training toolkit"};
  app.require_subcommand(1);

  CommonArgs sim_args, pre_args, probe_args, render_args, ablate_args;
  int64_t pre_threads = 1, ablate_threads = 1;
  std::string inspect_path;

  CLI::App* sim = app.add_subcommand("simulate", "generate a synthetic event dataset");
  add_common(sim, sim_args);

  CLI::App* pre = app.add_subcommand("pretrain", "run self-distillation pre-training");
  add_common(pre, pre_args);
  CLI::Option* pre_threads_opt =
      pre->add_option("--threads", pre_threads, "worker thread cap");

  CLI::App* prb = app.add_subcommand("probe", "linear-probe a frozen checkpoint");
  add_common(prb, probe_args);

  CLI::App* ren =
      app.add_subcommand("render", "write event-image and context-map PNGs");
  add_common(ren, render_args);

  CLI::App* abl = app.add_subcommand(
      "ablate", "compare pre-training with and without the context loss");
  add_common(abl, ablate_args);
  CLI::Option* abl_threads_opt =
      abl->add_option("--threads", ablate_threads, "worker thread cap");

  CLI::App* ins =
      app.add_subcommand("inspect", "summarize a checkpoint or manifest");
  ins->add_option("path", inspect_path, "checkpoint (.eckp) or manifest (.json)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // help and version exit clean, everything else is usage
  }

  const auto guarded = [](auto&& fn) -> int {
    try {
      return fn();
    } catch (const Error& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return e.kind() == ErrorKind::Usage ? 1 : 2;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 2;
    }
  };

  if (sim->parsed()) return guarded([&] { return cmd_simulate(sim_args); });
  if (pre->parsed())
    return guarded([&] { return cmd_pretrain(pre_args, pre_threads_opt, pre_threads); });
  if (prb->parsed()) return guarded([&] { return cmd_probe(probe_args); });
  if (ren->parsed()) return guarded([&] { return cmd_render(render_args); });
  if (abl->parsed())
    return guarded([&] { return cmd_ablate(ablate_args, abl_threads_opt, ablate_threads); });
  if (ins->parsed()) return guarded([&] { return cmd_inspect(inspect_path); });
  return 1;
}
