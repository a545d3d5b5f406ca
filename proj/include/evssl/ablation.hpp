#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>

#include "evssl/common.hpp"
#include "evssl/config.hpp"
#include "evssl/probe.hpp"
#include "evssl/trainer.hpp"

// Context-loss ablation: two pre-training runs from one config (the
// configured lambda1 versus 0), probed identically, summarized in a single
// table. The sign of the difference is reported, never asserted.

namespace evssl {

struct AblationLeg {
  std::string name;
  double lambda1 = 0.0;
  TrainRunResult train;
  ProbeRunResult probe;
};

struct AblationResult {
  AblationLeg with_context;
  AblationLeg without_context;
  double miou_delta = 0.0;  // with_context minus without_context
  std::string table;
  std::string table_path;
};

namespace detail {

inline AblationLeg ablation_leg(const AblationConfig& cfg, std::string name,
                                double lambda1) {
  namespace fs = std::filesystem;
  AblationLeg leg;
  leg.name = std::move(name);
  leg.lambda1 = lambda1;

  TrainConfig t = cfg.train;
  t.lambda1 = lambda1;
  t.out_dir = (fs::path(cfg.out_dir) / leg.name).string();
  leg.train = run_training(t);

  ProbeConfig p;
  p.checkpoint = leg.train.checkpoint_path;
  p.manifest = cfg.train.manifest;
  p.out_dir = (fs::path(cfg.out_dir) / cat("probe_", leg.name)).string();
  p.classes = cfg.probe_classes;
  p.probe_steps = cfg.probe_steps;
  p.probe_lr = cfg.probe_lr;
  p.train_fraction_pct = cfg.probe_train_fraction_pct;
  p.seed = cfg.probe_seed;
  leg.probe = run_probe(p);
  return leg;
}

}  // namespace detail

inline AblationResult run_ablation(const AblationConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  require(!cfg.train.manifest.empty(), ErrorKind::Usage,
          "ablation: no dataset manifest");
  fs::create_directories(cfg.out_dir);

  AblationResult res;
  res.with_context = detail::ablation_leg(cfg, "with_context", cfg.train.lambda1);
  res.without_context = detail::ablation_leg(cfg, "without_context", 0.0);
  res.miou_delta =
      res.with_context.probe.report.miou - res.without_context.probe.report.miou;

  char line[160];
  std::string table =
      "leg              lambda1  final_l_total      miou  pixel_acc\n";
  for (const AblationLeg* leg : {&res.with_context, &res.without_context}) {
    std::snprintf(line, sizeof(line), "%-16s %7.3f  %13.6f  %8.4f  %9.4f\n",
                  leg->name.c_str(), leg->lambda1, leg->train.final_total,
                  leg->probe.report.miou, leg->probe.report.pixel_accuracy);
    table += line;
  }
  std::snprintf(line, sizeof(line),
                "\nmiou difference (with_context - without_context): %+.4f\n",
                res.miou_delta);
  table += line;

  res.table = std::move(table);
  res.table_path = (fs::path(cfg.out_dir) / "ablation_table.txt").string();
  write_file_text(res.table_path, res.table);
  return res;
}

}  // namespace evssl
