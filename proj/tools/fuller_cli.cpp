// Command-line front end for the calibration lab.
//
//   fuller run           train one experiment
//   fuller upper-bounds  single-task runs -> baseline_metrics.json
//   fuller sweep         grid of experiments (optionally with upper bounds)
//   fuller eval          evaluate a checkpoint, optionally dropping a modality
//   fuller grad-check    finite-difference audit of backward()
//   fuller report        aggregate Delta_MTL table from run directories
//   fuller generate      export a synthetic dataset as JSON lines

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fuller/fuller.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fuller;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string calibration;
  std::string loss_weights;
  std::string split;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "experiment config (JSON)");
  app->add_option("--seed", f.seed, "experiment seed");
  app->add_option("--calibration", f.calibration, "none|intra|inter|both");
  app->add_option("--loss-weights", f.loss_weights, "fixed det:seg weights, e.g. 1:5");
  app->add_option("--split", f.split, "full|disjoint-normal|disjoint-balance");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_experiment_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.calibration.empty()) cfg.set_calibration(f.calibration);
  if (!f.loss_weights.empty()) cfg.set_loss_weights(f.loss_weights);
  if (!f.split.empty()) cfg.split = split_scheme_from_string(f.split);
  cfg.validate();
  return cfg;
}

void print_summary(const Report& r) {
  std::printf("%-28s det_acc=%.4f seg_iou=%.4f  [drop image: det=%.4f seg=%.4f]  med_gamma_task=%s med_gamma_modal=%s",
              r.config.name.c_str(), r.eval.det_accuracy, r.eval.seg_iou, r.eval_drop_image.det_accuracy,
              r.eval_drop_image.seg_iou, real_text(r.median_gamma_task).c_str(),
              real_text(r.median_gamma_modal).c_str());
  if (r.delta_mtl) std::printf(" delta_mtl=%+.4f", *r.delta_mtl);
  std::printf("\n");
}

// Sweep file, either
//   {"configs": [<config object or path>, ...]}
// or
//   {"base": <config object>, "grid": {"calibration": [...], "loss_weights": [...],
//                                      "split": [...], "seed": [...]}}
std::vector<ExperimentConfig> expand_sweep(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open sweep file: " + path);
  const auto j = nlohmann::json::parse(is);
  std::vector<ExperimentConfig> out;
  if (j.contains("configs")) {
    for (const auto& c : j.at("configs")) {
      out.push_back(c.is_string() ? load_experiment_config(c.get<std::string>()) : experiment_config_from_json(c));
    }
    return out;
  }
  const ExperimentConfig base = experiment_config_from_json(j.value("base", nlohmann::json::object()));
  const auto grid = j.value("grid", nlohmann::json::object());
  for (const auto& [key, _] : grid.items()) {
    if (key != "calibration" && key != "loss_weights" && key != "split" && key != "seed") {
      throw ConfigError("unknown sweep grid axis '" + key + "'");
    }
  }
  auto axis = [&](const char* key, nlohmann::json fallback) {
    return grid.contains(key) ? grid.at(key) : nlohmann::json::array({fallback});
  };
  for (const auto& cal : axis("calibration", base.calibration_name())) {
    for (const auto& lw : axis("loss_weights", format_weight(base.det_weight) + ":" + format_weight(base.seg_weight))) {
      for (const auto& sp : axis("split", std::string(to_string(base.split)))) {
        for (const auto& seed : axis("seed", base.seed)) {
          ExperimentConfig c = base;
          c.set_calibration(cal.get<std::string>());
          c.set_loss_weights(lw.get<std::string>());
          c.split = split_scheme_from_string(sp.get<std::string>());
          c.seed = seed.get<std::uint64_t>();
          std::string w = lw.get<std::string>();
          for (char& ch : w) ch = ch == ':' ? '-' : ch;
          c.name = base.name + "_" + c.calibration_name() + "_w" + w + "_" + std::string(to_string(c.split)) + "_s" +
                   std::to_string(c.seed);
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

int cmd_grad_check(int networks, std::uint64_t seed, double h, double tol) {
  int failures = 0;
  for (int i = 0; i < networks; ++i) {
    const auto r = grad_check_random_network(seed + static_cast<std::uint64_t>(i), h, tol);
    std::printf("net %2d  params=%zu  max_rel=%.3e  max_abs(small)=%.3e  %s\n", i,
                build_network(r.config).params.parameter_count(), r.comparison.max_rel_error,
                r.comparison.max_abs_error, r.passed() ? "ok" : ("FAIL at " + r.comparison.worst).c_str());
    failures += !r.passed();
  }
  std::printf("%d/%d networks within rel %.1e\n", networks - failures, networks, tol);
  return failures == 0 ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& baseline_path) {
  std::optional<TaskMetrics> baseline;
  if (!baseline_path.empty()) baseline = load_baseline_metrics(baseline_path);
  std::printf("name,calibration,loss_weights,split,seed,det_accuracy,seg_iou,median_gamma_task,median_gamma_modal,delta_mtl\n");
  for (const auto& d : dirs) {
    const fs::path p = fs::path(d) / "report.json";
    if (fs::is_directory(d) && !fs::exists(p)) continue;  // e.g. upper_bounds_s* inside a sweep
    std::ifstream is(p);
    if (!is) throw IoError("cannot open " + p.string());
    const auto j = nlohmann::json::parse(is);
    const auto& c = j.at("config");
    const TaskMetrics m{j.at("eval").at("det_accuracy").get<Real>(), j.at("eval").at("seg_iou").get<Real>()};
    std::string delta = "";
    if (baseline) delta = real_text(delta_mtl(m, *baseline, 1));
    else if (!j.at("delta_mtl").is_null()) delta = j.at("delta_mtl").dump();
    std::printf("%s,%s,%s,%s,%s,%s,%s,%s,%s,%s\n", c.at("name").get<std::string>().c_str(),
                c.at("calibration").get<std::string>().c_str(), c.at("loss_weights").get<std::string>().c_str(),
                c.at("split").get<std::string>().c_str(), c.at("seed").dump().c_str(),
                real_text(m.det_accuracy).c_str(), real_text(m.seg_iou).c_str(), j.at("median_gamma_task").dump().c_str(),
                j.at("median_gamma_modal").dump().c_str(), delta.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level gradient calibration lab"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  std::string run_out = "out/run", run_baseline;
  auto* run = app.add_subcommand("run", "train one experiment");
  add_common(run, run_flags);
  run->add_option("--out", run_out, "output directory");
  run->add_option("--baseline-metrics", run_baseline, "single-task metrics for Delta_MTL");

  CommonFlags ub_flags;
  std::string ub_out = "out/upper_bounds";
  auto* ub = app.add_subcommand("upper-bounds", "single-task upper-bound runs");
  add_common(ub, ub_flags);
  ub->add_option("--out", ub_out, "output directory");

  std::string sweep_file, sweep_out = "out/sweep", sweep_baseline;
  int jobs = 1;
  bool sweep_ub = false;
  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  sweep->add_option("--config", sweep_file, "sweep file (JSON)")->required();
  sweep->add_option("--out", sweep_out, "output root");
  sweep->add_option("--baseline-metrics", sweep_baseline, "single-task metrics for Delta_MTL");
  sweep->add_flag("--upper-bounds", sweep_ub, "compute per-seed upper bounds for Delta_MTL");
  sweep->add_option("--jobs", jobs, "concurrent experiments")->check(CLI::PositiveNumber);

  CommonFlags eval_flags;
  std::string checkpoint, drop = "none";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  add_common(ev, eval_flags);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--drop", drop, "none|lidar|image");

  int gc_networks = 20;
  std::uint64_t gc_seed = 0;
  double gc_h = 1e-2, gc_tol = 1e-5;
  auto* gc = app.add_subcommand("grad-check", "finite-difference audit of backward()");
  gc->add_option("--networks", gc_networks, "random networks to audit");
  gc->add_option("--seed", gc_seed, "first seed");
  gc->add_option("--step", gc_h, "finite-difference step h (seven-point stencil)");
  gc->add_option("--tol", gc_tol, "relative tolerance");

  std::vector<std::string> report_dirs;
  std::string report_baseline;
  auto* rep = app.add_subcommand("report", "aggregate Delta_MTL table from run directories");
  rep->add_option("dirs", report_dirs, "run directories containing report.json")->required();
  rep->add_option("--baseline-metrics", report_baseline, "single-task metrics for Delta_MTL");

  CommonFlags gen_flags;
  std::string gen_out = "dataset.jsonl";
  auto* gen = app.add_subcommand("generate", "export the synthetic training set as JSON lines");
  add_common(gen, gen_flags);
  gen->add_option("--out", gen_out, "output file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const ExperimentConfig cfg = resolve(run_flags);
      std::optional<TaskMetrics> baseline;
      if (!run_baseline.empty()) baseline = load_baseline_metrics(run_baseline);
      print_summary(run_experiment(cfg, run_out, baseline));
    } else if (*ub) {
      const TaskMetrics m = run_upper_bounds(resolve(ub_flags), ub_out);
      std::printf("upper bounds: det_accuracy=%.4f seg_iou=%.4f -> %s\n", m.det_accuracy, m.seg_iou,
                  (fs::path(ub_out) / "baseline_metrics.json").c_str());
    } else if (*sweep) {
      const auto configs = expand_sweep(sweep_file);
      std::optional<TaskMetrics> shared;
      if (!sweep_baseline.empty()) shared = load_baseline_metrics(sweep_baseline);
      std::map<std::uint64_t, TaskMetrics> per_seed;
      if (sweep_ub && !shared) {
        for (const auto& c : configs) {
          if (!per_seed.count(c.seed)) {
            per_seed[c.seed] = run_upper_bounds(c, (fs::path(sweep_out) / ("upper_bounds_s" + std::to_string(c.seed))).string());
          }
        }
      }
      std::vector<std::future<Report>> pending;
      std::vector<std::string> dirs;
      for (const auto& c : configs) {
        std::optional<TaskMetrics> b = shared;
        if (!b && per_seed.count(c.seed)) b = per_seed[c.seed];
        const std::string dir = (fs::path(sweep_out) / c.name).string();
        dirs.push_back(dir);
        if (pending.size() >= static_cast<std::size_t>(jobs)) {
          print_summary(pending.front().get());
          pending.erase(pending.begin());
        }
        pending.push_back(std::async(std::launch::async, [c, dir, b] { return run_experiment(c, dir, b); }));
      }
      for (auto& f : pending) print_summary(f.get());
    } else if (*ev) {
      const ExperimentConfig cfg = resolve(eval_flags);
      Network net = build_network(cfg.net_config());
      load_parameters(net, load_checkpoint(checkpoint));
      const ExperimentData data = make_experiment_data(cfg);
      const TaskMetrics m = evaluate(net, data.eval, drop_from_string(drop));
      nlohmann::ordered_json j;
      j["drop"] = drop;
      j["det_accuracy"] = m.det_accuracy;
      j["seg_iou"] = m.seg_iou;
      std::cout << j.dump() << '\n';
    } else if (*gc) {
      return cmd_grad_check(gc_networks, gc_seed, gc_h, gc_tol);
    } else if (*rep) {
      return cmd_report(report_dirs, report_baseline);
    } else if (*gen) {
      const ExperimentConfig cfg = resolve(gen_flags);
      const ExperimentData data = make_experiment_data(cfg);
      std::ofstream os(gen_out, std::ios::binary);
      if (!os) throw IoError("cannot write " + gen_out);
      write_dataset_jsonl(os, data.train);
      std::printf("wrote %zu samples to %s\n", data.train.size(), gen_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
