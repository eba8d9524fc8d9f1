#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "fuller/fuller.hpp"

using namespace fuller;
using namespace fuller::testing;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.net.d_lid = 16;
  c.net.d_img = 8;
  c.net.enc_widths = {16};
  c.net.d_fuse = 8;
  c.net.trunk_widths = {8, 8};
  c.net.K = 4;
  c.net.G = 16;
  c.data.n_samples = 256;
  c.n_eval = 128;
  c.epochs = 2;
  c.batch_size = 32;
  c.log_every = 2;
  c.seed = 3;
  return c;
}

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / (std::string("fuller_") + info->test_suite_name() + "_" + info->name());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(TrainStep, NoneAtOneToOneIsVanillaDescent) {
  ExperimentConfig cfg = tiny_config();
  const Batch batch = first_batch(cfg);
  Network a = build_network(cfg.net_config());
  Network b = a;
  TrainState state = TrainState::initial(a, cfg);
  std::vector<Tensor> velocity = state.velocity;

  for (int step = 0; step < 3; ++step) {
    train_step(a, batch, state, cfg);
    vanilla_step(b, velocity, batch, cfg.lr, cfg.momentum);
    ASSERT_TRUE(a.params == b.params) << "step " << step;
  }
}

TEST(TrainStep, SymmetricBothEqualsNone) {
  Symmetric s;
  ExperimentConfig none = s.cfg, both = s.cfg;
  none.set_calibration("none");
  both.set_calibration("both");
  Network a = s.net, b = s.net;
  TrainState sa = TrainState::initial(a, none), sb = TrainState::initial(b, both);
  train_step(a, s.batch, sa, none);
  const StepResult r = train_step(b, s.batch, sb, both);
  EXPECT_EQ(r.alpha.values, (std::vector<Real>{1.0, 1.0}));
  EXPECT_EQ(sb.gates.raw_lid, 1.0);
  EXPECT_EQ(sb.gates.raw_img, 1.0);
  EXPECT_EQ(sb.gates.w_lid, 1.0);
  EXPECT_EQ(sb.gates.w_img, 1.0);
  EXPECT_TRUE(a.params == b.params);
}

TEST(TrainStep, IntraChangesOnlyGatedRegions) {
  ExperimentConfig none = tiny_config(), intra = tiny_config();
  intra.set_calibration("intra");
  const Batch batch = first_batch(none);
  Network a = build_network(none.net_config()), b = a;
  TrainState sa = TrainState::initial(a, none), sb = TrainState::initial(b, intra);
  const StepResult ra = train_step(a, batch, sa, none);
  const StepResult rb = train_step(b, batch, sb, intra);
  EXPECT_NE(ra.applied, rb.applied);
  for (RegionTag t : kAllRegionTags) {
    if (t == RegionTag::LidarBranch || t == RegionTag::ImageBranch) continue;
    EXPECT_EQ(ra.applied.region_gradient(t), rb.applied.region_gradient(t)) << to_string(t);
  }
  EXPECT_TRUE(sb.gates.w_lid < 1.0 || sb.gates.w_img < 1.0);
}

TEST(TrainStep, InterDirectionIgnoresSegLossScale) {
  ExperimentConfig a = tiny_config(), b = tiny_config();
  a.set_calibration("inter");
  b.set_calibration("inter");
  b.seg_weight = 100;
  const Batch batch = first_batch(a);
  Network na = build_network(a.net_config()), nb = na;
  TrainState sa = TrainState::initial(na, a), sb = TrainState::initial(nb, b);
  const StepResult ra = train_step(na, batch, sa, a);
  const StepResult rb = train_step(nb, batch, sb, b);
  const auto ga = ra.applied.region_gradient(RegionTag::SharedLast);
  const auto gb = rb.applied.region_gradient(RegionTag::SharedLast);
  EXPECT_NEAR(cosine_similarity(ga, gb), 1.0, 1e-9);
  EXPECT_NEAR(ra.gamma_task, 1.0, 1e-12);
  EXPECT_NEAR(rb.gamma_task, 1.0, 1e-12);
  EXPECT_NEAR(rb.gamma_task_raw, ra.gamma_task_raw, 1e-9 * ra.gamma_task_raw);
}

TEST(TrainStep, GradnormLikeBalancesWeightedNorms) {
  ExperimentConfig cfg = tiny_config();
  cfg.weighting = Weighting::gradnorm_like;
  const Batch batch = first_batch(cfg);
  Network net = build_network(cfg.net_config());
  TrainState st = TrainState::initial(net, cfg);
  const StepResult r = train_step(net, batch, st, cfg);
  EXPECT_NEAR(r.alpha.sum(), 2.0, 1e-12);
  EXPECT_NEAR(r.gamma_task, 1.0, 1e-12);
  cfg.inter = true;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainStep, DetOnlyNeverTouchesSegHead) {
  ExperimentConfig cfg = single_task_variant(tiny_config(), TaskSelection::det_only);
  const Batch batch = first_batch(cfg);
  Network net = build_network(cfg.net_config());
  const Network before = net;
  TrainState st = TrainState::initial(net, cfg);
  for (int i = 0; i < 3; ++i) {
    const StepResult r = train_step(net, batch, st, cfg);
    for (Real v : r.applied.region_gradient(RegionTag::HeadSeg)) ASSERT_EQ(v, 0.0);
  }
  EXPECT_EQ(param(net, "seg_head.weight").value, before.params[before.params.index_of("seg_head.weight")].value);
  EXPECT_NE(param(net, "det_head.weight").value, before.params[before.params.index_of("det_head.weight")].value);
}

TEST(TrainStep, DivergenceIsReportedWithStep) {
  ExperimentConfig cfg = tiny_config();
  cfg.net.activation = Activation::relu;
  cfg.lr = 1e300;
  try {
    run_experiment(cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(RunExperiment, RepeatIsByteIdentical) {
  const fs::path dir = scratch_dir();
  ExperimentConfig cfg = tiny_config();
  cfg.set_calibration("both");
  run_experiment(cfg, (dir / "a").string());
  run_experiment(cfg, (dir / "b").string());
  for (const char* f : {"metrics.jsonl", "summary.csv", "checkpoint.txt", "report.json"}) {
    const std::string a = slurp(dir / "a" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp(dir / "b" / f)) << f;
  }
}

TEST(RunExperiment, WritesOneRecordPerLogInterval) {
  const fs::path dir = scratch_dir();
  ExperimentConfig cfg = tiny_config();
  const Report r = run_experiment(cfg, dir.string());
  const std::size_t steps = cfg.epochs * (cfg.data.n_samples / cfg.batch_size);
  EXPECT_EQ(r.records.size(), steps / cfg.log_every);
  std::ifstream jsonl(dir / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(jsonl, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("gamma_task"));
    EXPECT_TRUE(j.contains("w_lid"));
    ++lines;
  }
  EXPECT_EQ(lines, r.records.size());
  std::ifstream csv(dir / "summary.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("step,epoch,loss_det,loss_seg", 0), 0u);
}

TEST(RunExperiment, CheckpointReloadReproducesEvaluation) {
  const fs::path dir = scratch_dir();
  ExperimentConfig cfg = tiny_config();
  const Report r = run_experiment(cfg, dir.string());
  Network net = build_network(cfg.net_config());
  load_parameters(net, load_checkpoint((dir / "checkpoint.txt").string()));
  const ExperimentData d = make_experiment_data(cfg);
  const TaskMetrics m = evaluate(net, d.eval);
  EXPECT_EQ(m.det_accuracy, r.eval.det_accuracy);
  EXPECT_EQ(m.seg_iou, r.eval.seg_iou);
}

TEST(RunExperiment, RejectsZeroEpochs) {
  ExperimentConfig cfg = tiny_config();
  cfg.epochs = 0;
  EXPECT_THROW(run_experiment(cfg), ConfigError);
}

TEST(Evaluate, NoDropEqualsPlainEvaluation) {
  ExperimentConfig cfg = tiny_config();
  const Network net = build_network(cfg.net_config());
  const ExperimentData d = make_experiment_data(cfg);
  const Batch b = make_batch(d.eval, cfg.net.K);
  const ForwardPass fp = forward(net, b.x_lid, b.x_img);
  const TaskMetrics m = evaluate(net, d.eval, DropModality::none);
  EXPECT_EQ(m.det_accuracy, detection_accuracy(fp.det(), b.det_labels));
  EXPECT_EQ(m.seg_iou, segmentation_iou(fp.seg(), b.seg_masks));
}

TEST(Evaluate, NoLeakageModelLosesDetectionWithoutLidar) {
  ExperimentConfig cfg = tiny_config();
  cfg.data.rho = 0;
  cfg.data.n_samples = 1024;
  cfg.n_eval = 2048;
  cfg.epochs = 10;
  const Report r = run_experiment(cfg);
  EXPECT_GT(r.eval.det_accuracy, 0.6);
  EXPECT_NEAR(r.eval_drop_lidar.det_accuracy, 1.0 / cfg.net.K, 0.05);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny_config();
  c.set_calibration("intra");
  c.set_loss_weights("1:5");
  c.split = SplitScheme::disjoint_balance;
  c.net.activation = Activation::relu;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(experiment_config_from_json(j)), j);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  nlohmann::json j = to_json(tiny_config());
  j["learning_rate"] = 0.1;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["net"]["width"] = 3;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["epochs"] = 0;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j["epochs"] = -3;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  ExperimentConfig c;
  EXPECT_THROW(c.set_loss_weights("1-5"), ConfigError);
  EXPECT_THROW(c.set_calibration("all"), ConfigError);
  c.set_loss_weights("2:10");
  EXPECT_EQ(c.det_weight, 2.0);
  EXPECT_EQ(c.seg_weight, 10.0);
}

TEST(UpperBounds, WritesTwoNamedScalars) {
  const fs::path dir = scratch_dir();
  const TaskMetrics m = run_upper_bounds(tiny_config(), dir.string());
  const auto j = nlohmann::json::parse(slurp(dir / "baseline_metrics.json"));
  EXPECT_EQ(j.size(), 2u);
  EXPECT_EQ(j.at("det").get<Real>(), m.det_accuracy);
  EXPECT_EQ(j.at("seg").get<Real>(), m.seg_iou);
  const TaskMetrics back = load_baseline_metrics((dir / "baseline_metrics.json").string());
  EXPECT_EQ(back.det_accuracy, m.det_accuracy);
  EXPECT_EQ(back.seg_iou, m.seg_iou);

  std::ofstream(dir / "extra.json") << R"({"det": 0.5, "seg": 0.5, "map": 1})";
  EXPECT_THROW(load_baseline_metrics((dir / "extra.json").string()), IoError);
}

TEST(UpperBounds, DefaultBenchmarkSeedZeroBeatsUncalibratedRun) {
  ExperimentConfig cfg;
  const TaskMetrics ub = run_upper_bounds(cfg);
  const Report none = run_experiment(cfg, {}, ub);
  EXPECT_GE(ub.det_accuracy, none.eval.det_accuracy);
  EXPECT_GE(ub.seg_iou, none.eval.seg_iou);
}
