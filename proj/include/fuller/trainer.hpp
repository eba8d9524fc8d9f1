#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include "fuller/calibration.hpp"
#include "fuller/errors.hpp"
#include "fuller/metrics.hpp"
#include "fuller/model.hpp"
#include "fuller/params.hpp"
#include "fuller/rng.hpp"
#include "fuller/synthbench.hpp"
#include "fuller/tape.hpp"
#include "json.hpp"

namespace fuller {

enum class TaskSelection { multi, det_only, seg_only };
enum class Weighting { fixed, gradnorm_like };

struct ExperimentConfig {
  std::string name = "run";
  NetConfig net;
  // Widths (d_lid, d_img, K, G) are taken from `net`; n_samples is the
  // training-set size and seed is overwritten from `seed`.
  SynthConfig data;
  std::size_t n_eval = 1024;
  SplitScheme split = SplitScheme::full;
  bool inter = false;  // equal-projection task weighting
  bool intra = false;  // modality gates on the encoder branches
  Weighting weighting = Weighting::fixed;
  Real det_weight = 1.0;  // fixed det:seg loss weights, applied before calibration
  Real seg_weight = 1.0;
  TaskSelection task = TaskSelection::multi;
  Real alpha_gate = 0.1;
  Real gate_momentum = 0.2;
  Real lr = 1e-2;
  Real momentum = 0.9;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t log_every = 10;
  std::uint64_t seed = 0;

  std::string calibration_name() const {
    if (inter && intra) return "both";
    if (inter) return "inter";
    if (intra) return "intra";
    return "none";
  }

  void set_calibration(std::string_view mode) {
    if (mode == "none") inter = intra = false;
    else if (mode == "intra") inter = false, intra = true;
    else if (mode == "inter") inter = true, intra = false;
    else if (mode == "both") inter = intra = true;
    else throw ConfigError("unknown calibration mode '" + std::string(mode) + "'");
  }

  void set_loss_weights(std::string_view spec) {
    const auto colon = spec.find(':');
    if (colon == std::string_view::npos) throw ConfigError("loss weights must look like a:b, got '" + std::string(spec) + "'");
    try {
      det_weight = std::stod(std::string(spec.substr(0, colon)));
      seg_weight = std::stod(std::string(spec.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ConfigError("loss weights must look like a:b, got '" + std::string(spec) + "'");
    }
  }

  NetConfig net_config() const {
    NetConfig n = net;
    n.init_seed = derive_seed(seed, 10);
    return n;
  }

  SynthConfig synth_config() const {
    SynthConfig d = data;
    d.d_lid = net.d_lid;
    d.d_img = net.d_img;
    d.K = net.K;
    d.G = net.G;
    d.seed = seed;
    d.n_samples = data.n_samples + n_eval;
    return d;
  }

  void validate() const {
    net.validate();
    SynthConfig d = synth_config();
    d.validate();
    if (data.n_samples < 1) throw ConfigError("data.n_train must be >= 1");
    if (n_eval < 1) throw ConfigError("data.n_eval must be >= 1");
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (!(det_weight > 0) || !(seg_weight > 0) || !std::isfinite(det_weight) || !std::isfinite(seg_weight)) {
      throw ConfigError("loss weights must be positive and finite");
    }
    if (!(alpha_gate > 0) || !std::isfinite(alpha_gate)) throw ConfigError("alpha_gate must be > 0");
    if (!(gate_momentum >= 0 && gate_momentum < 1)) throw ConfigError("gate_momentum must lie in [0, 1)");
    if (weighting == Weighting::gradnorm_like && inter) {
      throw ConfigError("gradnorm_like weighting replaces inter calibration; use calibration none or intra");
    }
  }
};

// Table-1 presets (det:seg).
inline constexpr std::pair<Real, Real> kLossWeightPresets[] = {{1, 1}, {1, 5}, {1, 10}};

// ---------------------------------------------------------------------------
// Config file (JSON). Unknown keys anywhere are an error.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  if constexpr (std::is_unsigned_v<T>) {
    if (!j.at(key).is_number_unsigned()) throw ConfigError("'" + where + key + "' must be a non-negative integer");
  }
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + where + key + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  detail::reject_unknown(j,
                         {"name", "net", "data", "split", "calibration", "weighting", "loss_weights", "task",
                          "alpha_gate", "gate_momentum", "lr", "momentum", "epochs", "batch_size", "log_every", "seed"},
                         "");
  read_opt(j, "name", c.name, "");
  if (j.contains("net")) {
    const auto& n = j.at("net");
    detail::reject_unknown(n, {"d_lid", "d_img", "enc_widths", "d_fuse", "trunk_widths", "K", "G", "activation"}, "net.");
    read_opt(n, "d_lid", c.net.d_lid, "net.");
    read_opt(n, "d_img", c.net.d_img, "net.");
    read_opt(n, "enc_widths", c.net.enc_widths, "net.");
    read_opt(n, "d_fuse", c.net.d_fuse, "net.");
    read_opt(n, "trunk_widths", c.net.trunk_widths, "net.");
    read_opt(n, "K", c.net.K, "net.");
    read_opt(n, "G", c.net.G, "net.");
    std::string act(to_string(c.net.activation));
    read_opt(n, "activation", act, "net.");
    c.net.activation = activation_from_string(act);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"n_train", "n_eval", "rho", "noise_sigma", "latent_dim"}, "data.");
    read_opt(d, "n_train", c.data.n_samples, "data.");
    read_opt(d, "n_eval", c.n_eval, "data.");
    read_opt(d, "rho", c.data.rho, "data.");
    read_opt(d, "noise_sigma", c.data.noise_sigma, "data.");
    read_opt(d, "latent_dim", c.data.latent_dim, "data.");
  }
  if (j.contains("split")) c.split = split_scheme_from_string(j.at("split").get<std::string>());
  if (j.contains("calibration")) c.set_calibration(j.at("calibration").get<std::string>());
  if (j.contains("weighting")) {
    const auto w = j.at("weighting").get<std::string>();
    if (w == "fixed") c.weighting = Weighting::fixed;
    else if (w == "gradnorm_like") c.weighting = Weighting::gradnorm_like;
    else throw ConfigError("unknown weighting '" + w + "'");
  }
  if (j.contains("loss_weights")) c.set_loss_weights(j.at("loss_weights").get<std::string>());
  if (j.contains("task")) {
    const auto t = j.at("task").get<std::string>();
    if (t == "multi") c.task = TaskSelection::multi;
    else if (t == "det") c.task = TaskSelection::det_only;
    else if (t == "seg") c.task = TaskSelection::seg_only;
    else throw ConfigError("unknown task selection '" + t + "'");
  }
  read_opt(j, "alpha_gate", c.alpha_gate, "");
  read_opt(j, "gate_momentum", c.gate_momentum, "");
  read_opt(j, "lr", c.lr, "");
  read_opt(j, "momentum", c.momentum, "");
  read_opt(j, "epochs", c.epochs, "");
  read_opt(j, "batch_size", c.batch_size, "");
  read_opt(j, "log_every", c.log_every, "");
  read_opt(j, "seed", c.seed, "");
  c.validate();
  return c;
}

inline std::string format_weight(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const char* task = c.task == TaskSelection::multi ? "multi" : c.task == TaskSelection::det_only ? "det" : "seg";
  return {
      {"name", c.name},
      {"net",
       {{"d_lid", c.net.d_lid},
        {"d_img", c.net.d_img},
        {"enc_widths", c.net.enc_widths},
        {"d_fuse", c.net.d_fuse},
        {"trunk_widths", c.net.trunk_widths},
        {"K", c.net.K},
        {"G", c.net.G},
        {"activation", std::string(to_string(c.net.activation))}}},
      {"data",
       {{"n_train", c.data.n_samples},
        {"n_eval", c.n_eval},
        {"rho", c.data.rho},
        {"noise_sigma", c.data.noise_sigma},
        {"latent_dim", c.data.latent_dim}}},
      {"split", std::string(to_string(c.split))},
      {"calibration", c.calibration_name()},
      {"weighting", c.weighting == Weighting::fixed ? "fixed" : "gradnorm_like"},
      {"loss_weights", format_weight(c.det_weight) + ":" + format_weight(c.seg_weight)},
      {"task", task},
      {"alpha_gate", c.alpha_gate},
      {"gate_momentum", c.gate_momentum},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"log_every", c.log_every},
      {"seed", c.seed},
  };
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return experiment_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metrics stream.

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Real loss_det = 0;
  Real loss_seg = 0;
  Real alpha_det = 1;
  Real alpha_seg = 1;
  Real w_lid = 1;
  Real w_img = 1;
  Real gamma_task = 0;  // on the loss terms as weighted in the total loss
  Real gamma_modal = 0;
  Real gate_ratio = 1;  // w_img / w_lid
  Real det_accuracy = 0;  // running, over the steps since the previous record
  Real seg_iou = 0;
  Real gamma_task_raw = 0;  // on the unweighted task losses
  bool gate_zero_norm = false;
};

inline constexpr const char* kMetricsColumns[] = {
    "step",      "epoch",       "loss_det",   "loss_seg",     "alpha_det", "alpha_seg",
    "w_lid",     "w_img",       "gamma_task", "gamma_modal",  "gate_ratio", "det_accuracy",
    "seg_iou",   "gamma_task_raw", "gate_zero_norm",
};

inline nlohmann::ordered_json real_json(Real v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

inline std::string real_text(Real v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::ordered_json to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["loss_det"] = real_json(r.loss_det);
  j["loss_seg"] = real_json(r.loss_seg);
  j["alpha_det"] = real_json(r.alpha_det);
  j["alpha_seg"] = real_json(r.alpha_seg);
  j["w_lid"] = real_json(r.w_lid);
  j["w_img"] = real_json(r.w_img);
  j["gamma_task"] = real_json(r.gamma_task);
  j["gamma_modal"] = real_json(r.gamma_modal);
  j["gate_ratio"] = real_json(r.gate_ratio);
  j["det_accuracy"] = real_json(r.det_accuracy);
  j["seg_iou"] = real_json(r.seg_iou);
  j["gamma_task_raw"] = real_json(r.gamma_task_raw);
  j["gate_zero_norm"] = r.gate_zero_norm;
  return j;
}

inline std::string to_csv_row(const MetricsRecord& r) {
  std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch);
  for (Real v : {r.loss_det, r.loss_seg, r.alpha_det, r.alpha_seg, r.w_lid, r.w_img, r.gamma_task, r.gamma_modal,
                 r.gate_ratio, r.det_accuracy, r.seg_iou, r.gamma_task_raw}) {
    s += "," + real_text(v);
  }
  s += r.gate_zero_norm ? ",1" : ",0";
  return s;
}

// Appends records to metrics.jsonl and summary.csv in `dir`, flushing both
// after every record so a crash leaves complete lines.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& dir)
      : jsonl_(dir / "metrics.jsonl", std::ios::binary), csv_(dir / "summary.csv", std::ios::binary) {
    if (!jsonl_) throw IoError("cannot open " + (dir / "metrics.jsonl").string());
    if (!csv_) throw IoError("cannot open " + (dir / "summary.csv").string());
    bool first = true;
    for (const char* c : kMetricsColumns) {
      csv_ << (first ? "" : ",") << c;
      first = false;
    }
    csv_ << '\n' << std::flush;
  }

  void write(const MetricsRecord& r) {
    jsonl_ << to_json(r).dump() << '\n' << std::flush;
    csv_ << to_csv_row(r) << '\n' << std::flush;
    if (!jsonl_ || !csv_) throw IoError("failed writing metrics stream");
  }

 private:
  std::ofstream jsonl_;
  std::ofstream csv_;
};

// ---------------------------------------------------------------------------
// Training.

struct TrainState {
  IntraCalibState gates;
  std::vector<Tensor> velocity;
  std::size_t step = 0;

  static TrainState initial(const Network& net, const ExperimentConfig& cfg) {
    TrainState s;
    s.gates = IntraCalibState::initial(cfg.alpha_gate, cfg.gate_momentum);
    for (const auto& p : net.params) s.velocity.emplace_back(p.value.rows(), p.value.cols());
    return s;
  }
};

struct StepResult {
  Real loss_det = 0;
  Real loss_seg = 0;
  TaskWeights alpha = TaskWeights::uniform(2);
  Real gamma_task = kInf;
  Real gamma_task_raw = kInf;
  Real gamma_modal = kInf;
  bool task_grads_measured = false;
  DetectionTally det;
  IouTally seg;
  GradientMap applied;  // the gradient the optimizer consumed
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Classical momentum: v <- mu v + g; theta <- theta - lr v.
inline void momentum_step(Network& net, TrainState& state, const GradientMap& gm, Real lr, Real mu) {
  for (std::size_t p = 0; p < net.params.size(); ++p) {
    auto theta = net.params[p].value.data();
    auto v = state.velocity[p].data();
    auto g = gm[p].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      theta[i] -= lr * v[i];
    }
  }
}

// One update following the calibrated training procedure:
//  (a) forward once, masked task losses (scaled by the fixed det:seg weights);
//  (b) per-task backward, shared_last gradients, gamma_task;
//  (c) task weights alpha (equal projection, norm-balancing, or 1);
//  (d) backward of alpha_det L_det + alpha_seg L_seg;
//  (e) fusion-split norms -> gate update -> gates applied to the encoder
//      branches, gamma_modal;
//  (f) one momentum step over all parameters with the resulting gradient.
// Per-task backwards are skipped when neither the weighting nor the caller
// (`measure`) needs them.
inline StepResult train_step(Network& net, const Batch& batch, TrainState& state, const ExperimentConfig& cfg,
                             bool measure = true) {
  if (batch.size() == 0) throw UsageError("train_step: empty batch");
  StepResult out;
  ForwardPass fp = forward(net, batch.x_lid, batch.x_img);
  Tape& tape = fp.tape;
  const Var l_det = tape.compute_loss(LossKind::softmax_ce, fp.det_logits, batch.det_targets, batch.det_mask);
  const Var l_seg = tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, batch.seg_masks, batch.seg_mask);
  out.loss_det = tape.scalar(l_det);
  out.loss_seg = tape.scalar(l_seg);
  out.det.add(fp.det(), batch.det_labels, batch.det_mask);
  out.seg.add(fp.seg(), batch.seg_masks, batch.seg_mask);

  const Var det_term = tape.scale(l_det, cfg.det_weight);
  const Var seg_term = tape.scale(l_seg, cfg.seg_weight);

  const bool multi = cfg.task == TaskSelection::multi;
  const bool need_task_grads = measure || (multi && (cfg.inter || cfg.weighting == Weighting::gradnorm_like));
  std::vector<Real> g_det, g_seg;
  if (need_task_grads) {
    g_det = shared_last_gradient(net, tape.backward(det_term));
    g_seg = shared_last_gradient(net, tape.backward(seg_term));
    out.task_grads_measured = true;
  }

  if (multi) {
    const Real n_det = need_task_grads ? l2_norm(g_det) : 0;
    const Real n_seg = need_task_grads ? l2_norm(g_seg) : 0;
    if (cfg.inter) {
      // A task absent from the batch (or otherwise zero) gets uniform weights.
      if (n_det > 0 && n_seg > 0) out.alpha = imtl_weights(g_det, g_seg);
    } else if (cfg.weighting == Weighting::gradnorm_like) {
      const Real norms[] = {n_det, n_seg};
      out.alpha = gradnorm_like_weights(norms);
    }
  } else {
    out.alpha = cfg.task == TaskSelection::det_only ? TaskWeights{{1.0, 0.0}} : TaskWeights{{0.0, 1.0}};
  }

  if (need_task_grads) {
    const Real wd = out.alpha[0] * l2_norm(g_det);
    const Real ws = out.alpha[1] * l2_norm(g_seg);
    out.gamma_task = ws == 0 ? kInf : wd / ws;
    const Real rd = l2_norm(g_det) / cfg.det_weight;
    const Real rs = l2_norm(g_seg) / cfg.seg_weight;
    out.gamma_task_raw = rs == 0 ? kInf : rd / rs;
  }

  Var total;
  switch (cfg.task) {
    case TaskSelection::multi:
      total = tape.add(tape.scale(det_term, out.alpha[0]), tape.scale(seg_term, out.alpha[1]));
      break;
    case TaskSelection::det_only: total = det_term; break;
    case TaskSelection::seg_only: total = seg_term; break;
  }
  if (!std::isfinite(tape.scalar(total))) throw NumericError("non-finite total loss");
  GradientMap gm = tape.backward(total);

  const SplitNorms split = fusion_split_norms(net, gm);
  out.gamma_modal = gamma_modal(split.lid, split.img);
  if (cfg.intra) {
    state.gates = update_gates(state.gates, split.lid, split.img);
    gm = apply_gates(std::move(gm), state.gates);
  }

  momentum_step(net, state, gm, cfg.lr, cfg.momentum);
  ++state.step;
  out.applied = std::move(gm);
  return out;
}

inline TaskMetrics evaluate(const Network& net, const Dataset& eval_set, DropModality drop = DropModality::none) {
  const Batch batch = drop_modality(make_batch(eval_set, net.config.K), drop);
  const ForwardPass fp = forward(net, batch.x_lid, batch.x_img);
  return {detection_accuracy(fp.det(), batch.det_labels), segmentation_iou(fp.seg(), batch.seg_masks)};
}

struct ExperimentData {
  Dataset train;
  Dataset eval;
};

inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
  Dataset all = generate_dataset(cfg.synth_config());
  ExperimentData d;
  d.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.data.n_samples), all.end());
  all.resize(cfg.data.n_samples);
  d.train = apply_split(std::move(all), cfg.split, cfg.seed);
  return d;
}

struct Report {
  ExperimentConfig config;
  std::vector<MetricsRecord> records;
  TaskMetrics eval;
  TaskMetrics eval_drop_lidar;
  TaskMetrics eval_drop_image;
  Real median_gamma_task = 0;
  Real median_gamma_modal = 0;
  std::optional<TaskMetrics> baseline;
  std::optional<Real> delta_mtl;
  Network net;
};

inline Real median(std::vector<Real> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline nlohmann::ordered_json metrics_json(const TaskMetrics& m) {
  nlohmann::ordered_json j;
  j["det_accuracy"] = real_json(m.det_accuracy);
  j["seg_iou"] = real_json(m.seg_iou);
  return j;
}

inline nlohmann::ordered_json report_json(const Report& r) {
  nlohmann::ordered_json j;
  j["config"] = to_json(r.config);
  j["steps"] = r.records.empty() ? 0 : r.records.back().step;
  j["records"] = r.records.size();
  j["eval"] = metrics_json(r.eval);
  j["eval_drop_lidar"] = metrics_json(r.eval_drop_lidar);
  j["eval_drop_image"] = metrics_json(r.eval_drop_image);
  j["median_gamma_task"] = real_json(r.median_gamma_task);
  j["median_gamma_modal"] = real_json(r.median_gamma_modal);
  if (r.baseline) j["baseline"] = metrics_json(*r.baseline);
  j["delta_mtl"] = r.delta_mtl ? real_json(*r.delta_mtl) : nlohmann::ordered_json(nullptr);
  return j;
}

// Baseline-metrics file: {"det": <accuracy>, "seg": <iou>}.
inline TaskMetrics load_baseline_metrics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open baseline metrics: " + path);
  try {
    const auto j = nlohmann::json::parse(is);
    detail::reject_unknown(j, {"det", "seg"}, "");
    return {j.at("det").get<Real>(), j.at("seg").get<Real>()};
  } catch (const std::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

inline void write_baseline_metrics(const std::string& path, const TaskMetrics& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write baseline metrics: " + path);
  nlohmann::ordered_json j;
  j["det"] = m.det_accuracy;
  j["seg"] = m.seg_iou;
  os << j.dump(2) << '\n';
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

// Trains to completion. When `out_dir` is non-empty, writes metrics.jsonl,
// summary.csv, checkpoint.txt and report.json there.
inline Report run_experiment(const ExperimentConfig& cfg, const std::string& out_dir = {},
                             std::optional<TaskMetrics> baseline = std::nullopt) {
  cfg.validate();
  const ExperimentData data = make_experiment_data(cfg);
  Report report{cfg, {}, {}, {}, {}, 0, 0, baseline, std::nullopt, build_network(cfg.net_config())};
  Network& net = report.net;

  std::optional<MetricsWriter> writer;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
    writer.emplace(out_dir);
  }

  TrainState state = TrainState::initial(net, cfg);
  Rng shuffle_rng(derive_seed(cfg.seed, 11));
  std::vector<std::size_t> order(data.train.size());
  DetectionTally det_window;
  IouTally seg_window;
  std::vector<Real> gammas_task, gammas_modal;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch batch =
          make_batch(data.train, std::span<const std::size_t>(order.data() + start, end - start), cfg.net.K);
      const bool log_now = (state.step + 1) % cfg.log_every == 0;
      StepResult r;
      try {
        r = train_step(net, batch, state, cfg, log_now);
      } catch (const NumericError& e) {
        std::string msg = "training diverged at step " + std::to_string(state.step + 1) + " (epoch " +
                          std::to_string(epoch) + "): " + e.what() + "; " + std::to_string(report.records.size()) +
                          " records logged";
        if (!report.records.empty()) msg += "; last record " + to_json(report.records.back()).dump();
        throw TrainingError(msg);
      }
      det_window.correct += r.det.correct;
      det_window.total += r.det.total;
      seg_window.intersection += r.seg.intersection;
      seg_window.union_ += r.seg.union_;
      if (!log_now) continue;

      MetricsRecord rec;
      rec.step = state.step;
      rec.epoch = epoch;
      rec.loss_det = r.loss_det;
      rec.loss_seg = r.loss_seg;
      rec.alpha_det = r.alpha[0];
      rec.alpha_seg = r.alpha[1];
      rec.w_lid = state.gates.w_lid;
      rec.w_img = state.gates.w_img;
      rec.gamma_task = r.gamma_task;
      rec.gamma_task_raw = r.gamma_task_raw;
      rec.gamma_modal = r.gamma_modal;
      rec.gate_ratio = state.gates.w_img / state.gates.w_lid;
      rec.det_accuracy = det_window.value();
      rec.seg_iou = seg_window.value();
      rec.gate_zero_norm = cfg.intra && state.gates.zero_norm;
      det_window = {};
      seg_window = {};
      gammas_task.push_back(rec.gamma_task);
      gammas_modal.push_back(rec.gamma_modal);
      report.records.push_back(rec);
      if (writer) writer->write(rec);
    }
  }

  report.eval = evaluate(net, data.eval, DropModality::none);
  report.eval_drop_lidar = evaluate(net, data.eval, DropModality::lidar);
  report.eval_drop_image = evaluate(net, data.eval, DropModality::image);
  report.median_gamma_task = median(gammas_task);
  report.median_gamma_modal = median(gammas_modal);
  if (baseline) report.delta_mtl = delta_mtl(report.eval, *baseline, 1);

  if (!out_dir.empty()) {
    save_checkpoint((std::filesystem::path(out_dir) / "checkpoint.txt").string(), net.params);
    write_json_file(std::filesystem::path(out_dir) / "report.json", report_json(report));
  }
  return report;
}

inline ExperimentConfig single_task_variant(ExperimentConfig cfg, TaskSelection task) {
  cfg.task = task;
  cfg.split = SplitScheme::full;
  cfg.inter = cfg.intra = false;
  cfg.weighting = Weighting::fixed;
  cfg.det_weight = cfg.seg_weight = 1.0;
  cfg.name += task == TaskSelection::det_only ? "-det-only" : "-seg-only";
  return cfg;
}

// Single-task upper bounds: det-only and seg-only runs with full labels and
// the same net/data/seed. Writes <out>/baseline_metrics.json when `out_dir`
// is non-empty.
inline TaskMetrics run_upper_bounds(const ExperimentConfig& cfg, const std::string& out_dir = {}) {
  namespace fs = std::filesystem;
  const auto sub = [&](const char* name) { return out_dir.empty() ? std::string() : (fs::path(out_dir) / name).string(); };
  const Report det = run_experiment(single_task_variant(cfg, TaskSelection::det_only), sub("det_only"));
  const Report seg = run_experiment(single_task_variant(cfg, TaskSelection::seg_only), sub("seg_only"));
  const TaskMetrics m{det.eval.det_accuracy, seg.eval.seg_iou};
  if (!out_dir.empty()) write_baseline_metrics((fs::path(out_dir) / "baseline_metrics.json").string(), m);
  return m;
}

}  // namespace fuller
