#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xmf/data.hpp"
#include "xmf/losses.hpp"
#include "xmf/model.hpp"
#include "xmf/optim.hpp"
#include "xmf/render.hpp"

namespace xmf {

enum class Mode { Supervised, Weak, Unimodal };

std::string mode_name(Mode m);
/// "supervised", "weak" or "unimodal"; ConfigError otherwise.
Mode mode_from_name(const std::string& name);

struct WeakOptions {
  bool resampling = true;
  bool mixup = true;
  bool render = true;  // rendering term of the image step
  bool dcd = true;     // off: the image step uses plain L1 Chamfer
  double cut_min = 0.1;  // removal fraction range of resample_partial
  double cut_max = 0.4;
  double mix_a = 1.0;  // Beta(a, b) mixup coefficients
  double mix_b = 1.0;

  void validate() const;
};

struct TrainConfig {
  Mode mode = Mode::Supervised;
  Index batch = 128;
  Index epochs = 200;
  Index max_steps = 0;  // optimizer steps; 0 means run all epochs
  StepSchedule schedule;
  LossConfig loss;
  RenderConfig render;
  WeakOptions weak;
  Split train_split = Split::Train;
  Split eval_split = Split::Test;
  Index max_views = 0;   // views used per shape; 0 means all
  Index eval_every = 0;  // steps between evaluations; 0 means only at the end
  std::uint64_t seed = 0;

  static TrainConfig paper();
  static TrainConfig toy();
  /// "paper" or "toy"; ConfigError otherwise.
  static TrainConfig preset(const std::string& name);

  void validate() const;
};

/// Overlays the keys present in `json` onto `base`; unknown keys and type
/// mismatches throw ConfigError.
TrainConfig train_config_from_json(const std::string& json, TrainConfig base = TrainConfig::paper());
std::string train_config_to_json(const TrainConfig& cfg);

struct EvalRow {
  std::string sample_id;
  Index view = 0;
  double cd_e3 = 0.0;
  double fscore = 0.0;
};

struct ViewMetric {
  Index view = 0;
  double cd_e3 = 0.0;
  double fscore = 0.0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;        // one per (sample, view)
  std::vector<MetricRow> samples;   // averaged over views
  std::vector<ViewMetric> views;    // averaged over samples, worst to best
  double mean_cd_e3 = 0.0;
  double mean_fscore = 0.0;

  /// Writes metrics.csv, per_view.csv and summary.json into `dir`.
  void write(const std::filesystem::path& dir) const;
};

/// Completes every (sample, view) of the split and scores it against the
/// complete cloud. All reads are tagged Purpose::Eval.
EvalSummary evaluate(const XmfNet& model, const Dataset& data, Split split, double tau,
                     Index max_views = 0);

struct LogRow {
  Index step = 0;
  std::string loss_type;
  double loss = 0.0;
  bool evaluated = false;
  double eval_cd_e3 = 0.0;
  double eval_fscore = 0.0;
};

/// CSV with header "step,loss_type,loss,eval_cd_e3,eval_fscore"; the eval
/// columns are empty on steps without evaluation.
void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path);

struct TrainResult {
  std::vector<LogRow> log;
  Index steps = 0;
  bool has_eval = false;
  double best_eval_cd_e3 = 0.0;
  Index best_step = 0;
};

/// Loads the views used for training: `split` entries, first `max_views`
/// views each (0 for all), expected cardinality `n_points`.
std::vector<ViewSample> load_views(const Dataset& data, Split split, Purpose purpose, Index n_points,
                                   Index max_views);

/// Mean L1 Chamfer of complete() against the ground truth over the batch.
Tensor supervised_loss(const XmfNet& model, const std::vector<const ViewSample*>& batch,
                       const std::vector<const PointCloud*>& targets);

/// Supervised (or unimodal) training against complete clouds. Writes
/// train_log.csv, best.ckpt and last.ckpt into `out` when it is non-empty.
TrainResult train_supervised(XmfNet& model, const Dataset& data, const TrainConfig& cfg,
                             const std::filesystem::path& out);

/// Dispatches on cfg.mode.
TrainResult train(XmfNet& model, const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out);

namespace detail {

/// Shared loop: shuffles the samples each epoch, hands out minibatches and
/// handles the schedule, evaluation, logging and checkpoints. `run_batch`
/// performs one or more optimizer steps on a minibatch and appends one log
/// row per step.
void training_loop(XmfNet& model, Adam& opt, const Dataset& data, const TrainConfig& cfg, std::size_t n_samples,
                   const std::function<void(const std::vector<std::size_t>&, Rng&, std::vector<LogRow>&)>& run_batch,
                   const std::filesystem::path& out, TrainResult& result);

/// Backward pass and optimizer update. Throws NumericError on a non-finite loss.
double apply_step(Adam& opt, const Tensor& loss);

}  // namespace detail

}  // namespace xmf
