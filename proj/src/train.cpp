#include "xmf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "json.hpp"

#include "xmf/weaksup.hpp"

namespace xmf {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Supervised:
      return "supervised";
    case Mode::Weak:
      return "weak";
    case Mode::Unimodal:
      return "unimodal";
  }
  return "supervised";
}

Mode mode_from_name(const std::string& name) {
  if (name == "supervised") return Mode::Supervised;
  if (name == "weak") return Mode::Weak;
  if (name == "unimodal") return Mode::Unimodal;
  throw ConfigError("unknown mode '" + name + "' (expected supervised, weak or unimodal)");
}

void WeakOptions::validate() const {
  if (!(cut_min >= 0.0 && cut_min <= cut_max && cut_max < 1.0)) {
    throw ConfigError("resampling cut range must satisfy 0 <= cut_min <= cut_max < 1");
  }
  if (!(mix_a > 0.0 && mix_b > 0.0)) throw ConfigError("mixup Beta parameters must be positive");
}

TrainConfig TrainConfig::paper() { return {}; }

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.batch = 8;
  c.epochs = 50;
  c.schedule.milestones = {6, 31};
  c.render.radius = 0.15;
  c.eval_every = 100;
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "toy") return toy();
  throw ConfigError("unknown scale preset '" + name + "' (expected paper or toy)");
}

void TrainConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (max_steps < 0 || max_views < 0 || eval_every < 0) {
    throw ConfigError("max_steps, max_views and eval_every must be non-negative");
  }
  if (!(schedule.base > 0.0) || !(schedule.factor > 0.0)) throw ConfigError("learning rate and factor must be positive");
  loss.validate();
  weak.validate();
  if (!(render.radius > 0.0)) throw ConfigError("render radius must be positive");
  if (render.splats_per_pixel < 1) throw ConfigError("splats_per_pixel must be positive");
  if (!(render.epsilon >= 0.0 && render.epsilon <= 1.0)) throw ConfigError("edge-mask epsilon must lie in [0, 1]");
}

namespace {

using nlohmann::json;

template <class T>
void read_key(const json& j, const std::string& key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("train config key '" + key + "': " + e.what());
  }
}

void check_keys(const json& j, const std::vector<std::string>& keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown " + where + " key '" + key + "'");
    }
  }
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "all") return Split::All;
  throw ConfigError("unknown split '" + s + "' (expected train, test or all)");
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text, TrainConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"mode", "batch", "epochs", "max_steps", "lr", "lr_milestones", "lr_factor", "loss", "render", "weak",
              "train_split", "eval_split", "max_views", "eval_every", "seed"},
             "train config");
  if (j.contains("mode")) {
    std::string m;
    read_key(j, "mode", m);
    c.mode = mode_from_name(m);
  }
  read_key(j, "batch", c.batch);
  read_key(j, "epochs", c.epochs);
  read_key(j, "max_steps", c.max_steps);
  read_key(j, "lr", c.schedule.base);
  read_key(j, "lr_milestones", c.schedule.milestones);
  read_key(j, "lr_factor", c.schedule.factor);
  read_key(j, "max_views", c.max_views);
  read_key(j, "eval_every", c.eval_every);
  read_key(j, "seed", c.seed);
  for (const char* key : {"train_split", "eval_split"}) {
    if (!j.contains(key)) continue;
    std::string s;
    read_key(j, key, s);
    (std::string(key) == "train_split" ? c.train_split : c.eval_split) = split_from_name(s);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"beta", "alpha", "lambda", "fscore_threshold"}, "loss");
    read_key(l, "beta", c.loss.beta);
    read_key(l, "alpha", c.loss.alpha);
    read_key(l, "lambda", c.loss.lambda);
    read_key(l, "fscore_threshold", c.loss.fscore_threshold);
  }
  if (j.contains("render")) {
    const auto& r = j.at("render");
    check_keys(r, {"radius", "splats_per_pixel", "z_near", "epsilon", "log_sigma", "edge_threshold",
                   "binarize_threshold"},
               "render");
    read_key(r, "radius", c.render.radius);
    read_key(r, "splats_per_pixel", c.render.splats_per_pixel);
    read_key(r, "z_near", c.render.z_near);
    read_key(r, "epsilon", c.render.epsilon);
    read_key(r, "log_sigma", c.render.log_sigma);
    read_key(r, "edge_threshold", c.render.edge_threshold);
    read_key(r, "binarize_threshold", c.render.binarize_threshold);
  }
  if (j.contains("weak")) {
    const auto& w = j.at("weak");
    check_keys(w, {"resampling", "mixup", "render", "dcd", "cut_min", "cut_max", "mix_a", "mix_b"}, "weak");
    read_key(w, "resampling", c.weak.resampling);
    read_key(w, "mixup", c.weak.mixup);
    read_key(w, "render", c.weak.render);
    read_key(w, "dcd", c.weak.dcd);
    read_key(w, "cut_min", c.weak.cut_min);
    read_key(w, "cut_max", c.weak.cut_max);
    read_key(w, "mix_a", c.weak.mix_a);
    read_key(w, "mix_b", c.weak.mix_b);
  }
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["mode"] = mode_name(c.mode);
  j["batch"] = c.batch;
  j["epochs"] = c.epochs;
  j["max_steps"] = c.max_steps;
  j["lr"] = c.schedule.base;
  j["lr_milestones"] = c.schedule.milestones;
  j["lr_factor"] = c.schedule.factor;
  j["loss"] = {{"beta", c.loss.beta},
               {"alpha", c.loss.alpha},
               {"lambda", c.loss.lambda},
               {"fscore_threshold", c.loss.fscore_threshold}};
  j["render"] = {{"radius", c.render.radius},
                 {"splats_per_pixel", c.render.splats_per_pixel},
                 {"z_near", c.render.z_near},
                 {"epsilon", c.render.epsilon},
                 {"log_sigma", c.render.log_sigma},
                 {"edge_threshold", c.render.edge_threshold},
                 {"binarize_threshold", c.render.binarize_threshold}};
  j["weak"] = {{"resampling", c.weak.resampling}, {"mixup", c.weak.mixup}, {"render", c.weak.render},
               {"dcd", c.weak.dcd},               {"cut_min", c.weak.cut_min}, {"cut_max", c.weak.cut_max},
               {"mix_a", c.weak.mix_a},           {"mix_b", c.weak.mix_b}};
  j["train_split"] = split_name(c.train_split);
  j["eval_split"] = split_name(c.eval_split);
  j["max_views"] = c.max_views;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Evaluation

void EvalSummary::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_metrics_csv(samples, dir / "metrics.csv");
  std::ofstream pv(dir / "per_view.csv");
  if (!pv) throw IngestionError("cannot write " + (dir / "per_view.csv").string());
  pv.precision(17);
  pv << "view,cd_e3,fscore\n";
  for (const auto& v : views) pv << v.view << ',' << v.cd_e3 << ',' << v.fscore << '\n';
  json j;
  j["mean_cd_e3"] = mean_cd_e3;
  j["mean_fscore"] = mean_fscore;
  j["evaluated"] = rows.size();
  if (!views.empty()) {
    j["worst_view_cd_e3"] = views.front().cd_e3;
    j["best_view_cd_e3"] = views.back().cd_e3;
  }
  std::ofstream(dir / "summary.json") << j.dump(2) << '\n';
}

EvalSummary evaluate(const XmfNet& model, const Dataset& data, Split split, double tau, Index max_views) {
  EvalSummary out;
  std::map<Index, std::pair<double, double>> per_view;
  std::map<Index, Index> view_count;
  const Index n = model.config().n_points;
  for (const auto& e : data.split(split)) {
    const PointCloud y = data.load_complete(e, Purpose::Eval, n);
    const Index views = max_views > 0 ? std::min(max_views, e.n_views) : e.n_views;
    MetricRow sample{e.id, 0.0, 0.0};
    for (Index v = 0; v < views; ++v) {
      const ViewSample s = data.load_view(e, v, Purpose::Eval, n);
      const PointCloud pred = model.complete(s.partial, s.image).value();
      const EvalMetrics m = eval_metrics(y, pred, tau);
      out.rows.push_back({e.id, v, m.cd_e3, m.fscore});
      sample.cd_e3 += m.cd_e3 / static_cast<double>(views);
      sample.fscore += m.fscore / static_cast<double>(views);
      per_view[v].first += m.cd_e3;
      per_view[v].second += m.fscore;
      ++view_count[v];
    }
    out.samples.push_back(sample);
  }
  for (const auto& [v, sums] : per_view) {
    const double c = static_cast<double>(view_count[v]);
    out.views.push_back({v, sums.first / c, sums.second / c});
  }
  std::stable_sort(out.views.begin(), out.views.end(),
                   [](const ViewMetric& a, const ViewMetric& b) { return a.cd_e3 > b.cd_e3; });
  for (const auto& r : out.rows) {
    out.mean_cd_e3 += r.cd_e3;
    out.mean_fscore += r.fscore;
  }
  if (!out.rows.empty()) {
    out.mean_cd_e3 /= static_cast<double>(out.rows.size());
    out.mean_fscore /= static_cast<double>(out.rows.size());
  }
  return out;
}

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IngestionError("cannot write " + path.string());
  f.precision(17);
  f << "step,loss_type,loss,eval_cd_e3,eval_fscore\n";
  for (const auto& r : log) {
    f << r.step << ',' << r.loss_type << ',' << r.loss << ',';
    if (r.evaluated) f << r.eval_cd_e3 << ',' << r.eval_fscore;
    else f << ',';
    f << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training

std::vector<ViewSample> load_views(const Dataset& data, Split split, Purpose purpose, Index n_points,
                                   Index max_views) {
  std::vector<ViewSample> out;
  for (const auto& e : data.split(split)) {
    const Index views = max_views > 0 ? std::min(max_views, e.n_views) : e.n_views;
    for (Index v = 0; v < views; ++v) out.push_back(data.load_view(e, v, purpose, n_points));
  }
  return out;
}

Tensor supervised_loss(const XmfNet& model, const std::vector<const ViewSample*>& batch,
                       const std::vector<const PointCloud*>& targets) {
  if (batch.empty() || batch.size() != targets.size()) {
    throw ContractError("supervised_loss needs one target per sample and a nonempty batch");
  }
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor l = chamfer_l1(*targets[i], model.complete(batch[i]->partial, batch[i]->image));
    total = i == 0 ? l : add(total, l);
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

namespace detail {

double apply_step(Adam& opt, const Tensor& loss) {
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("training loss diverged (non-finite value)");
  opt.zero_grad();
  ad::backward(loss);
  opt.step();
  return value;
}

void training_loop(XmfNet& model, Adam& opt, const Dataset& data, const TrainConfig& cfg, std::size_t n_samples,
                   const std::function<void(const std::vector<std::size_t>&, Rng&, std::vector<LogRow>&)>& run_batch,
                   const std::filesystem::path& out, TrainResult& result) {
  if (n_samples == 0) throw ConfigError("training split is empty");
  if (!out.empty()) std::filesystem::create_directories(out);
  const bool can_eval = !data.split(cfg.eval_split).empty();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Index next_eval = cfg.eval_every > 0 ? cfg.eval_every : -1;

  auto run_eval = [&](LogRow& row) {
    const EvalSummary s = evaluate(model, data, cfg.eval_split, cfg.loss.fscore_threshold, cfg.max_views);
    row.evaluated = true;
    row.eval_cd_e3 = s.mean_cd_e3;
    row.eval_fscore = s.mean_fscore;
    if (!result.has_eval || s.mean_cd_e3 < result.best_eval_cd_e3) {
      result.has_eval = true;
      result.best_eval_cd_e3 = s.mean_cd_e3;
      result.best_step = row.step;
      if (!out.empty()) save_checkpoint(model.parameters(), out / "best.ckpt");
    }
  };

  bool done = false;
  for (Index epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    opt.set_lr(cfg.schedule.at(static_cast<int>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < n_samples && !done; begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(n_samples, begin + static_cast<std::size_t>(cfg.batch));
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::size_t before = result.log.size();
      run_batch(batch, rng, result.log);
      for (std::size_t r = before; r < result.log.size(); ++r) {
        result.log[r].step = result.steps++;
        if (can_eval && next_eval > 0 && result.steps >= next_eval) {
          run_eval(result.log[r]);
          next_eval += cfg.eval_every;
        }
      }
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) done = true;
    }
  }
  if (can_eval && !result.log.empty() && !result.log.back().evaluated) run_eval(result.log.back());
  if (!out.empty()) {
    save_checkpoint(model.parameters(), out / "last.ckpt");
    if (!can_eval) save_checkpoint(model.parameters(), out / "best.ckpt");
    write_log_csv(result.log, out / "train_log.csv");
  }
}

}  // namespace detail

namespace {

void check_model_against(const XmfNet& model, const TrainConfig& cfg) {
  cfg.validate();
  const bool want_unimodal = cfg.mode == Mode::Unimodal;
  if (cfg.mode != Mode::Weak && model.config().unimodal != want_unimodal) {
    throw ConfigError(std::string("mode ") + mode_name(cfg.mode) + " needs a model with unimodal=" +
                      (want_unimodal ? "true" : "false"));
  }
}

}  // namespace

TrainResult train_supervised(XmfNet& model, const Dataset& data, const TrainConfig& cfg,
                             const std::filesystem::path& out) {
  check_model_against(model, cfg);
  const Index n = model.config().n_points;
  const std::vector<ViewSample> samples = load_views(data, cfg.train_split, Purpose::Train, n, cfg.max_views);
  std::map<std::string, PointCloud> completes;
  for (const auto& e : data.split(cfg.train_split)) completes.emplace(e.id, data.load_complete(e, Purpose::Train, n));

  Adam opt(model.parameters(), AdamOptions{cfg.schedule.base});
  TrainResult result;
  detail::training_loop(
      model, opt, data, cfg, samples.size(),
      [&](const std::vector<std::size_t>& idx, Rng&, std::vector<LogRow>& log) {
        std::vector<const ViewSample*> batch;
        std::vector<const PointCloud*> targets;
        for (std::size_t i : idx) {
          batch.push_back(&samples[i]);
          targets.push_back(&completes.at(samples[i].id));
        }
        const double loss = detail::apply_step(opt, supervised_loss(model, batch, targets));
        log.push_back({0, "cd", loss});
      },
      out, result);
  return result;
}

TrainResult train(XmfNet& model, const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out) {
  if (cfg.mode == Mode::Weak) return train_weak(model, data, cfg, out);
  return train_supervised(model, data, cfg, out);
}

}  // namespace xmf
