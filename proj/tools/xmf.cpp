#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmf/data.hpp"
#include "xmf/model.hpp"
#include "xmf/render.hpp"
#include "xmf/train.hpp"

namespace fs = std::filesystem;
using namespace xmf;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Flags {
  std::string config;
  std::string mode;
  std::string scale = "toy";
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::optional<Index> views;
  std::optional<Index> shapes;
  std::optional<double> beta, alpha, lambda, epsilon_mask;
  std::optional<Index> steps, epochs, batch;
  std::optional<double> lr;
  std::string sample;
  Index view = 0;
  std::string render_camera;
  std::string input;
  bool no_render = false, no_dcd = false, no_mixup = false, no_resampling = false;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IngestionError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IngestionError("cannot write " + p.string());
  out << text << '\n';
}

/// Run file: {"scale", "model", "train", "data"}, every section optional.
json read_run_file(const std::string& path) {
  if (path.empty()) return json::object();
  const std::string text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "scale" && key != "model" && key != "train" && key != "data") {
      throw ConfigError(path + ": unknown key '" + key + "' (expected scale, model, train, data)");
    }
  }
  return j;
}

std::string scale_of(const json& run, const Flags& f) {
  if (!run.contains("scale")) return f.scale;
  if (!run.at("scale").is_string()) throw ConfigError(f.config + ": scale must be a string");
  return run.at("scale").get<std::string>();
}

struct Resolved {
  std::string scale;
  ModelConfig model;
  TrainConfig train;
};

Resolved resolve(const Flags& f, const std::optional<DataConfig>& data_cfg) {
  const json run = read_run_file(f.config);
  Resolved r;
  r.scale = scale_of(run, f);
  r.model = ModelConfig::preset(r.scale);
  r.train = TrainConfig::preset(r.scale);
  if (data_cfg) r.train.render = data_cfg->render;
  if (run.contains("model")) r.model = model_config_from_json(run.at("model").dump(), r.model);
  if (run.contains("train")) r.train = train_config_from_json(run.at("train").dump(), r.train);
  if (!f.mode.empty()) r.train.mode = mode_from_name(f.mode);
  if (r.train.mode == Mode::Unimodal) r.model.unimodal = true;
  if (f.seed) {
    r.train.seed = *f.seed;
    r.model.init_seed = *f.seed;
  }
  if (f.beta) r.train.loss.beta = *f.beta;
  if (f.alpha) r.train.loss.alpha = *f.alpha;
  if (f.lambda) r.train.loss.lambda = *f.lambda;
  if (f.epsilon_mask) r.train.render.epsilon = *f.epsilon_mask;
  if (f.steps) r.train.max_steps = *f.steps;
  if (f.epochs) r.train.epochs = *f.epochs;
  if (f.batch) r.train.batch = *f.batch;
  if (f.lr) r.train.schedule.base = *f.lr;
  if (f.views) r.train.max_views = *f.views;
  if (f.no_render) r.train.weak.render = false;
  if (f.no_dcd) r.train.weak.dcd = false;
  if (f.no_mixup) r.train.weak.mixup = false;
  if (f.no_resampling) r.train.weak.resampling = false;
  r.model.validate();
  r.train.validate();
  return r;
}

std::string resolved_json(const Resolved& r) {
  json j;
  j["scale"] = r.scale;
  j["model"] = json::parse(model_config_to_json(r.model));
  j["train"] = json::parse(train_config_to_json(r.train));
  return j.dump(2);
}

void check_data_matches(const Dataset& ds, const ModelConfig& m) {
  if (!ds.config()) return;
  if (ds.config()->n_points != m.n_points || ds.config()->image_size != m.image_size) {
    throw SchemaError("dataset " + ds.root().string() + " has n_points=" + std::to_string(ds.config()->n_points) +
                      ", image_size=" + std::to_string(ds.config()->image_size) + " but the model expects " +
                      std::to_string(m.n_points) + ", " + std::to_string(m.image_size));
  }
}

void load_model_checkpoint(XmfNet& net, const fs::path& path) {
  try {
    load_checkpoint(net.parameters(), path);
  } catch (const SchemaError& e) {
    throw SchemaError("checkpoint " + path.string() + " (format XMF1) does not fit the configured model: " + e.what());
  }
}

/// Config next to a checkpoint, used when --config is absent.
std::string config_for_checkpoint(const Flags& f) {
  if (!f.config.empty() || f.checkpoint.empty()) return f.config;
  const fs::path guess = fs::path(f.checkpoint).parent_path() / "config.json";
  return fs::exists(guess) ? guess.string() : std::string{};
}

int cmd_gen_data(const Flags& f) {
  if (f.out.empty()) throw ConfigError("gen-data needs --out");
  const json run = read_run_file(f.config);
  const std::string scale = scale_of(run, f);
  const ModelConfig model = ModelConfig::preset(scale);
  DataConfig cfg;
  cfg.n_points = model.n_points;
  cfg.image_size = model.image_size;
  cfg.render.radius = TrainConfig::preset(scale).render.radius;
  if (run.contains("data")) {
    json base = json::parse(data_config_to_json(cfg));
    base.merge_patch(run.at("data"));
    try {
      cfg = data_config_from_json(base.dump());
    } catch (const SchemaError& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
  }
  if (f.shapes) cfg.shapes = *f.shapes;
  if (f.views) cfg.views = *f.views;
  if (f.seed) cfg.seed = *f.seed;
  if (f.epsilon_mask) cfg.render.epsilon = *f.epsilon_mask;
  cfg.validate();
  const auto entries = generate_dataset(f.out, cfg);
  std::size_t test = 0;
  for (const auto& e : entries) test += split_of(e.id) == Split::Test ? 1 : 0;
  std::cout << "wrote " << entries.size() << " shapes x " << cfg.views << " views to " << f.out << " ("
            << entries.size() - test << " train, " << test << " test)\n";
  return kOk;
}

int cmd_train(const Flags& f) {
  if (f.data.empty() || f.out.empty()) throw ConfigError("train needs --data and --out");
  Dataset ds = Dataset::open(f.data, std::make_shared<AccessLog>());
  const Resolved r = resolve(f, ds.config());
  check_data_matches(ds, r.model);
  fs::create_directories(f.out);
  write_text(fs::path(f.out) / "config.json", resolved_json(r));

  auto log = std::make_shared<AccessLog>();
  ds = Dataset::open(f.data, log);
  XmfNet net(r.model);
  if (!f.checkpoint.empty()) load_model_checkpoint(net, f.checkpoint);
  const TrainResult res = train(net, ds, r.train, f.out);
  log->write_csv(fs::path(f.out) / "access_log.csv");
  std::cout << mode_name(r.train.mode) << " training: " << res.steps << " steps, final loss "
            << (res.log.empty() ? 0.0 : res.log.back().loss);
  if (res.has_eval) std::cout << ", best eval CD x1e3 " << res.best_eval_cd_e3 << " at step " << res.best_step;
  std::cout << "\ncomplete-cloud reads during training: " << log->ground_truth_reads(Purpose::Train) << "\n";
  return kOk;
}

int cmd_eval(const Flags& f) {
  if (f.data.empty() || f.checkpoint.empty() || f.out.empty()) throw ConfigError("eval needs --data, --checkpoint and --out");
  Dataset ds = Dataset::open(f.data);
  Flags g = f;
  g.config = config_for_checkpoint(f);
  const Resolved r = resolve(g, ds.config());
  check_data_matches(ds, r.model);
  XmfNet net(r.model);
  load_model_checkpoint(net, f.checkpoint);
  const EvalSummary s = evaluate(net, ds, r.train.eval_split, r.train.loss.fscore_threshold, f.views.value_or(0));
  s.write(f.out);
  write_text(fs::path(f.out) / "config.json", resolved_json(r));
  std::cout << "evaluated " << s.rows.size() << " views: mean CD x1e3 " << s.mean_cd_e3 << ", F-score "
            << s.mean_fscore << "\n";
  if (!s.views.empty()) {
    std::cout << "worst view " << s.views.front().view << " (" << s.views.front().cd_e3 << "), best view "
              << s.views.back().view << " (" << s.views.back().cd_e3 << ")\n";
  }
  return kOk;
}

int cmd_complete(const Flags& f) {
  if (f.data.empty() || f.checkpoint.empty() || f.out.empty() || f.sample.empty()) {
    throw ConfigError("complete needs --data, --sample, --checkpoint and --out");
  }
  Dataset ds = Dataset::open(f.data);
  Flags g = f;
  g.config = config_for_checkpoint(f);
  const Resolved r = resolve(g, ds.config());
  check_data_matches(ds, r.model);
  const Entry* entry = nullptr;
  for (const auto& e : ds.entries())
    if (e.id == f.sample) entry = &e;
  if (!entry) throw IngestionError("sample '" + f.sample + "' not found in " + f.data);
  XmfNet net(r.model);
  load_model_checkpoint(net, f.checkpoint);
  const ViewSample s = ds.load_view(*entry, f.view, Purpose::Eval, r.model.n_points);
  const PointCloud pred = net.complete(s.partial, s.image).value();
  const fs::path out(f.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_pcf(pred, out);
  write_text(fs::path(out).replace_extension(".config.json"), resolved_json(r));
  std::cout << "wrote " << pred.rows() << " points to " << out.string() << "\n";
  if (!f.render_camera.empty()) {
    const Camera cam = read_camera(f.render_camera);
    const fs::path pgm = fs::path(out).replace_extension(".pgm");
    write_pgm(render_silhouette(Tensor(pred), cam, r.train.render).value(), pgm);
    std::cout << "wrote " << pgm.string() << "\n";
  }
  return kOk;
}

int cmd_render(const Flags& f) {
  if (f.input.empty() || f.render_camera.empty() || f.out.empty()) {
    throw ConfigError("render needs --input, --camera and --out");
  }
  const Resolved r = resolve(f, std::nullopt);
  const PointCloud pc = read_pcf(f.input);
  const Camera cam = read_camera(f.render_camera);
  write_pgm(render_silhouette(Tensor(pc), cam, r.train.render).value(), f.out);
  std::cout << "wrote " << f.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal point cloud completion"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* c) {
    c->add_option("--config", f.config, "run config JSON {scale, model, train, data}");
    c->add_option("--scale", f.scale, "preset: paper or toy")->check(CLI::IsMember({"paper", "toy"}));
    c->add_option("--seed", f.seed, "seed for data, initialization and training");
  };
  auto loss_flags = [&f](CLI::App* c) {
    c->add_option("--beta", f.beta, "weighted Chamfer direction weight");
    c->add_option("--alpha", f.alpha, "density-aware Chamfer temperature");
    c->add_option("--lambda", f.lambda, "rendering loss weight");
    c->add_option("--epsilon-mask", f.epsilon_mask, "edge-mask value on silhouette edges");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  gen->add_option("--out", f.out, "output directory")->required();
  gen->add_option("--shapes", f.shapes, "number of shapes");
  gen->add_option("--views", f.views, "views per shape");
  gen->add_option("--epsilon-mask", f.epsilon_mask, "edge-mask value stored with the render settings");

  auto* tr = app.add_subcommand("train", "train a model");
  common(tr);
  loss_flags(tr);
  tr->add_option("--mode", f.mode, "supervised, weak or unimodal")
      ->check(CLI::IsMember({"supervised", "weak", "unimodal"}));
  tr->add_option("--data", f.data, "dataset directory")->required();
  tr->add_option("--out", f.out, "output directory")->required();
  tr->add_option("--checkpoint", f.checkpoint, "initial parameters");
  tr->add_option("--views", f.views, "views per shape used for training");
  tr->add_option("--steps", f.steps, "stop after this many optimizer steps");
  tr->add_option("--epochs", f.epochs, "epochs");
  tr->add_option("--batch", f.batch, "minibatch size");
  tr->add_option("--lr", f.lr, "initial learning rate");
  tr->add_flag("--no-render", f.no_render, "weak mode without the rendering loss");
  tr->add_flag("--no-dcd", f.no_dcd, "weak mode with plain Chamfer in the image step");
  tr->add_flag("--no-mixup", f.no_mixup, "weak mode without mixup");
  tr->add_flag("--no-resampling", f.no_resampling, "weak mode without resampling");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  common(ev);
  loss_flags(ev);
  ev->add_option("--mode", f.mode, "supervised, weak or unimodal")
      ->check(CLI::IsMember({"supervised", "weak", "unimodal"}));
  ev->add_option("--data", f.data, "dataset directory")->required();
  ev->add_option("--checkpoint", f.checkpoint, "parameters")->required();
  ev->add_option("--out", f.out, "output directory")->required();
  ev->add_option("--views", f.views, "views per shape to evaluate");

  auto* co = app.add_subcommand("complete", "complete one sample");
  common(co);
  co->add_option("--mode", f.mode, "supervised, weak or unimodal")
      ->check(CLI::IsMember({"supervised", "weak", "unimodal"}));
  co->add_option("--data", f.data, "dataset directory")->required();
  co->add_option("--sample", f.sample, "sample id")->required();
  co->add_option("--view", f.view, "view index");
  co->add_option("--checkpoint", f.checkpoint, "parameters")->required();
  co->add_option("--out", f.out, "output PCF file")->required();
  co->add_option("--render", f.render_camera, "camera JSON; also writes a PGM render next to the output");

  auto* re = app.add_subcommand("render", "render a point cloud");
  common(re);
  re->add_option("--input", f.input, "PCF file")->required();
  re->add_option("--camera", f.render_camera, "camera JSON")->required();
  re->add_option("--out", f.out, "output PGM file")->required();
  re->add_option("--epsilon-mask", f.epsilon_mask, "unused by plain renders");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(f);
    if (tr->parsed()) return cmd_train(f);
    if (ev->parsed()) return cmd_eval(f);
    if (co->parsed()) return cmd_complete(f);
    if (re->parsed()) return cmd_render(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kNumeric;
  } catch (const IngestionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const SchemaError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
