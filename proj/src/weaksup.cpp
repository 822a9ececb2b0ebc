#include "xmf/weaksup.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xmf/losses.hpp"

namespace xmf {

PointCloud cut_partial(const PointCloud& x, const Eigen::Vector3d& dir, double r, Rng& rng) {
  const Index n = x.rows();
  if (n == 0) return x;
  if (!(r >= 0.0 && r < 1.0)) throw ConfigError("removal fraction must lie in [0, 1)");
  const Index removed = std::min(n - 1, static_cast<Index>(std::floor(r * static_cast<double>(n))));
  if (removed == 0) return x;

  const Eigen::VectorXd proj = x * dir;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return proj(a) > proj(b); });
  std::vector<bool> drop(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < removed; ++i) drop[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    if (!drop[static_cast<std::size_t>(i)]) keep.push_back(i);
  const std::size_t survivors = keep.size();
  std::uniform_int_distribution<std::size_t> pick(0, survivors - 1);
  while (static_cast<Index>(keep.size()) < n) keep.push_back(keep[pick(rng)]);
  return take_rows(x, keep);
}

PointCloud resample_partial(const PointCloud& x, Rng& rng, const WeakOptions& opt) {
  opt.validate();
  std::normal_distribution<double> gauss;
  Eigen::Vector3d d;
  do {
    d = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
  } while (d.norm() < 1e-12);
  d.normalize();
  std::uniform_real_distribution<double> frac(opt.cut_min, opt.cut_max);
  const double r = opt.cut_max > opt.cut_min ? frac(rng) : opt.cut_min;
  return cut_partial(x, d, r, rng);
}

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x + y > 0.0 ? x / (x + y) : 0.5;
}

namespace {

std::vector<Index> random_subset(Index n, Index k, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

WeakSample mixup(const WeakSample& a, const WeakSample& b, double gamma, Rng& rng) {
  const Index n = a.input.rows();
  if (b.input.rows() != n || a.pseudo_gt.rows() != n || b.pseudo_gt.rows() != n) {
    throw SizeError("mixup needs equal cardinalities for inputs and pseudo ground truth");
  }
  if (a.image.height != b.image.height || a.image.width != b.image.width) {
    throw DimensionError("mixup needs images of equal size");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("mixup coefficient must lie in [0, 1]");
  const Index from_a = std::min(n, static_cast<Index>(std::floor(gamma * static_cast<double>(n))));
  const auto ia = random_subset(n, from_a, rng);
  const auto ib = random_subset(n, n - from_a, rng);

  WeakSample out;
  out.input.resize(n, 3);
  out.pseudo_gt.resize(n, 3);
  out.input << take_rows(a.input, ia), take_rows(b.input, ib);
  out.pseudo_gt << take_rows(a.pseudo_gt, ia), take_rows(b.pseudo_gt, ib);
  out.image = a.image;
  out.image.pixels = gamma * a.image.pixels + (1.0 - gamma) * b.image.pixels;
  return out;
}

void WeakBatch::validate() const {
  if (mixed.empty()) throw ContractError("weak batch is empty");
  if (gammas.size() != mixed.size()) throw ContractError("weak batch needs one mixup coefficient per sample");
  if (render_inputs.size() != render_images.size() || render_inputs.size() != render_cameras.size()) {
    throw ContractError("rendering half needs matching inputs, images and cameras");
  }
  const Index n = mixed.front().input.rows();
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    if (mixed[i].input.rows() != n || mixed[i].pseudo_gt.rows() != n) {
      throw SizeError("weak batch sample " + std::to_string(i) + " does not have " + std::to_string(n) + " points");
    }
    if (!(gammas[i] >= 0.0 && gammas[i] <= 1.0)) throw ContractError("mixup coefficient outside [0, 1]");
  }
}

WeakBatch build_weak_batch(const std::vector<const ViewSample*>& samples, Rng& rng, const WeakOptions& opt) {
  if (samples.empty()) throw ContractError("weak batch needs at least one sample");
  const std::size_t b = samples.size();
  std::vector<WeakSample> base(b);
  for (std::size_t i = 0; i < b; ++i) {
    base[i].pseudo_gt = samples[i]->partial;
    base[i].input = opt.resampling ? resample_partial(samples[i]->partial, rng, opt) : samples[i]->partial;
    base[i].image = samples[i]->image;
  }
  WeakBatch batch;
  for (std::size_t i = 0; i < b; ++i) {
    if (opt.mixup && b > 1) {
      const double gamma = sample_beta(opt.mix_a, opt.mix_b, rng);
      batch.mixed.push_back(mixup(base[i], base[(i + 1) % b], gamma, rng));
      batch.gammas.push_back(gamma);
    } else {
      batch.mixed.push_back(base[i]);
      batch.gammas.push_back(1.0);
    }
  }
  for (std::size_t i = 0; i < (b + 1) / 2; ++i) {
    batch.render_inputs.push_back(samples[i]->partial);
    batch.render_images.push_back(samples[i]->image);
    batch.render_cameras.push_back(samples[i]->camera);
  }
  return batch;
}

Tensor pc_loss(const XmfNet& model, const WeakBatch& batch, double beta) {
  batch.validate();
  Tensor total;
  for (std::size_t i = 0; i < batch.mixed.size(); ++i) {
    const auto& s = batch.mixed[i];
    Tensor l = chamfer_weighted(s.pseudo_gt, model.complete(s.input, s.image), beta);
    total = i == 0 ? l : add(total, l);
  }
  return scale(total, 1.0 / static_cast<double>(batch.mixed.size()));
}

Tensor img_loss(const XmfNet& model, const WeakBatch& batch, const LossConfig& loss, const RenderConfig& render,
                const WeakOptions& opt) {
  batch.validate();
  Tensor total;
  for (std::size_t i = 0; i < batch.mixed.size(); ++i) {
    const auto& s = batch.mixed[i];
    const Tensor pred = model.complete(s.input, s.image);
    Tensor l = opt.dcd ? dcd(s.pseudo_gt, pred, loss.alpha) : chamfer_l1(s.pseudo_gt, pred);
    total = i == 0 ? l : add(total, l);
  }
  total = scale(total, 1.0 / static_cast<double>(batch.mixed.size()));
  if (!opt.render || loss.lambda == 0.0 || batch.render_inputs.empty()) return total;

  Tensor rend;
  for (std::size_t i = 0; i < batch.render_inputs.size(); ++i) {
    const Tensor pred = model.complete(batch.render_inputs[i], batch.render_images[i]);
    Tensor l = render_loss(pred, batch.render_images[i], batch.render_cameras[i], render);
    rend = i == 0 ? l : add(rend, l);
  }
  return add(total, scale(rend, loss.lambda / static_cast<double>(batch.render_inputs.size())));
}

double step_pc(XmfNet& model, Adam& opt, const WeakBatch& batch, double beta) {
  return detail::apply_step(opt, pc_loss(model, batch, beta));
}

double step_img(XmfNet& model, Adam& opt, const WeakBatch& batch, const LossConfig& loss, const RenderConfig& render,
                const WeakOptions& weak) {
  return detail::apply_step(opt, img_loss(model, batch, loss, render, weak));
}

TrainResult train_weak(XmfNet& model, const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  const Index n = model.config().n_points;
  const std::vector<ViewSample> samples = load_views(data, cfg.train_split, Purpose::Train, n, cfg.max_views);
  if (samples.empty()) throw ConfigError("weak training needs a nonempty training split");

  Adam opt(model.parameters(), AdamOptions{cfg.schedule.base});
  TrainResult result;
  detail::training_loop(
      model, opt, data, cfg, samples.size(),
      [&](const std::vector<std::size_t>& idx, Rng& rng, std::vector<LogRow>& log) {
        std::vector<const ViewSample*> members;
        for (std::size_t i : idx) members.push_back(&samples[i]);
        const WeakBatch batch = build_weak_batch(members, rng, cfg.weak);
        log.push_back({0, "pc", step_pc(model, opt, batch, cfg.loss.beta)});
        if (cfg.max_steps > 0 && result.steps + 1 >= cfg.max_steps) return;
        log.push_back({0, "img", step_img(model, opt, batch, cfg.loss, cfg.render, cfg.weak)});
      },
      out, result);
  return result;
}

}  // namespace xmf
