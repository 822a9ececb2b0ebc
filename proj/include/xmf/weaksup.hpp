#pragma once

#include <filesystem>
#include <vector>

#include "xmf/data.hpp"
#include "xmf/model.hpp"
#include "xmf/optim.hpp"
#include "xmf/render.hpp"
#include "xmf/train.hpp"

namespace xmf {

/// Removes the floor(r n) points with the largest projection on `dir` (ties
/// remove the lower index first), keeps the survivors in input order and
/// refills to n by drawing survivors with replacement.
PointCloud cut_partial(const PointCloud& x, const Eigen::Vector3d& dir, double r, Rng& rng);

/// cut_partial with a uniformly random direction and r ~ U[cut_min, cut_max].
PointCloud resample_partial(const PointCloud& x, Rng& rng, const WeakOptions& opt = {});

/// Beta(a, b) draw from two Gamma variates.
double sample_beta(double a, double b, Rng& rng);

struct WeakSample {
  PointCloud input;      // network input
  PointCloud pseudo_gt;  // target of the point-cloud losses
  RgbImage image;
};

/// floor(gamma n) random rows of A followed by the remaining count from B;
/// the pseudo ground truth uses the same row sets. Chosen rows keep their
/// relative order. The image is gamma I_A + (1 - gamma) I_B.
WeakSample mixup(const WeakSample& a, const WeakSample& b, double gamma, Rng& rng);

struct WeakBatch {
  std::vector<WeakSample> mixed;
  std::vector<double> gammas;
  // Rendering half: original partials with their own images and cameras.
  std::vector<PointCloud> render_inputs;
  std::vector<RgbImage> render_images;
  std::vector<Camera> render_cameras;

  void validate() const;
};

/// Sample i is resampled and mixed with sample (i + 1) mod B; the first
/// ceil(B / 2) samples form the rendering half.
WeakBatch build_weak_batch(const std::vector<const ViewSample*>& samples, Rng& rng, const WeakOptions& opt);

/// Batch mean of chamfer_weighted(pseudo_gt, complete(input), beta).
Tensor pc_loss(const XmfNet& model, const WeakBatch& batch, double beta);

/// Batch mean of dcd(pseudo_gt, complete(input), alpha) (L1 Chamfer when
/// opt.dcd is off), plus lambda times the mean render_loss over the
/// rendering half when opt.render is on and lambda > 0.
Tensor img_loss(const XmfNet& model, const WeakBatch& batch, const LossConfig& loss, const RenderConfig& render,
                const WeakOptions& opt);

/// One optimizer update on pc_loss; returns the loss before the update.
double step_pc(XmfNet& model, Adam& opt, const WeakBatch& batch, double beta);
/// One optimizer update on img_loss; returns the loss before the update.
double step_img(XmfNet& model, Adam& opt, const WeakBatch& batch, const LossConfig& loss, const RenderConfig& render,
                const WeakOptions& weak);

/// Weakly-supervised training. Each minibatch gives a step_pc followed by a
/// step_img, so even steps are "pc" and odd steps "img". Training reads use
/// Purpose::Train and never open complete clouds; evaluation reads use
/// Purpose::Eval.
TrainResult train_weak(XmfNet& model, const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out);

}  // namespace xmf
