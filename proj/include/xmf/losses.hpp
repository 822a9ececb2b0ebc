#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xmf/autodiff.hpp"
#include "xmf/geometry.hpp"

namespace xmf {

struct LossConfig {
  double beta = 0.75;               // weighted-CD direction weight
  double alpha = 40.0;              // density-aware CD temperature
  double lambda = 0.15;             // rendering-loss weight
  double fscore_threshold = 0.001;  // Euclidean, on unit-sphere-normalized clouds

  void validate() const;
};

// All losses take the reference cloud Y as a constant and the prediction as
// a tensor (n x 3); gradients flow to the prediction only. Nearest-neighbour
// assignments use the lower index on ties.

/// (1/2|Y|) sum_y min ||y - yhat|| + (1/2|Yhat|) sum_yhat min ||yhat - y||.
Tensor chamfer_l1(const PointCloud& target, const Tensor& pred);

/// Same two directions weighted (1 - beta) and beta.
Tensor chamfer_weighted(const PointCloud& target, const Tensor& pred, double beta);

/// Density-aware term of the image step:
/// (1/2N) sum_y (1 - exp(-alpha ||y - w||) / N) + the symmetric term,
/// with w, z the nearest points in the other cloud.
Tensor dcd(const PointCloud& target, const Tensor& pred, double alpha);

/// Plain-double L1 Chamfer, same definition as chamfer_l1.
double chamfer_l1_value(const PointCloud& a, const PointCloud& b);

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

/// Precision: fraction of `pred` strictly within tau of `target`; recall is
/// the symmetric fraction. F = 0 when both are 0.
FScore fscore(const PointCloud& target, const PointCloud& pred, double tau);

struct EvalMetrics {
  double cd = 0.0;     // L1 Chamfer per point
  double cd_e3 = 0.0;  // cd * 1e3
  double fscore = 0.0;
};

/// Normalizes both clouds to the unit sphere, then reports CD and F-score.
EvalMetrics eval_metrics(const PointCloud& target, const PointCloud& pred, double tau = 0.001);

struct MetricRow {
  std::string sample_id;
  double cd_e3 = 0.0;
  double fscore = 0.0;
};

/// CSV with header "sample_id,cd_e3,fscore".
void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);

}  // namespace xmf
