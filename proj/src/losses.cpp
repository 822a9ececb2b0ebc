#include "xmf/losses.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace xmf {

void LossConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(fscore_threshold > 0.0)) throw ConfigError("fscore threshold must be positive");
}

namespace {

void require_nonempty(const PointCloud& target, const Tensor& pred, const char* who) {
  if (target.rows() < 1 || pred.rows() < 1) {
    throw SizeError(std::string(who) + ": empty point cloud");
  }
  if (pred.cols() != 3) throw DimensionError(std::string(who) + ": prediction must be n x 3");
}

// Per-point distances for both directions:
//   forward[i]  = ||y_i - pred[w_i]||,  backward[j] = ||pred_j - y[z_j]||.
struct Matched {
  Tensor forward;
  Tensor backward;
};

Matched match(const PointCloud& target, const Tensor& pred) {
  const PointCloud p = pred.value();
  IndexList to_pred, to_target;
  std::vector<double> unused;
  nearest_neighbors(target, p, to_pred, unused);
  nearest_neighbors(p, target, to_target, unused);

  Tensor y(Matrix(target), false);
  Tensor fwd = ad::row_norm(ad::sub(ad::gather_rows(pred, to_pred), y));
  Tensor y_near(Matrix(take_rows(target, to_target)), false);
  Tensor bwd = ad::row_norm(ad::sub(pred, y_near));
  return {fwd, bwd};
}

}  // namespace

Tensor chamfer_weighted(const PointCloud& target, const Tensor& pred, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("chamfer_weighted: beta outside [0, 1]");
  require_nonempty(target, pred, "chamfer_weighted");
  auto [fwd, bwd] = match(target, pred);
  const double n_t = static_cast<double>(target.rows());
  const double n_p = static_cast<double>(pred.rows());
  return ad::add(ad::scale(ad::sum(fwd), (1.0 - beta) / (2.0 * n_t)),
                 ad::scale(ad::sum(bwd), beta / (2.0 * n_p)));
}

Tensor chamfer_l1(const PointCloud& target, const Tensor& pred) {
  require_nonempty(target, pred, "chamfer_l1");
  auto [fwd, bwd] = match(target, pred);
  const double n_t = static_cast<double>(target.rows());
  const double n_p = static_cast<double>(pred.rows());
  return ad::add(ad::scale(ad::sum(fwd), 1.0 / (2.0 * n_t)),
                 ad::scale(ad::sum(bwd), 1.0 / (2.0 * n_p)));
}

Tensor dcd(const PointCloud& target, const Tensor& pred, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("dcd: alpha must be positive");
  require_nonempty(target, pred, "dcd");
  auto [fwd, bwd] = match(target, pred);
  const double n_t = static_cast<double>(target.rows());
  const double n_p = static_cast<double>(pred.rows());
  // (1/2N) sum (1 - e/N) = 1/2 - sum(e) / (2 N^2)
  Tensor ef = ad::sum(ad::exp(ad::scale(fwd, -alpha)));
  Tensor eb = ad::sum(ad::exp(ad::scale(bwd, -alpha)));
  Tensor terms = ad::add(ad::scale(ef, -1.0 / (2.0 * n_t * n_t)),
                         ad::scale(eb, -1.0 / (2.0 * n_p * n_p)));
  return ad::add(terms, Tensor::scalar(1.0));
}

double chamfer_l1_value(const PointCloud& a, const PointCloud& b) {
  if (a.rows() < 1 || b.rows() < 1) throw SizeError("chamfer_l1_value: empty point cloud");
  IndexList idx;
  std::vector<double> da, db;
  nearest_neighbors(a, b, idx, da);
  nearest_neighbors(b, a, idx, db);
  double sa = 0.0, sb = 0.0;
  for (double d : da) sa += d;
  for (double d : db) sb += d;
  return sa / (2.0 * static_cast<double>(a.rows())) + sb / (2.0 * static_cast<double>(b.rows()));
}

FScore fscore(const PointCloud& target, const PointCloud& pred, double tau) {
  if (target.rows() < 1 || pred.rows() < 1) throw SizeError("fscore: empty point cloud");
  IndexList idx;
  std::vector<double> d_pred, d_target;
  nearest_neighbors(pred, target, idx, d_pred);
  nearest_neighbors(target, pred, idx, d_target);
  auto frac = [tau](const std::vector<double>& d) {
    std::size_t hit = 0;
    for (double v : d) hit += v < tau ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(d.size());
  };
  FScore out;
  out.precision = frac(d_pred);
  out.recall = frac(d_target);
  const double s = out.precision + out.recall;
  out.f = s > 0.0 ? 2.0 * out.precision * out.recall / s : 0.0;
  return out;
}

EvalMetrics eval_metrics(const PointCloud& target, const PointCloud& pred, double tau) {
  const auto t = normalize_unit_sphere(target).points;
  const auto p = normalize_unit_sphere(pred).points;
  EvalMetrics m;
  m.cd = chamfer_l1_value(t, p);
  m.cd_e3 = m.cd * 1e3;
  m.fscore = fscore(t, p, tau).f;
  return m;
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write metrics: " + path.string());
  out << "sample_id,cd_e3,fscore\n" << std::setprecision(10);
  for (const auto& r : rows) out << r.sample_id << ',' << r.cd_e3 << ',' << r.fscore << '\n';
}

}  // namespace xmf
