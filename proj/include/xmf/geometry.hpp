#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "xmf/errors.hpp"

namespace xmf {

using Index = Eigen::Index;

template <class Scalar>
using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// n x 3 object-space coordinates.
using PointCloud = Points<double>;

using Rng = std::mt19937_64;

using NeighborMatrix = Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row i lists the k nearest sites to site i (self excluded), nearest first.
struct KnnGraph {
  Eigen::Index k = 0;
  NeighborMatrix neighbors;

  Eigen::Index size() const { return neighbors.rows(); }
};

/// Exact brute-force k nearest neighbours over the rows of `sites` (any
/// column count). Distance ties go to the lower index.
template <class Derived>
KnnGraph knn(const Eigen::MatrixBase<Derived>& sites, Eigen::Index k) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = sites.rows();
  if (k < 1 || n <= k) {
    throw SizeError("knn: need more than k=" + std::to_string(k) + " sites, got " +
                    std::to_string(n));
  }
  KnnGraph graph;
  graph.k = k;
  graph.neighbors.resize(n, k);
  std::vector<std::pair<Scalar, Eigen::Index>> cand(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cand[c++] = {(sites.row(j) - sites.row(i)).squaredNorm(), j};
    }
    // pair ordering compares distance first, then index.
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (Eigen::Index r = 0; r < k; ++r) graph.neighbors(i, r) = cand[static_cast<std::size_t>(r)].second;
  }
  return graph;
}

/// Greedy farthest-point selection of m rows starting from `seed_index`.
/// Ties go to the lower index.
template <class Derived>
std::vector<Eigen::Index> fps(const Eigen::MatrixBase<Derived>& pts, Eigen::Index m,
                              Eigen::Index seed_index = 0) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = pts.rows();
  if (m > n) {
    throw SizeError("fps: cannot select " + std::to_string(m) + " of " + std::to_string(n) +
                    " points");
  }
  std::vector<Eigen::Index> picked;
  if (m <= 0) return picked;
  if (seed_index < 0 || seed_index >= n) throw IndexError("fps: seed index out of range");
  picked.reserve(static_cast<std::size_t>(m));
  std::vector<Scalar> dist(static_cast<std::size_t>(n), std::numeric_limits<Scalar>::infinity());
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  Eigen::Index cur = seed_index;
  for (Eigen::Index s = 0; s < m; ++s) {
    picked.push_back(cur);
    taken[static_cast<std::size_t>(cur)] = 1;
    Eigen::Index best = -1;
    Scalar best_d = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      const Scalar d = (pts.row(j) - pts.row(cur)).squaredNorm();
      auto& dj = dist[static_cast<std::size_t>(j)];
      if (d < dj) dj = d;
      if (!taken[static_cast<std::size_t>(j)] && dj > best_d) {
        best_d = dj;
        best = j;
      }
    }
    cur = best;
  }
  return picked;
}

template <class Scalar>
struct Normalized {
  Points<Scalar> points;
  Eigen::Matrix<Scalar, 1, 3> centroid;
  Scalar scale;
};

/// Centers on the centroid and scales so the farthest point sits at radius 1.
/// A cloud whose points all coincide keeps scale 1.
template <class Scalar>
Normalized<Scalar> normalize_unit_sphere(const Points<Scalar>& pc) {
  if (pc.rows() < 1) throw SizeError("normalize_unit_sphere: empty cloud");
  Normalized<Scalar> out;
  out.centroid = pc.colwise().mean();
  out.points = pc.rowwise() - out.centroid;
  const Scalar radius = out.points.rowwise().norm().maxCoeff();
  out.scale = radius > Scalar(0) ? Scalar(1) / radius : Scalar(1);
  out.points *= out.scale;
  return out;
}

/// Index plan for resample(): without replacement when m <= n, otherwise a
/// shuffled copy of all indices followed by a with-replacement fill.
inline std::vector<Eigen::Index> resample_indices(Eigen::Index n, Eigen::Index m, Rng& rng) {
  if (n < 1) throw SizeError("resample: empty cloud");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  if (m <= n) {
    idx.resize(static_cast<std::size_t>(std::max<Eigen::Index>(m, 0)));
    return idx;
  }
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  while (static_cast<Eigen::Index>(idx.size()) < m) idx.push_back(pick(rng));
  return idx;
}

template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Derived::ColsAtCompileTime, Eigen::RowMajor>
take_rows(const Eigen::MatrixBase<Derived>& m, const std::vector<Eigen::Index>& idx) {
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Derived::ColsAtCompileTime,
                Eigen::RowMajor>
      out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

template <class Scalar>
Points<Scalar> resample(const Points<Scalar>& pc, Eigen::Index m, Rng& rng) {
  return take_rows(pc, resample_indices(pc.rows(), m, rng));
}

/// Nearest row of `targets` for every row of `queries` (ties to lower index)
/// and the Euclidean distance to it.
template <class Scalar>
void nearest_neighbors(const Points<Scalar>& queries, const Points<Scalar>& targets,
                       std::vector<Eigen::Index>& index, std::vector<Scalar>& distance) {
  if (targets.rows() < 1) throw SizeError("nearest_neighbors: empty target cloud");
  index.assign(static_cast<std::size_t>(queries.rows()), 0);
  distance.assign(static_cast<std::size_t>(queries.rows()), 0);
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    Eigen::Index arg = 0;
    for (Eigen::Index j = 0; j < targets.rows(); ++j) {
      const Scalar d = (targets.row(j) - queries.row(i)).squaredNorm();
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    index[static_cast<std::size_t>(i)] = arg;
    distance[static_cast<std::size_t>(i)] = std::sqrt(best);
  }
}

/// Rounds every coordinate through 32-bit float, matching what a PCF file
/// stores.
inline PointCloud quantize_f32(const PointCloud& pc) {
  return pc.cast<float>().cast<double>();
}

// PCF file: "PCF1", u32 LE count, count x 3 f32 LE.
void write_pcf(const PointCloud& pc, const std::filesystem::path& path);
PointCloud read_pcf(const std::filesystem::path& path);

}  // namespace xmf
