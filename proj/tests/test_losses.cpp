#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "xmf/losses.hpp"

using namespace xmf;
using xmf::testing::check_gradient;
using xmf::testing::random_matrix;

namespace {

PointCloud cloud(Index n, std::uint64_t seed) { return random_matrix(n, 3, seed); }

// Direct transcription of the one-sided nearest distance sum.
double one_sided(const PointCloud& from, const PointCloud& to) {
  double s = 0.0;
  for (Index i = 0; i < from.rows(); ++i) {
    double best = 1e300;
    for (Index j = 0; j < to.rows(); ++j) best = std::min(best, (from.row(i) - to.row(j)).norm());
    s += best;
  }
  return s;
}

PointCloud single(double x, double y, double z) {
  PointCloud p(1, 3);
  p << x, y, z;
  return p;
}

}  // namespace

TEST_CASE("chamfer_l1 closed forms") {
  auto a = cloud(30, 1);
  CHECK(chamfer_l1(a, Tensor(Matrix(a))).item() == 0.0);
  CHECK(chamfer_l1(single(0, 0, 0), Tensor(Matrix(single(1, 0, 0)))).item() == doctest::Approx(1.0));
  auto b = cloud(30, 2);
  CHECK(chamfer_l1(a, Tensor(Matrix(b))).item() ==
        doctest::Approx(chamfer_l1(b, Tensor(Matrix(a))).item()).epsilon(1e-14));
  const double oracle = one_sided(a, b) / 60.0 + one_sided(b, a) / 60.0;
  CHECK(chamfer_l1(a, Tensor(Matrix(b))).item() == doctest::Approx(oracle).epsilon(1e-13));
  CHECK(chamfer_l1_value(a, b) == doctest::Approx(oracle).epsilon(1e-13));
  CHECK_THROWS_AS(chamfer_l1(PointCloud(0, 3), Tensor(Matrix(a))), SizeError);
}

TEST_CASE("chamfer is zero iff mutual subsets") {
  auto a = cloud(10, 3);
  PointCloud dup(20, 3);
  dup << a, a;
  CHECK(chamfer_l1_value(a, dup) == 0.0);
  PointCloud moved = a;
  moved(4, 1) += 1e-3;
  CHECK(chamfer_l1_value(a, moved) > 0.0);
}

TEST_CASE("chamfer_weighted") {
  auto y = single(0, 0, 0);
  Tensor yh(Matrix(single(1, 0, 0)));
  CHECK(chamfer_weighted(y, yh, 0.25).item() == doctest::Approx(0.5));
  auto a = cloud(25, 4), b = cloud(25, 5);
  Tensor bt{Matrix(b)};
  // As written, beta = 1/2 halves both directions of the plain Chamfer.
  CHECK(chamfer_weighted(a, bt, 0.5).item() ==
        doctest::Approx(0.5 * chamfer_l1(a, bt).item()).epsilon(1e-14));
  CHECK(chamfer_weighted(a, bt, 1.0).item() == doctest::Approx(one_sided(b, a) / 50.0));
  CHECK_THROWS_AS(chamfer_weighted(a, bt, 1.5), ConfigError);
}

TEST_CASE("dcd") {
  auto a = cloud(40, 6);
  for (double alpha : {1.0, 40.0, 1000.0}) {
    CHECK(dcd(a, Tensor(Matrix(a)), alpha).item() == doctest::Approx(1.0 - 1.0 / 40.0).epsilon(1e-15));
  }
  const double d = 0.3, alpha = 5.0;
  CHECK(dcd(single(0, 0, 0), Tensor(Matrix(single(d, 0, 0))), alpha).item() ==
        doctest::Approx(1.0 - std::exp(-alpha * d)).epsilon(1e-14));
  PointCloud far = a.array() + 10.0;
  CHECK(dcd(a, Tensor(Matrix(far)), 1e3).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(dcd(a, Tensor(Matrix(a)), 0.0), ConfigError);
}

TEST_CASE("losses are permutation invariant") {
  auto a = cloud(20, 7), b = cloud(20, 8);
  PointCloud rb = b.colwise().reverse();
  PointCloud ra = a.colwise().reverse();
  CHECK(chamfer_l1(ra, Tensor(Matrix(rb))).item() ==
        doctest::Approx(chamfer_l1(a, Tensor(Matrix(b))).item()).epsilon(1e-14));
  CHECK(dcd(ra, Tensor(Matrix(rb)), 3.0).item() ==
        doctest::Approx(dcd(a, Tensor(Matrix(b)), 3.0).item()).epsilon(1e-14));
}

TEST_CASE("loss gradients match finite differences") {
  auto y = cloud(40, 9);
  auto at = random_matrix(35, 3, 10);
  auto r1 = check_gradient([&](const Tensor& p) { return chamfer_l1(y, p); }, at, 100, 1);
  CHECK(r1.max_rel_err <= 1e-4);
  auto r2 = check_gradient([&](const Tensor& p) { return chamfer_weighted(y, p, 0.3); }, at, 100, 2);
  CHECK(r2.max_rel_err <= 1e-4);
  auto r3 = check_gradient([&](const Tensor& p) { return dcd(y, p, 4.0); }, at, 100, 3);
  CHECK(r3.max_rel_err <= 1e-4);
}

TEST_CASE("fscore") {
  auto a = cloud(20, 11);
  CHECK(fscore(a, a, 1e-3).f == 1.0);
  PointCloud far = a.array() + 5.0;
  CHECK(fscore(a, far, 1e-3).f == 0.0);

  // Target {0, 1}; prediction {0, 1, 5, 6}: half the prediction matched,
  // every target point matched.
  PointCloud t(2, 3), p(4, 3);
  t << 0, 0, 0, 1, 0, 0;
  p << 0, 0, 0, 1, 0, 0, 5, 0, 0, 6, 0, 0;
  auto f = fscore(t, p, 0.01);
  CHECK(f.precision == 0.5);
  CHECK(f.recall == 1.0);
  CHECK(f.f == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("eval_metrics normalizes") {
  auto a = cloud(50, 12), b = cloud(50, 13);
  auto m = eval_metrics(a, a);
  CHECK(m.cd == 0.0);
  CHECK(m.fscore == 1.0);
  auto m1 = eval_metrics(a, b);
  auto m2 = eval_metrics(PointCloud(a * 7.0), PointCloud(b * 7.0));
  CHECK(m1.cd == doctest::Approx(m2.cd).epsilon(1e-12));
  CHECK(m1.cd_e3 == doctest::Approx(1e3 * m1.cd));

  auto path = std::filesystem::temp_directory_path() / "xmf_metrics.csv";
  write_metrics_csv({{"s0", 1.5, 0.25}}, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "sample_id,cd_e3,fscore");
  CHECK(row == "s0,1.5,0.25");
}
