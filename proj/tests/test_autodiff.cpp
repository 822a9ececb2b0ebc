#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "xmf/autodiff.hpp"
#include "xmf/optim.hpp"

using namespace xmf;
using xmf::testing::check_gradient;
using xmf::testing::random_matrix;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (auto row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  Tensor b(mat({{1, 2}, {3, 4}}));
  CHECK(ad::matmul(Tensor(Matrix::Identity(2, 2)), b).value() == b.value());
  auto out = ad::matmul(Tensor(mat({{1, 2}, {3, 4}})), Tensor(mat({{1}, {1}})));
  CHECK(out.value() == mat({{3}, {7}}));
  CHECK_THROWS_AS(ad::matmul(Tensor(Matrix::Ones(2, 3)), Tensor(Matrix::Ones(2, 3))),
                  DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  const Matrix b = random_matrix(4, 3, 11);
  auto f = [&](const Tensor& a) { return ad::sum(ad::matmul(a, Tensor(b))); };
  auto res = check_gradient(f, random_matrix(5, 4, 12), 0, 1);
  CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("softmax") {
  auto u = ad::softmax(Tensor(Matrix::Constant(1, 4, 0.7)), 1);
  for (Index c = 0; c < 4; ++c) CHECK(u(0, c) == doctest::Approx(0.25).epsilon(1e-15));
  auto s = ad::softmax(Tensor(mat({{0.0, std::log(3.0)}})), 1);
  CHECK(s(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(s(0, 1) == doctest::Approx(0.75).epsilon(1e-14));

  const Matrix w = random_matrix(3, 4, 21);
  for (int axis : {0, 1}) {
    auto f = [&](const Tensor& x) { return ad::sum(ad::mul(ad::softmax(x, axis), Tensor(w))); };
    auto res = check_gradient(f, random_matrix(3, 4, 22, -2, 2), 0, 2);
    CHECK(res.max_rel_err <= 1e-6);
  }
}

TEST_CASE("elementwise rules") {
  CHECK(ad::relu(Tensor::scalar(-1)).item() == 0.0);
  CHECK(ad::leaky_relu(Tensor::scalar(-2), 0.1).item() == doctest::Approx(-0.2));

  Tensor a(random_matrix(2, 3, 1), true), b(random_matrix(2, 3, 2), true);
  auto loss = ad::sum(ad::mul(ad::add(a, b), Tensor(random_matrix(2, 3, 3))));
  ad::backward(loss);
  CHECK(a.grad() == b.grad());

  CHECK_THROWS_AS(ad::add(Tensor(Matrix::Ones(2, 3)), Tensor(Matrix::Ones(3, 2))),
                  DimensionError);
  // Scalar operands broadcast.
  Tensor s = Tensor::scalar(2.0, true);
  ad::backward(ad::sum(ad::mul(Tensor(Matrix::Ones(2, 2)), s)));
  CHECK(s.grad()(0, 0) == 4.0);
}

TEST_CASE("reductions") {
  Tensor x(mat({{1, 2, 3}}));
  CHECK(ad::sum(x).item() == 6.0);

  Tensor y(mat({{1, 5, 5}}), true);
  auto m = ad::max(y, 1);
  CHECK(m(0, 0) == 5.0);
  ad::backward(ad::sum(m));
  CHECK(y.grad() == mat({{0, 1, 0}}));

  Tensor z(mat({{1, 2, 3, 4}}), true);
  ad::backward(ad::mean(z));
  CHECK(z.grad() == Matrix::Constant(1, 4, 0.25));

  CHECK_THROWS_AS(ad::sum(Tensor(Matrix(0, 3)), 0), DimensionError);
}

TEST_CASE("gather_rows scatter-adds") {
  Tensor x(random_matrix(3, 2, 5), true);
  IndexList all{0, 1, 2};
  CHECK(ad::gather_rows(x, all).value() == x.value());

  IndexList twice{1, 1};
  ad::backward(ad::sum(ad::gather_rows(x, twice)));
  CHECK(x.grad() == mat({{0, 0}, {2, 2}, {0, 0}}));

  IndexList none;
  auto e = ad::gather_rows(x, none);
  CHECK(e.rows() == 0);
  CHECK(e.cols() == 2);
  IndexList bad{3};
  CHECK_THROWS_AS(ad::gather_rows(x, bad), IndexError);
}

TEST_CASE("backward contract") {
  Tensor x(random_matrix(2, 3, 7), true);
  ad::backward(ad::sum(x));
  CHECK(x.grad() == Matrix::Ones(2, 3));

  x.zero_grad();
  ad::backward(ad::sum(ad::mul(x, x)));
  CHECK((x.grad() - 2.0 * x.value()).norm() == 0.0);

  Tensor unused(random_matrix(2, 2, 8), true);
  ad::backward(ad::sum(ad::exp(x)));
  CHECK(unused.grad().isZero());

  CHECK_THROWS_AS(ad::backward(x), ContractError);
}

TEST_CASE("graph reuse gives identical gradients") {
  Tensor x(random_matrix(4, 3, 9), true);
  Tensor w(random_matrix(3, 2, 10), true);
  auto loss = ad::sum(ad::tanh(ad::matmul(x, w)));
  ad::backward(loss);
  Matrix g1 = w.grad();
  w.zero_grad();
  x.zero_grad();
  ad::backward(loss);
  CHECK(w.grad() == g1);
}

// Every op, 100 random probes, central differences with h = 1e-5.
TEST_CASE("finite-difference sweep over ops") {
  const Matrix w = random_matrix(6, 4, 100);
  const Matrix w3 = random_matrix(6, 1, 101);
  const IndexList idx{0, 2, 2, 5, 1};
  const Matrix gain = random_matrix(1, 4, 102, 0.5, 1.5);
  const Matrix off = random_matrix(1, 4, 103);
  const Matrix img_w = random_matrix(18, 4, 104);

  std::vector<std::pair<std::string, std::function<Tensor(const Tensor&)>>> cases = {
      {"matmul", [&](const Tensor& x) { return ad::sum(ad::matmul(ad::transpose(x), Tensor(w))); }},
      {"exp", [&](const Tensor& x) { return ad::sum(ad::mul(ad::exp(x), Tensor(w))); }},
      {"tanh", [&](const Tensor& x) { return ad::sum(ad::mul(ad::tanh(x), Tensor(w))); }},
      {"leaky", [&](const Tensor& x) { return ad::sum(ad::mul(ad::leaky_relu(x, 0.2), Tensor(w))); }},
      {"sub/scale", [&](const Tensor& x) { return ad::sum(ad::scale(ad::mul(x - Tensor(w), x), 0.3)); }},
      {"softmax", [&](const Tensor& x) { return ad::sum(ad::mul(ad::softmax(x, 1), Tensor(w))); }},
      {"max", [&](const Tensor& x) { return ad::sum(ad::max(ad::mul(x, Tensor(w)), 0)); }},
      {"mean", [&](const Tensor& x) { return ad::sum(ad::mul(ad::mean(x, 1), Tensor(w3))); }},
      {"row_norm", [&](const Tensor& x) { return ad::sum(ad::mul(ad::row_norm(x), Tensor(w3))); }},
      {"gather", [&](const Tensor& x) { return ad::sum(ad::mul(ad::gather_rows(x, idx), ad::gather_rows(Tensor(w), idx))); }},
      {"layer_norm", [&](const Tensor& x) { return ad::sum(ad::mul(ad::layer_norm(x, Tensor(gain), Tensor(off)), Tensor(w))); }},
      {"group_max", [&](const Tensor& x) { return ad::sum(ad::group_max(ad::mul(x, Tensor(w)), 3)); }},
      {"scale_rows", [&](const Tensor& x) { return ad::sum(ad::scale_rows(ad::mul(x, x), Tensor(w3))); }},
      {"concat/slice", [&](const Tensor& x) { return ad::sum(ad::mul(ad::slice_cols(ad::concat_cols({x, x}), 2, 4), Tensor(w))); }},
      {"im2col", [&](const Tensor& x) {
         // 6 rows = a 2x3 grid with 4 channels is too many; reuse as 3x2 grid, 4 ch.
         auto cols = ad::im2col(ad::slice_cols(x, 0, 2), 3, 2, 3, 1, 1);
         return ad::sum(ad::tanh(ad::matmul(cols, Tensor(img_w.topRows(18)))));
       }},
  };
  for (auto& [name, f] : cases) {
    CAPTURE(name);
    auto res = check_gradient(f, random_matrix(6, 4, 200), 100, 7);
    CHECK(res.probes == 100);
    CHECK(res.max_rel_err <= 1e-4);
  }
}

TEST_CASE("determinism: same inputs give bit-identical grads") {
  auto run = [] {
    Tensor x(random_matrix(5, 3, 1), true);
    Tensor w(random_matrix(3, 3, 2), true);
    ad::backward(ad::sum(ad::softmax(ad::matmul(x, w), 1)));
    return std::pair{x.grad(), w.grad()};
  };
  auto [a1, b1] = run();
  auto [a2, b2] = run();
  CHECK(a1 == a2);
  CHECK(b1 == b2);
}

TEST_CASE("adam") {
  ParameterSet params;
  auto& p = params.add("p", Matrix::Constant(1, 1, 0.5));
  Adam opt(params, {.lr = 0.01});
  params.zero_grad();
  opt.step();
  CHECK(p.value()(0, 0) == 0.5);

  Adam fresh_opt(params, {.lr = 0.01});
  params.zero_grad();
  ad::backward(ad::scale(p, 3.0));
  fresh_opt.step();
  // Bias-corrected first step moves by lr * sign(g).
  CHECK(p.value()(0, 0) == doctest::Approx(0.5 - 0.01).epsilon(1e-9));

  ParameterSet fresh;
  fresh.add("q", Matrix::Zero(2, 2));
  Adam opt2(fresh);
  CHECK_THROWS_AS(opt2.step(), ContractError);

  StepSchedule sched;
  CHECK(sched.at(0) == doctest::Approx(1e-3));
  CHECK(sched.at(25) == doctest::Approx(1e-4));
  CHECK(sched.at(124) == doctest::Approx(1e-4));
  CHECK(sched.at(125) == doctest::Approx(1e-5));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ParameterSet params;
  params.add("layer.weight", random_matrix(3, 4, 1));
  params.add("layer.bias", random_matrix(1, 4, 2));
  auto path = std::filesystem::temp_directory_path() / "xmf_ckpt_test.bin";
  save_checkpoint(params, path);

  ParameterSet other;
  other.add("layer.weight", Matrix::Zero(3, 4));
  other.add("layer.bias", Matrix::Zero(1, 4));
  load_checkpoint(other, path);
  CHECK(other.at("layer.weight").value() == params.at("layer.weight").value());
  CHECK(other.at("layer.bias").value() == params.at("layer.bias").value());

  auto records = read_checkpoint(path);
  REQUIRE(records.size() == 2);
  CHECK(records[0].first == "layer.weight");

  ParameterSet wrong;
  wrong.add("layer.weight", Matrix::Zero(4, 4));
  CHECK_THROWS_AS(load_checkpoint(wrong, path), SchemaError);
  std::filesystem::remove(path);
}
