#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "xmf/losses.hpp"
#include "xmf/model.hpp"

using namespace xmf;
using xmf::testing::check_gradient;
using xmf::testing::random_matrix;

namespace {

RgbImage random_image(Index side, std::uint64_t seed) {
  return RgbImage{side, side, random_matrix(side * side, 3, seed, 0.0, 1.0)};
}

Linear make_linear(Matrix w, Matrix b) { return Linear{Tensor(std::move(w)), Tensor(std::move(b))}; }

bool same(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("model config presets and validation") {
  CHECK_NOTHROW(ModelConfig::paper().validate());
  CHECK_NOTHROW(ModelConfig::toy().validate());
  CHECK(ModelConfig::paper().encoded_points() == 128);
  CHECK(ModelConfig::toy().encoded_points() == 32);
  CHECK(ModelConfig::paper().image_grid() == 14);
  CHECK(ModelConfig::toy().image_grid() == 4);
  CHECK_THROWS_AS(ModelConfig::preset("huge"), ConfigError);

  auto bad = ModelConfig::toy();
  bad.branch_points = 63;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig::toy();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig::toy();
  bad.pool_knn_ks = {16};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig::toy();
  bad.pool_ratios = {0.25, 0.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("model config json round-trip and strictness") {
  auto cfg = ModelConfig::toy();
  cfg.unimodal = true;
  cfg.init_seed = 17;
  auto back = model_config_from_json(model_config_to_json(cfg));
  CHECK(model_config_to_json(back) == model_config_to_json(cfg));
  auto over = model_config_from_json("{\"heads\": 8}", ModelConfig::toy());
  CHECK(over.heads == 8);
  CHECK(over.n_points == 512);
  CHECK_THROWS_AS(model_config_from_json("{\"head\": 8}"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json("{\"heads\": \"four\"}"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json("[1, 2]"), ConfigError);
}

TEST_CASE("pooled count is the ceiling of ratio * n") {
  CHECK(pooled_count(2048, 0.25) == 512);
  CHECK(pooled_count(512, 0.25) == 128);
  CHECK(pooled_count(10, 0.25) == 3);
  CHECK(pooled_count(7, 1.0) == 7);
  CHECK(pooled_count(3, 0.1) == 1);
  CHECK_THROWS_AS(pooled_count(3, 0.0), ConfigError);
}

TEST_CASE("edgeconv: hand-evaluated edges") {
  // f = 1, f' = 2. Columns: [h_i, h_j - h_i] . w
  Matrix h(2, 1);
  h << 1.0, 3.0;
  KnnGraph g;
  g.k = 1;
  g.neighbors.resize(2, 1);
  g.neighbors << 1, 0;
  Matrix w(2, 2);
  w << 1.0, 0.0,
       0.0, 1.0;
  Matrix b = Matrix::Zero(1, 2);
  Matrix out = edgeconv(Tensor(h), g, make_linear(w, b), -1.0).value();
  // node 0: [1, 2]; node 1: [3, -2]
  CHECK(out(0, 0) == 1.0);
  CHECK(out(0, 1) == 2.0);
  CHECK(out(1, 0) == 3.0);
  CHECK(out(1, 1) == -2.0);
  Matrix act = edgeconv(Tensor(h), g, make_linear(w, b), 0.2).value();
  CHECK(act(1, 1) == doctest::Approx(-0.4));
  CHECK_THROWS_AS(edgeconv(Tensor(Matrix(Matrix::Ones(3, 1))), g, make_linear(w, b), 0.2), DimensionError);
}

TEST_CASE("edgeconv: identical features ignore topology, max over neighbours") {
  Matrix h = Matrix::Constant(6, 4, 0.3);
  Matrix w = random_matrix(8, 5, 1), b = random_matrix(1, 5, 2);
  auto pts_a = random_matrix(6, 3, 3), pts_b = random_matrix(6, 3, 4);
  Matrix a = edgeconv(Tensor(h), knn(pts_a, 3), make_linear(w, b), 0.2).value();
  Matrix c = edgeconv(Tensor(h), knn(pts_b, 2), make_linear(w, b), 0.2).value();
  CHECK(same(a, c));

  // Brute-force transcription of the edge function.
  Matrix f = random_matrix(7, 3, 5);
  Matrix w2 = random_matrix(6, 4, 6), b2 = random_matrix(1, 4, 7);
  auto graph = knn(random_matrix(7, 3, 8), 3);
  Matrix got = edgeconv(Tensor(f), graph, make_linear(w2, b2), 0.2).value();
  for (Index i = 0; i < 7; ++i) {
    for (Index c2 = 0; c2 < 4; ++c2) {
      double best = -1e300;
      for (Index r = 0; r < 3; ++r) {
        const Index j = graph.neighbors(i, r);
        Eigen::RowVectorXd e(6);
        e << f.row(i), f.row(j) - f.row(i);
        double v = e.dot(w2.col(c2)) + b2(0, c2);
        v = v > 0 ? v : 0.2 * v;
        best = std::max(best, v);
      }
      CHECK(got(i, c2) == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("edgeconv: permuting sites permutes output rows") {
  PointCloud pts = random_matrix(10, 3, 9);
  Matrix f = random_matrix(10, 4, 10);
  Linear l = make_linear(random_matrix(8, 6, 11), random_matrix(1, 6, 12));
  IndexList perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(13));
  Matrix base = edgeconv(Tensor(f), knn(pts, 4), l, 0.2).value();
  Matrix moved = edgeconv(Tensor(Matrix(take_rows(f, perm))), knn(take_rows(pts, perm), 4), l, 0.2).value();
  for (Index i = 0; i < 10; ++i) CHECK((moved.row(i) - base.row(perm[static_cast<std::size_t>(i)])).norm() < 1e-12);
}

TEST_CASE("edgeconv gradient matches finite differences") {
  auto graph = knn(random_matrix(12, 3, 20), 4);
  Matrix w = random_matrix(10, 6, 21), b = random_matrix(1, 6, 22);
  auto wrt_feat = [&](const Tensor& x) {
    return ad::sum(ad::mul(edgeconv(x, graph, make_linear(w, b), 0.2), Tensor(random_matrix(12, 6, 23))));
  };
  auto r1 = check_gradient(wrt_feat, random_matrix(12, 5, 24), 100, 1);
  CHECK(r1.max_rel_err <= 1e-4);
  Matrix feat = random_matrix(12, 5, 25);
  auto wrt_w = [&](const Tensor& x) {
    return ad::sum(ad::mul(edgeconv(Tensor(feat), graph, Linear{x, Tensor(b)}, 0.2),
                           Tensor(random_matrix(12, 6, 23))));
  };
  auto r2 = check_gradient(wrt_w, w, 100, 2);
  CHECK(r2.max_rel_err <= 1e-4);
}

TEST_CASE("sag_pool selection and gating") {
  PointCloud pts = random_matrix(20, 3, 30);
  Matrix f = random_matrix(20, 4, 31);
  Linear score = make_linear(random_matrix(8, 1, 32), random_matrix(1, 1, 33));

  Pooled all = sag_pool(Tensor(f), pts, 1.0, 5, score);
  REQUIRE(all.kept.size() == 20);
  for (std::size_t r = 1; r < 20; ++r) CHECK(all.scores(all.kept[r - 1], 0) >= all.scores(all.kept[r], 0));
  for (std::size_t r = 0; r < 20; ++r) {
    const Index src = all.kept[r];
    const double gate = std::tanh(all.scores(src, 0));
    CHECK((all.features.value().row(static_cast<Index>(r)) - gate * f.row(src)).norm() < 1e-12);
    CHECK(all.coords.row(static_cast<Index>(r)) == pts.row(src));
  }

  Pooled part = sag_pool(Tensor(f), pts, 0.25, 5, score);
  CHECK(part.kept.size() == 5);
  std::set<Index> distinct(part.kept.begin(), part.kept.end());
  CHECK(distinct.size() == 5);
  for (Index i : part.kept) CHECK((i >= 0 && i < 20));

  Linear zero = make_linear(Matrix::Zero(8, 1), Matrix::Zero(1, 1));
  Pooled z = sag_pool(Tensor(f), pts, 0.3, 5, zero);
  CHECK(z.kept == IndexList{0, 1, 2, 3, 4, 5});
  CHECK(z.features.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("multihead attention: singleton context and permutation behaviour") {
  const Index F = 8, heads = 2;
  AttentionWeights w;
  w.q = make_linear(random_matrix(5, F, 40), random_matrix(1, F, 41));
  w.k = make_linear(random_matrix(6, F, 42), random_matrix(1, F, 43));
  w.v = make_linear(random_matrix(6, F, 44), random_matrix(1, F, 45));
  w.out = make_linear(random_matrix(F, F, 46), random_matrix(1, F, 47));
  Matrix q = random_matrix(7, 5, 48);

  Matrix one = random_matrix(1, 6, 49);
  Matrix out = multihead_attention(Tensor(q), Tensor(one), w, heads).value();
  Matrix expect = apply(w.out, apply(w.v, Tensor(one))).value();
  for (Index r = 0; r < 7; ++r) CHECK((out.row(r) - expect).norm() < 1e-12);

  Matrix ctx = random_matrix(9, 6, 50);
  IndexList perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(51));
  Matrix base = multihead_attention(Tensor(q), Tensor(ctx), w, heads).value();
  Matrix kv_perm = multihead_attention(Tensor(q), Tensor(Matrix(take_rows(ctx, perm))), w, heads).value();
  CHECK((base - kv_perm).cwiseAbs().maxCoeff() < 1e-12);

  IndexList qp{6, 5, 4, 3, 2, 1, 0};
  Matrix q_perm = multihead_attention(Tensor(Matrix(take_rows(q, qp))), Tensor(ctx), w, heads).value();
  for (Index r = 0; r < 7; ++r) CHECK((q_perm.row(r) - base.row(qp[static_cast<std::size_t>(r)])).norm() < 1e-12);

  CHECK_THROWS_AS(multihead_attention(Tensor(q), Tensor(ctx), w, 3), ConfigError);
}

TEST_CASE("toy network shapes") {
  XmfNet net(ModelConfig::toy());
  PointCloud x = random_matrix(512, 3, 60);
  RgbImage img = random_image(64, 61);
  auto enc = net.encode_pointcloud(x);
  CHECK(enc.features.rows() == 32);
  CHECK(enc.features.cols() == 64);
  Tensor hi = net.encode_image(img);
  CHECK(hi.rows() == 16);
  CHECK(hi.cols() == 64);
  Tensor fused = net.fuse(enc.features, hi);
  CHECK(fused.rows() == 32);
  CHECK(fused.cols() == 64);
  CHECK(net.decode(fused).rows() == 256);
  Tensor y = net.complete(x, img);
  CHECK(y.rows() == 512);
  CHECK(y.cols() == 3);

  // The copied tail is fps(X, N - N').
  auto keep = fps(x, 256, 0);
  CHECK(same(y.value().bottomRows(256), take_rows(x, keep)));

  CHECK_THROWS_AS(net.encode_image(random_image(32, 1)), DimensionError);
  CHECK_THROWS_AS(net.complete(random_matrix(100, 3, 1), img), SizeError);
}

TEST_CASE("paper network shapes") {
  XmfNet net(ModelConfig::paper());
  PointCloud x = random_matrix(2048, 3, 70);
  RgbImage img = random_image(224, 71);
  auto enc = net.encode_pointcloud(x);
  CHECK(enc.features.rows() == 128);
  CHECK(enc.features.cols() == 256);
  Tensor hi = net.encode_image(img);
  CHECK(hi.rows() == 196);
  CHECK(hi.cols() == 256);
  Tensor fused = net.fuse(enc.features, hi);
  CHECK(fused.rows() == 128);
  CHECK(fused.cols() == 256);
  CHECK(net.decode(fused).rows() == 1024);
  CHECK(net.complete(x, img).rows() == 2048);
}

TEST_CASE("decoder with a single site repeats one point per branch") {
  XmfNet net(ModelConfig::toy());
  Matrix h = random_matrix(1, 64, 80);
  Matrix y = net.decode(Tensor(h)).value();
  for (Index k = 0; k < 4; ++k)
    for (Index r = 1; r < 64; ++r) CHECK((y.row(k * 64 + r) - y.row(k * 64)).norm() < 1e-12);
}

TEST_CASE("image encoder: zero image with zeroed biases gives zero features") {
  XmfNet net(ModelConfig::toy());
  for (auto& [name, t] : net.parameters()) {
    if (name.rfind("image.", 0) == 0 && (name.ends_with(".bias") || name == "image.pos")) t.mutable_value().setZero();
  }
  RgbImage black{64, 64, Matrix::Zero(64 * 64, 3)};
  CHECK(net.encode_image(black).value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("completion is invariant to input order") {
  XmfNet net(ModelConfig::toy());
  PointCloud x = random_matrix(512, 3, 90);
  RgbImage img = random_image(64, 91);
  IndexList perm(512);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(92));
  PointCloud xp = take_rows(x, perm);
  const Index seed = std::find(perm.begin(), perm.end(), Index{0}) - perm.begin();
  Matrix a = net.complete(x, img, 0).value();
  Matrix b = net.complete(xp, img, seed).value();
  CHECK(chamfer_l1_value(a, b) <= 1e-9);
}

TEST_CASE("unimodal output does not depend on the image") {
  auto cfg = ModelConfig::toy();
  cfg.unimodal = true;
  XmfNet net(cfg);
  for (const auto& [name, t] : net.parameters()) CHECK(name.rfind("image.", 0) != 0);
  PointCloud x = random_matrix(512, 3, 100);
  Matrix a = net.complete(x, random_image(64, 1)).value();
  Matrix b = net.complete(x, random_image(64, 2)).value();
  Matrix c = net.complete(x, RgbImage{}).value();
  CHECK(same(a, b));
  CHECK(same(a, c));
  CHECK_THROWS_AS(net.encode_image(random_image(64, 1)), ContractError);
}

TEST_CASE("multimodal output does depend on the image") {
  XmfNet net(ModelConfig::toy());
  PointCloud x = random_matrix(512, 3, 101);
  Matrix a = net.complete(x, random_image(64, 1)).value();
  Matrix b = net.complete(x, random_image(64, 2)).value();
  CHECK(!same(a, b));
}

TEST_CASE("every named parameter receives gradient from a Chamfer loss") {
  for (bool uni : {false, true}) {
    auto cfg = ModelConfig::toy();
    cfg.unimodal = uni;
    XmfNet net(cfg);
    PointCloud x = random_matrix(512, 3, 110);
    PointCloud y = random_matrix(512, 3, 111);
    Tensor loss = chamfer_l1(y, net.complete(x, random_image(64, 112)));
    ad::backward(loss);
    for (auto& [name, t] : net.parameters()) {
      CAPTURE(name);
      CHECK(t.has_grad());
      CHECK(t.grad().cwiseAbs().maxCoeff() > 0.0);
    }
  }
}

TEST_CASE("model checkpoint round-trip is bit-exact") {
  auto cfg = ModelConfig::toy();
  XmfNet a(cfg);
  cfg.init_seed = 5;
  XmfNet b(cfg);
  const auto path = std::filesystem::temp_directory_path() / "xmf_model_ckpt.bin";
  save_checkpoint(a.parameters(), path);
  load_checkpoint(b.parameters(), path);
  PointCloud x = random_matrix(512, 3, 120);
  RgbImage img = random_image(64, 121);
  CHECK(same(a.complete(x, img).value(), b.complete(x, img).value()));
  std::filesystem::remove(path);
}

TEST_CASE("model construction is deterministic in the seed") {
  XmfNet a(ModelConfig::toy()), b(ModelConfig::toy());
  auto ia = a.parameters().begin();
  for (auto& [name, t] : b.parameters()) {
    CHECK(name == ia->first);
    CHECK(same(t.value(), ia->second.value()));
    ++ia;
  }
}
