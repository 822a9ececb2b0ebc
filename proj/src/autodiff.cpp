#include "xmf/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace xmf::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

void check_binary(const char* op, const Tensor& a, const Tensor& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) return;
  if (is_scalar(av) || is_scalar(bv)) return;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(av) + " and " + shape_str(bv) +
                       " are not broadcastable");
}

// Reduces an upstream grad to the operand's shape (sums when it was a
// broadcast scalar).
Matrix fit_grad(const Matrix& g, const Matrix& operand) {
  if (g.rows() == operand.rows() && g.cols() == operand.cols()) return g;
  Matrix s(1, 1);
  s(0, 0) = g.sum();
  return s;
}

template <class F>
Matrix broadcast_apply(const Matrix& a, const Matrix& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  if (is_scalar(a)) {
    Matrix full = Matrix::Constant(b.rows(), b.cols(), a(0, 0));
    return f(full.array(), b.array()).matrix();
  }
  Matrix full = Matrix::Constant(a.rows(), a.cols(), b(0, 0));
  return f(a.array(), full.array()).matrix();
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

const Matrix& Tensor::grad() const {
  if (!has_grad()) node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols()); }

double Tensor::item() const {
  if (!is_scalar(node_->value)) {
    throw ContractError("item() on non-scalar tensor " + shape_str(node_->value));
  }
  return node_->value(0, 0);
}

Tensor Tensor::make_result(Matrix value, const char* op, std::vector<Tensor> parents,
                           std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  node->requires_grad = any;
  if (any) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void accumulate(Node& node, const Matrix& g) {
  if (!node.requires_grad) return;
  if (node.grad.rows() != node.value.rows() || node.grad.cols() != node.value.cols()) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void backward(const Tensor& loss) {
  if (!is_scalar(loss.value())) {
    throw ContractError("backward: loss must be 1x1, got " + shape_str(loss.value()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  }
  accumulate(*loss.node(), Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " +
                         shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return Tensor::make_result(std::move(out), "matmul", {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) accumulate(pa, self.grad * pb.value.transpose());
    if (pb.requires_grad) accumulate(pb, pa.value.transpose() * self.grad);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return Tensor::make_result(std::move(out), "transpose", {a}, [](Node& self) {
    accumulate(*self.parents[0], self.grad.transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary("add", a, b);
  Matrix out = broadcast_apply(a.value(), b.value(), [](auto x, auto y) { return x + y; });
  return Tensor::make_result(std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) accumulate(*p, fit_grad(self.grad, p->value));
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary("sub", a, b);
  Matrix out = broadcast_apply(a.value(), b.value(), [](auto x, auto y) { return x - y; });
  return Tensor::make_result(std::move(out), "sub", {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) accumulate(pa, fit_grad(self.grad, pa.value));
    if (pb.requires_grad) accumulate(pb, fit_grad(-self.grad, pb.value));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary("mul", a, b);
  Matrix out = broadcast_apply(a.value(), b.value(), [](auto x, auto y) { return x * y; });
  return Tensor::make_result(std::move(out), "mul", {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Index r = self.value.rows(), c = self.value.cols();
    if (pa.requires_grad) {
      Matrix g = (self.grad.array() * expand(pb.value, r, c).array()).matrix();
      accumulate(pa, fit_grad(g, pa.value));
    }
    if (pb.requires_grad) {
      Matrix g = (self.grad.array() * expand(pa.value, r, c).array()).matrix();
      accumulate(pb, fit_grad(g, pb.value));
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  return Tensor::make_result(std::move(out), "scale", {a}, [s](Node& self) {
    accumulate(*self.parents[0], self.grad * s);
  });
}

Tensor neg(const Tensor& a) {
  Matrix out = -a.value();
  return Tensor::make_result(std::move(out), "neg", {a},
                             [](Node& self) { accumulate(*self.parents[0], -self.grad); });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return Tensor::make_result(std::move(out), "exp", {a}, [](Node& self) {
    accumulate(*self.parents[0], (self.grad.array() * self.value.array()).matrix());
  });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  return Tensor::make_result(std::move(out), "tanh", {a}, [](Node& self) {
    accumulate(*self.parents[0],
               (self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor leaky_relu(const Tensor& a, double slope) {
  Matrix out = a.value().unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  return Tensor::make_result(std::move(out), slope == 0.0 ? "relu" : "leaky_relu", {a},
                             [slope](Node& self) {
                               auto& p = *self.parents[0];
                               Matrix d = p.value.unaryExpr(
                                   [slope](double v) { return v > 0.0 ? 1.0 : slope; });
                               accumulate(p, (self.grad.array() * d.array()).matrix());
                             });
}

Tensor abs(const Tensor& a) {
  Matrix out = a.value().cwiseAbs();
  return Tensor::make_result(std::move(out), "abs", {a}, [](Node& self) {
    auto& p = *self.parents[0];
    Matrix d = p.value.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    accumulate(p, (self.grad.array() * d.array()).matrix());
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.value()) + " does not fit " +
                         shape_str(x.value()));
  }
  Matrix out = x.value().rowwise() + bias.value().row(0);
  return Tensor::make_result(std::move(out), "add_bias", {x, bias}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) accumulate(*self.parents[1], self.grad.colwise().sum());
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) {
    throw DimensionError("scale_rows: scale " + shape_str(s.value()) + " does not fit " +
                         shape_str(x.value()));
  }
  Matrix out = s.value().col(0).asDiagonal() * x.value();
  return Tensor::make_result(std::move(out), "scale_rows", {x, s}, [](Node& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    if (px.requires_grad) accumulate(px, ps.value.col(0).asDiagonal() * self.grad);
    if (ps.requires_grad) {
      Matrix g = (self.grad.array() * px.value.array()).rowwise().sum().matrix();
      accumulate(ps, g);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(const Tensor& x, Reduce kind, std::optional<int> axis) {
  const Matrix& v = x.value();
  if (axis && *axis != 0 && *axis != 1) {
    throw DimensionError("reduce: axis must be 0 or 1");
  }
  const Index extent = !axis ? v.size() : (*axis == 0 ? v.rows() : v.cols());
  if (extent == 0) throw DimensionError("reduce: empty axis on " + shape_str(v));

  if (kind == Reduce::Sum || kind == Reduce::Mean) {
    const double f = kind == Reduce::Mean ? 1.0 / static_cast<double>(extent) : 1.0;
    Matrix out;
    if (!axis) {
      out = Matrix::Constant(1, 1, v.sum() * f);
    } else if (*axis == 0) {
      out = v.colwise().sum() * f;
    } else {
      out = v.rowwise().sum() * f;
    }
    return Tensor::make_result(std::move(out), kind == Reduce::Sum ? "sum" : "mean", {x},
                               [axis, f](Node& self) {
                                 auto& p = *self.parents[0];
                                 const Index r = p.value.rows(), c = p.value.cols();
                                 Matrix g;
                                 if (!axis) {
                                   g = Matrix::Constant(r, c, self.grad(0, 0) * f);
                                 } else if (*axis == 0) {
                                   g = self.grad.replicate(r, 1) * f;
                                 } else {
                                   g = self.grad.replicate(1, c) * f;
                                 }
                                 accumulate(p, g);
                               });
  }

  // Max: record argmax (first index wins on ties).
  Matrix out;
  std::vector<Index> arg;
  if (!axis) {
    Index best = 0;
    for (Index i = 1; i < v.size(); ++i) {
      if (v.data()[i] > v.data()[best]) best = i;
    }
    out = Matrix::Constant(1, 1, v.data()[best]);
    arg.push_back(best);
  } else if (*axis == 0) {
    out.resize(1, v.cols());
    arg.resize(v.cols());
    for (Index c = 0; c < v.cols(); ++c) {
      Index best = 0;
      for (Index r = 1; r < v.rows(); ++r) {
        if (v(r, c) > v(best, c)) best = r;
      }
      out(0, c) = v(best, c);
      arg[c] = best * v.cols() + c;
    }
  } else {
    out.resize(v.rows(), 1);
    arg.resize(v.rows());
    for (Index r = 0; r < v.rows(); ++r) {
      Index best = 0;
      for (Index c = 1; c < v.cols(); ++c) {
        if (v(r, c) > v(r, best)) best = c;
      }
      out(r, 0) = v(r, best);
      arg[r] = r * v.cols() + best;
    }
  }
  return Tensor::make_result(std::move(out), "max", {x}, [arg = std::move(arg)](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < arg.size(); ++i) g.data()[arg[i]] += self.grad.data()[i];
    accumulate(p, g);
  });
}

Tensor group_max(const Tensor& x, Index group) {
  const Matrix& v = x.value();
  if (group <= 0 || v.rows() % group != 0) {
    throw DimensionError("group_max: " + std::to_string(v.rows()) +
                         " rows not divisible into groups of " + std::to_string(group));
  }
  const Index n = v.rows() / group;
  const Index f = v.cols();
  Matrix out(n, f);
  std::vector<Index> arg(static_cast<std::size_t>(n * f));
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < f; ++c) {
      Index best = i * group;
      for (Index r = i * group + 1; r < (i + 1) * group; ++r) {
        if (v(r, c) > v(best, c)) best = r;
      }
      out(i, c) = v(best, c);
      arg[static_cast<std::size_t>(i * f + c)] = best;
    }
  }
  return Tensor::make_result(std::move(out), "group_max", {x},
                             [arg = std::move(arg), f](Node& self) {
                               auto& p = *self.parents[0];
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               for (Index i = 0; i < self.value.rows(); ++i) {
                                 for (Index c = 0; c < f; ++c) {
                                   g(arg[static_cast<std::size_t>(i * f + c)], c) +=
                                       self.grad(i, c);
                                 }
                               }
                               accumulate(p, g);
                             });
}

Tensor row_norm(const Tensor& x) {
  Matrix out = x.value().rowwise().norm();
  return Tensor::make_result(std::move(out), "row_norm", {x}, [](Node& self) {
    auto& p = *self.parents[0];
    Matrix g(p.value.rows(), p.value.cols());
    for (Index r = 0; r < p.value.rows(); ++r) {
      const double n = self.value(r, 0);
      if (n > 0.0) {
        g.row(r) = p.value.row(r) * (self.grad(r, 0) / n);
      } else {
        g.row(r).setZero();
      }
    }
    accumulate(p, g);
  });
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  Matrix out = x.value();
  if (axis == 1) {
    for (Index r = 0; r < out.rows(); ++r) {
      const double m = out.row(r).maxCoeff();
      out.row(r) = (out.row(r).array() - m).exp().matrix();
      out.row(r) /= out.row(r).sum();
    }
  } else {
    for (Index c = 0; c < out.cols(); ++c) {
      const double m = out.col(c).maxCoeff();
      out.col(c) = (out.col(c).array() - m).exp().matrix();
      out.col(c) /= out.col(c).sum();
    }
  }
  return Tensor::make_result(std::move(out), "softmax", {x}, [axis](Node& self) {
    const Matrix& y = self.value;
    const Matrix& g = self.grad;
    Matrix gy = (g.array() * y.array()).matrix();
    Matrix dx;
    if (axis == 1) {
      Matrix s = gy.rowwise().sum();
      dx = (y.array() * (g.colwise() - s.col(0)).array()).matrix();
    } else {
      Matrix s = gy.colwise().sum();
      dx = (y.array() * (g.rowwise() - s.row(0)).array()).matrix();
    }
    accumulate(*self.parents[0], dx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
  const Index f = x.cols();
  if (gain.rows() != 1 || gain.cols() != f || offset.rows() != 1 || offset.cols() != f) {
    throw DimensionError("layer_norm: gain/offset must be 1x" + std::to_string(f));
  }
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), f);
  Eigen::VectorXd inv_std(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += offset.value().row(0);
  return Tensor::make_result(
      std::move(out), "layer_norm", {x, gain, offset},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), f](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const Matrix& g = self.grad;
        if (pg.requires_grad) accumulate(pg, (g.array() * xhat.array()).colwise().sum().matrix());
        if (pb.requires_grad) accumulate(pb, g.colwise().sum());
        if (px.requires_grad) {
          Matrix gx = (g.array().rowwise() * pg.value.row(0).array()).matrix();
          Matrix dx(gx.rows(), f);
          for (Index r = 0; r < gx.rows(); ++r) {
            const double m1 = gx.row(r).mean();
            const double m2 = (gx.row(r).array() * xhat.row(r).array()).mean();
            dx.row(r) = inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          accumulate(px, dx);
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

Tensor gather_rows(const Tensor& x, std::span<const Index> idx) {
  const Matrix& v = x.value();
  Matrix out(static_cast<Index>(idx.size()), v.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= v.rows()) {
      throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " outside [0, " +
                       std::to_string(v.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = v.row(idx[i]);
  }
  return Tensor::make_result(std::move(out), "gather_rows", {x},
                             [ids = IndexList(idx.begin(), idx.end())](Node& self) {
                               auto& p = *self.parents[0];
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                 g.row(ids[i]) += self.grad.row(static_cast<Index>(i));
                               }
                               accumulate(p, g);
                             });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor::make_result(std::move(out), "concat_cols", parts, [](Node& self) {
    Index at = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) accumulate(*p, self.grad.middleCols(at, c));
      at += c;
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor::make_result(std::move(out), "concat_rows", parts, [](Node& self) {
    Index at = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) accumulate(*p, self.grad.middleRows(at, r));
      at += r;
    }
  });
}

Tensor slice_cols(const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: range out of bounds");
  }
  Matrix out = x.value().middleCols(begin, count);
  return Tensor::make_result(std::move(out), "slice_cols", {x}, [begin, count](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(begin, count) = self.grad;
    accumulate(p, g);
  });
}

Tensor slice_rows(const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: range out of bounds");
  }
  Matrix out = x.value().middleRows(begin, count);
  return Tensor::make_result(std::move(out), "slice_rows", {x}, [begin, count](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(begin, count) = self.grad;
    accumulate(p, g);
  });
}

Tensor im2col(const Tensor& x, Index height, Index width, Index kernel, Index stride,
              Index pad) {
  const Matrix& v = x.value();
  if (v.rows() != height * width) {
    throw DimensionError("im2col: " + std::to_string(v.rows()) + " rows for a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const Index ch = v.cols();
  const Index out_h = (height + 2 * pad - kernel) / stride + 1;
  const Index out_w = (width + 2 * pad - kernel) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw DimensionError("im2col: kernel larger than input");

  // src(row, block) = input pixel feeding that patch slot, or -1 for padding.
  std::vector<Index> src(static_cast<std::size_t>(out_h * out_w * kernel * kernel), -1);
  Matrix out = Matrix::Zero(out_h * out_w, kernel * kernel * ch);
  for (Index oy = 0; oy < out_h; ++oy) {
    for (Index ox = 0; ox < out_w; ++ox) {
      const Index row = oy * out_w + ox;
      for (Index ky = 0; ky < kernel; ++ky) {
        const Index iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= height) continue;
        for (Index kx = 0; kx < kernel; ++kx) {
          const Index ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= width) continue;
          const Index slot = ky * kernel + kx;
          const Index pix = iy * width + ix;
          src[static_cast<std::size_t>(row * kernel * kernel + slot)] = pix;
          out.block(row, slot * ch, 1, ch) = v.row(pix);
        }
      }
    }
  }
  const Index slots = kernel * kernel;
  return Tensor::make_result(std::move(out), "im2col", {x},
                             [src = std::move(src), slots, ch](Node& self) {
                               auto& p = *self.parents[0];
                               Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                               for (Index row = 0; row < self.grad.rows(); ++row) {
                                 for (Index s = 0; s < slots; ++s) {
                                   const Index pix =
                                       src[static_cast<std::size_t>(row * slots + s)];
                                   if (pix >= 0) g.row(pix) += self.grad.block(row, s * ch, 1, ch);
                                 }
                               }
                               accumulate(p, g);
                             });
}

}  // namespace xmf::ad
