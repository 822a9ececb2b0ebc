#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmf/errors.hpp"

namespace xmf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

namespace ad {

/// One vertex of the reverse-mode graph. Parents are held by shared
/// ownership, so a graph lives exactly as long as the tensors that end it.
struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;
};

/// Dense rank-2 tensor (scalars are 1x1, vectors are 1xn or nx1) bound to a
/// graph node. Copies share the node.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; bypasses the graph.
  Matrix& mutable_value() { return node_->value; }

  /// Gradient buffer; zeros of the value's shape when nothing was accumulated.
  const Matrix& grad() const;
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  void zero_grad();

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  double item() const;
  double operator()(Index r, Index c) const { return node_->value(r, c); }

  /// Same values, no graph history.
  Tensor detach() const { return Tensor(node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Creates an interior node. Used by op implementations.
  static Tensor make_result(Matrix value, const char* op, std::vector<Tensor> parents,
                            std::function<void(Node&)> backward_fn);

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Adds `g` into the node's grad buffer, allocating it on first use.
void accumulate(Node& node, const Matrix& g);

/// Reverse pass from a 1x1 loss. Interior grads are reset first; leaf grads
/// accumulate, so call zero_grad on parameters between steps.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---------------------------------------------------------------------------
// Elementwise. Binary ops require equal shapes or one 1x1 operand.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor abs(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// x (n x f) plus a 1 x f row added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x (n x f) scaled rowwise by s (n x 1).
Tensor scale_rows(const Tensor& x, const Tensor& s);

// ---------------------------------------------------------------------------
// Reductions. axis 0 reduces over rows (result 1 x cols), axis 1 over
// columns (result rows x 1), nullopt over everything (1 x 1).

enum class Reduce { Sum, Mean, Max };

Tensor reduce(const Tensor& x, Reduce kind, std::optional<int> axis = std::nullopt);
inline Tensor sum(const Tensor& x, std::optional<int> axis = std::nullopt) {
  return reduce(x, Reduce::Sum, axis);
}
inline Tensor mean(const Tensor& x, std::optional<int> axis = std::nullopt) {
  return reduce(x, Reduce::Mean, axis);
}
inline Tensor max(const Tensor& x, std::optional<int> axis = std::nullopt) {
  return reduce(x, Reduce::Max, axis);
}

/// Max over consecutive blocks of `group` rows: (n*group x f) -> (n x f).
/// Ties route the gradient to the first row of the block.
Tensor group_max(const Tensor& x, Index group);

/// Euclidean norm of each row, (n x f) -> (n x 1). Zero rows get a zero
/// subgradient.
Tensor row_norm(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);

/// Rowwise layer normalization with learned 1 x f gain and offset.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Indexing and layout

/// Row selection; backward scatter-adds into source rows.
Tensor gather_rows(const Tensor& x, std::span<const Index> idx);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, Index begin, Index count);
Tensor slice_rows(const Tensor& x, Index begin, Index count);

/// Patch extraction for convolutions. Input rows are pixels of an H x W grid
/// in row-major order, columns are channels. Output has one row per output
/// pixel and kernel*kernel*C columns ordered (ky, kx, c). Zero padding.
Tensor im2col(const Tensor& x, Index height, Index width, Index kernel, Index stride,
              Index pad);

}  // namespace ad

using ad::Tensor;

}  // namespace xmf
