#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xmf/autodiff.hpp"

namespace xmf {

/// Ordered collection of named trainable tensors. Order is insertion order and
/// is the order used by checkpoints and optimizers.
class ParameterSet {
 public:
  Tensor& add(std::string name, Matrix init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  Index scalar_count() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers follow the ParameterSet order.
class Adam {
 public:
  Adam(ParameterSet& params, AdamOptions options = {});

  /// Applies one update from the current grads. Throws ContractError if a
  /// parameter has no gradient buffer.
  void step();
  void zero_grad() { params_->zero_grad(); }

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  std::int64_t steps() const { return t_; }

 private:
  ParameterSet* params_;
  AdamOptions options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

/// Piecewise-constant learning rate: base * factor^(number of milestones <= epoch).
struct StepSchedule {
  double base = 1e-3;
  std::vector<int> milestones{25, 125};
  double factor = 0.1;

  double at(int epoch) const;
};

// Checkpoint file: "XMF1", then per parameter: u16 name length, UTF-8 name,
// u8 rank, u32 dims, f64 values. All little-endian; records run to EOF.

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);

/// Reads every record of a checkpoint file, in file order.
std::vector<std::pair<std::string, Matrix>> read_checkpoint(const std::filesystem::path& path);

/// Loads values into an existing parameter set. Missing names or mismatched
/// shapes raise SchemaError.
void load_checkpoint(ParameterSet& params, const std::filesystem::path& path);

}  // namespace xmf
