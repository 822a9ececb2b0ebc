#include "xmf/optim.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

namespace xmf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and point-cloud IO assume a little-endian host");

Tensor& ParameterSet::add(std::string name, Matrix init) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  entries_.emplace_back(std::move(name), Tensor(std::move(init), true));
  return entries_.back().second;
}

Tensor& ParameterSet::at(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter: " + name);
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter: " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

void ParameterSet::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

Index ParameterSet::scalar_count() const {
  Index total = 0;
  for (const auto& [n, t] : entries_) total += t.size();
  return total;
}

Adam::Adam(ParameterSet& params, AdamOptions options) : params_(&params), options_(options) {
  for (const auto& [n, t] : params) {
    m_.push_back(Matrix::Zero(t.rows(), t.cols()));
    v_.push_back(Matrix::Zero(t.rows(), t.cols()));
  }
}

void Adam::step() {
  if (m_.size() != params_->size()) {
    throw ContractError("Adam: parameter set changed size after construction");
  }
  for (const auto& [name, t] : *params_) {
    if (!t.requires_grad() || !t.has_grad()) {
      throw ContractError("Adam: parameter '" + name + "' has no gradient");
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  std::size_t i = 0;
  for (auto& [name, t] : *params_) {
    const Matrix& g = t.grad();
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseAbs2();
    auto mhat = m_[i].array() / c1;
    auto vhat = v_[i].array() / c2;
    t.mutable_value().array() -= options_.lr * mhat / (vhat.sqrt() + options_.eps);
    ++i;
  }
}

double StepSchedule::at(int epoch) const {
  double lr = base;
  for (int m : milestones) {
    if (epoch >= m) lr *= factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Checkpoint IO

namespace {

template <class T>
void put(std::ofstream& out, T v) {
  auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
  out.write(bytes.data(), bytes.size());
}

template <class T>
bool get(std::ifstream& in, T& v) {
  std::array<char, sizeof(T)> bytes{};
  if (!in.read(bytes.data(), bytes.size())) return false;
  v = std::bit_cast<T>(bytes);
  return true;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot open checkpoint for writing: " + path.string());
  out.write("XMF1", 4);
  for (const auto& [name, t] : params) {
    if (name.size() > 0xFFFF) throw ConfigError("parameter name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, 2);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    const Matrix& v = t.value();
    for (Index k = 0; k < v.size(); ++k) put<double>(out, v.data()[k]);
  }
  if (!out) throw IngestionError("write failed: " + path.string());
}

std::vector<std::pair<std::string, Matrix>> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint: " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || std::string(magic.data(), 4) != "XMF1") {
    throw SchemaError("not an XMF1 checkpoint: " + path.string());
  }
  std::vector<std::pair<std::string, Matrix>> records;
  std::uint16_t len = 0;
  while (get(in, len)) {
    std::string name(len, '\0');
    std::uint8_t rank = 0;
    if (!in.read(name.data(), len) || !get(in, rank) || rank == 0) {
      throw SchemaError("truncated checkpoint record in " + path.string());
    }
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) {
      if (!get(in, d)) throw SchemaError("truncated dims for '" + name + "' in " + path.string());
    }
    // Leading dims fold into rows; the last dim is columns.
    Index cols = dims.back();
    Index rows = 1;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) rows *= dims[k];
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) {
      if (!get(in, m.data()[k])) {
        throw SchemaError("truncated values for '" + name + "' in " + path.string());
      }
    }
    records.emplace_back(std::move(name), std::move(m));
  }
  return records;
}

void load_checkpoint(ParameterSet& params, const std::filesystem::path& path) {
  auto records = read_checkpoint(path);
  for (auto& [name, t] : params) {
    auto it = std::find_if(records.begin(), records.end(),
                           [&](const auto& r) { return r.first == name; });
    if (it == records.end()) {
      throw SchemaError("checkpoint " + path.string() + " lacks parameter '" + name + "'");
    }
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw SchemaError("checkpoint " + path.string() + ": parameter '" + name + "' is " +
                        std::to_string(it->second.rows()) + "x" +
                        std::to_string(it->second.cols()) + ", model expects " +
                        std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    }
    t.mutable_value() = it->second;
  }
}

}  // namespace xmf
