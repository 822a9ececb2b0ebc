#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include "xmf/geometry.hpp"

namespace xmf {

void write_pcf(const PointCloud& pc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot open for writing: " + path.string());
  out.write("PCF1", 4);
  auto count = std::bit_cast<std::array<char, 4>>(static_cast<std::uint32_t>(pc.rows()));
  out.write(count.data(), 4);
  for (Eigen::Index i = 0; i < pc.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      auto b = std::bit_cast<std::array<char, 4>>(static_cast<float>(pc(i, c)));
      out.write(b.data(), 4);
    }
  }
  if (!out) throw IngestionError("write failed: " + path.string());
}

PointCloud read_pcf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open point cloud: " + path.string());
  std::array<char, 4> magic{};
  std::array<char, 4> word{};
  if (!in.read(magic.data(), 4) || std::string(magic.data(), 4) != "PCF1") {
    throw IngestionError("bad PCF magic in " + path.string());
  }
  if (!in.read(word.data(), 4)) throw IngestionError("truncated PCF header in " + path.string());
  const auto count = std::bit_cast<std::uint32_t>(word);
  PointCloud pc(static_cast<Eigen::Index>(count), 3);
  for (Eigen::Index i = 0; i < pc.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      if (!in.read(word.data(), 4)) {
        throw IngestionError("truncated PCF payload in " + path.string());
      }
      const float v = std::bit_cast<float>(word);
      if (!std::isfinite(v)) throw IngestionError("non-finite coordinate in " + path.string());
      pc(i, c) = v;
    }
  }
  return pc;
}

}  // namespace xmf
