#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "xmf/geometry.hpp"
#include "xmf/render.hpp"

namespace xmf {

enum class ShapeFamily { Sphere, Box, Cylinder, LBracket, Lamp };

const std::vector<ShapeFamily>& all_families();
std::string family_name(ShapeFamily f);
/// ConfigError on an unknown name.
ShapeFamily family_from_name(const std::string& name);

/// Parametric shape. `params` meaning per family:
///   Sphere   {radius}
///   Box      {x, y, z} full extents
///   Cylinder {radius, height}
///   LBracket {length, height, depth, thickness}
///   Lamp     {base radius, pole height, shade bottom radius, shade top radius, shade height}
struct ShapeSpec {
  ShapeFamily family = ShapeFamily::Sphere;
  std::vector<double> params{1.0};
  Index points = 2048;

  void validate() const;
  /// Random parameters for the family.
  static ShapeSpec random(ShapeFamily family, Index points, Rng& rng);
};

/// Uniform surface samples in the shape's own frame (not normalized).
PointCloud sample_surface(const ShapeSpec& spec, Rng& rng);
/// Center of the shape's bounding volume in its own frame.
Eigen::RowVector3d shape_center(const ShapeSpec& spec);
/// sample_surface() centered on shape_center() and scaled so the farthest
/// point sits at radius 1.
PointCloud gen_shape(const ShapeSpec& spec, Rng& rng);

struct PartialConfig {
  double cut_angle_deg = 90.0;   // keep points within this angle of the view direction
  double angle_jitter_deg = 10.0;  // uniform jitter on the cut angle
};

/// Keeps the points whose direction from the centroid lies within the (jittered)
/// cut angle of `view_dir`, then resamples them to n points.
PointCloud partialize_view(const PointCloud& y, const Eigen::Vector3d& view_dir, Index n, Rng& rng,
                           const PartialConfig& cfg = {});

struct RingConfig {
  double radius = 2.5;
  std::vector<double> elevations_deg{15.0, 30.0};
  double focal_fraction = 0.92;  // focal length in units of image width
};

/// Camera v sits at azimuth 2 pi v / n and elevation elevations[v % len], looking
/// at the origin with +y up.
std::vector<Camera> ring_cameras(Index n_views, Index image_size, const RingConfig& ring = {});

struct View {
  RgbImage image;
  Camera camera;
  Matrix silhouette;
};

/// Renders `y` from every ring camera; the soft render is the grayscale image
/// and its binarization the silhouette.
std::vector<View> render_views(const PointCloud& y, Index n_views, Index image_size, const RenderConfig& render,
                               const RingConfig& ring = {});

// ---------------------------------------------------------------------------
// Dataset layout
//   root/manifest.csv                 sample_id,family,n_views
//   root/dataset.json                 generation settings (optional for external data)
//   root/<id>/complete.pcf
//   root/<id>/partial_<v>.pcf, view_<v>.pgm, cam_<v>.json, silhouette_<v>.pgm

struct DataConfig {
  Index shapes = 16;
  Index views = 8;
  Index n_points = 512;
  Index image_size = 64;
  RenderConfig render;
  RingConfig ring;
  PartialConfig partial;
  std::vector<ShapeFamily> families = all_families();
  std::uint64_t seed = 0;

  void validate() const;
};

std::string data_config_to_json(const DataConfig& cfg);
DataConfig data_config_from_json(const std::string& text);

/// Deterministic 80/20 split on a hash of the id.
enum class Split { Train, Test, All };
Split split_of(const std::string& sample_id);
std::string split_name(Split s);

struct Entry {
  std::string id;
  std::string family;
  Index n_views = 0;
  std::filesystem::path dir;
};

/// Writes the dataset and returns its entries (manifest order).
std::vector<Entry> generate_dataset(const std::filesystem::path& root, const DataConfig& cfg);

enum class Purpose { Train, Eval };

struct AccessRecord {
  Purpose purpose;
  std::string file;
  bool ground_truth;
};

/// Thread-safe record of every dataset file read.
class AccessLog {
 public:
  void record(Purpose purpose, const std::filesystem::path& file, bool ground_truth);
  std::vector<AccessRecord> records() const;
  std::size_t ground_truth_reads(Purpose purpose) const;
  void write_csv(const std::filesystem::path& path) const;

 private:
  mutable std::mutex mu_;
  std::vector<AccessRecord> records_;
};

/// A training/eval example: the partial from view v paired with the image
/// (and camera) of view image_view(v).
struct ViewSample {
  std::string id;
  Index view = 0;
  Index image_view = 0;
  PointCloud partial;
  RgbImage image;
  Camera camera;
  Matrix silhouette;  // empty when the file is absent
};

class Dataset {
 public:
  /// Reads the manifest. A missing or empty directory yields no entries; a
  /// missing root path throws IngestionError.
  static Dataset open(const std::filesystem::path& root, std::shared_ptr<AccessLog> log = nullptr);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry> split(Split s) const;
  const std::optional<DataConfig>& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  /// Index of the image paired with the partial from view v.
  static Index image_view(Index v, Index n_views);

  /// Never touches complete.pcf. `expected_points` > 0 enforces the partial
  /// cardinality (SchemaError otherwise).
  ViewSample load_view(const Entry& e, Index v, Purpose purpose, Index expected_points = 0) const;
  PointCloud load_complete(const Entry& e, Purpose purpose, Index expected_points = 0) const;

 private:
  std::filesystem::path root_;
  std::vector<Entry> entries_;
  std::optional<DataConfig> config_;
  std::shared_ptr<AccessLog> log_;
};

}  // namespace xmf
