#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>

#include "xmf/autodiff.hpp"
#include "xmf/geometry.hpp"

namespace xmf {

/// Pinhole camera. Object point p maps to camera coordinates c = R p + t;
/// the camera looks along +z, image u grows along +x and v along +y. Pixel
/// (row j, column i) has its center at (u, v) = (i, j).
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  Index height = 1, width = 1;

  /// Camera at `eye` looking at `target`; `up` fixes the roll.
  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& up, double focal, Index height, Index width);

  void validate() const;
};

/// RGB image with one row per pixel (row-major over H x W) and three
/// channel columns in [0, 1].
struct RgbImage {
  Index height = 0, width = 0;
  Matrix pixels;

  static RgbImage from_gray(const Matrix& gray);
  Matrix to_gray() const;
};

struct RenderConfig {
  double radius = 0.025;  // world-space splat radius
  Index splats_per_pixel = 8;
  double z_near = 1e-4;
  double epsilon = 0.4;          // edge-mask discount
  double log_sigma = 1.5;        // pixels
  double edge_threshold = 0.1;
  double binarize_threshold = 0.1;  // fraction of the [0, 1] value range
  Eigen::Vector3d background = Eigen::Vector3d::Zero();

  void validate() const;
};

struct Projection {
  Tensor uvz;         // kept x 3: (u, v, depth)
  IndexList kept;     // source rows in front of the camera
  Index dropped = 0;  // rows with depth <= z_near
};

/// Pinhole projection, differentiable wrt the points. Points at or behind
/// z_near are dropped and counted.
Projection project(const Tensor& points, const Camera& cam, double z_near = 1e-4);

/// Soft silhouette (H x W) from projected splats. Each splat has screen radius
/// r = radius * fx / z and opacity max(0, 1 - d^2 / r^2) at a pixel at
/// distance d. A pixel composites the `splats_per_pixel` most opaque splats
/// covering it (ties to the lower index) as 1 - prod(1 - a).
Tensor render_splats(const Tensor& uvz, const Camera& cam, double radius, Index splats_per_pixel);

/// project() followed by render_splats().
Tensor render_silhouette(const Tensor& points, const Camera& cam, const RenderConfig& cfg);

/// 1 where the pixel differs from the background by more than the threshold
/// in any channel.
Matrix binarize(const RgbImage& image, const RenderConfig& cfg = {});

/// Scale-normalized Laplacian-of-Gaussian kernel (sigma^2 * LoG), zero-sum,
/// radius ceil(3 sigma).
Matrix log_kernel(double sigma);

/// epsilon where |sigma^2 LoG * S| exceeds the threshold, 1 elsewhere.
/// Borders replicate the nearest pixel.
Matrix edge_mask(const Matrix& silhouette, double sigma, double threshold, double epsilon);

/// sum |M .* (R(pred) - S)| / (H W).
Tensor render_loss(const Tensor& pred, const Matrix& silhouette, const Matrix& mask,
                   const Camera& cam, const RenderConfig& cfg);

/// Convenience form that binarizes the image and builds the edge mask.
Tensor render_loss(const Tensor& pred, const RgbImage& image, const Camera& cam,
                   const RenderConfig& cfg);

// IO. PGM is binary P5 with maxval 255; values are clamped to [0, 1].
void write_pgm(const Matrix& gray, const std::filesystem::path& path);
Matrix read_pgm(const std::filesystem::path& path);

/// {fx, fy, cx, cy, R: 9 floats row-major, t: 3 floats, H, W}
std::string camera_to_json(const Camera& cam);
Camera camera_from_json(const std::string& text);
void write_camera(const Camera& cam, const std::filesystem::path& path);
Camera read_camera(const std::filesystem::path& path);

}  // namespace xmf
