#include "xmf/render.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace xmf {

Camera Camera::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                       const Eigen::Vector3d& up, double focal, Index height, Index width) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-12) throw ConfigError("look_at: up vector parallel to view direction");
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);
  Camera cam;
  cam.R.row(0) = right.transpose();
  cam.R.row(1) = down.transpose();
  cam.R.row(2) = forward.transpose();
  cam.t = -cam.R * eye;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * static_cast<double>(width - 1);
  cam.cy = 0.5 * static_cast<double>(height - 1);
  cam.height = height;
  cam.width = width;
  return cam;
}

void Camera::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
  if (height < 1 || width < 1) throw ConfigError("camera image size must be positive");
  if ((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() > 1e-9) {
    throw ConfigError("camera rotation is not orthonormal");
  }
}

RgbImage RgbImage::from_gray(const Matrix& gray) {
  RgbImage img;
  img.height = gray.rows();
  img.width = gray.cols();
  img.pixels.resize(gray.size(), 3);
  for (Index k = 0; k < gray.size(); ++k) img.pixels.row(k).setConstant(gray.data()[k]);
  return img;
}

Matrix RgbImage::to_gray() const {
  Matrix g(height, width);
  for (Index k = 0; k < g.size(); ++k) g.data()[k] = pixels.row(k).mean();
  return g;
}

void RenderConfig::validate() const {
  if (!(radius > 0.0)) throw ConfigError("render radius must be positive");
  if (splats_per_pixel < 1) throw ConfigError("splats_per_pixel must be >= 1");
  if (!(log_sigma > 0.0)) throw ConfigError("LoG sigma must be positive");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("edge epsilon must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// Projection

Projection project(const Tensor& points, const Camera& cam, double z_near) {
  if (points.cols() != 3) throw DimensionError("project: points must be n x 3");
  const Matrix& p = points.value();
  Projection out;
  for (Index i = 0; i < p.rows(); ++i) {
    const double z = cam.R.row(2).dot(p.row(i)) + cam.t(2);
    if (z > z_near) {
      out.kept.push_back(i);
    } else {
      ++out.dropped;
    }
  }
  Tensor front = out.kept.size() == static_cast<std::size_t>(p.rows())
                     ? points
                     : ad::gather_rows(points, out.kept);

  const Matrix& q = front.value();
  Matrix cam_pts = (q * cam.R.transpose()).rowwise() + cam.t.transpose();
  Matrix uvz(q.rows(), 3);
  for (Index i = 0; i < q.rows(); ++i) {
    const double z = cam_pts(i, 2);
    uvz(i, 0) = cam.fx * cam_pts(i, 0) / z + cam.cx;
    uvz(i, 1) = cam.fy * cam_pts(i, 1) / z + cam.cy;
    uvz(i, 2) = z;
  }
  out.uvz = Tensor::make_result(
      std::move(uvz), "project", {front},
      [cam_pts = std::move(cam_pts), R = cam.R, fx = cam.fx, fy = cam.fy](ad::Node& self) {
        auto& parent = *self.parents[0];
        Matrix g(cam_pts.rows(), 3);
        for (Index i = 0; i < cam_pts.rows(); ++i) {
          const double x = cam_pts(i, 0), y = cam_pts(i, 1), z = cam_pts(i, 2);
          const double gu = self.grad(i, 0), gv = self.grad(i, 1), gz = self.grad(i, 2);
          Eigen::Vector3d gc(gu * fx / z, gv * fy / z,
                             gz - gu * fx * x / (z * z) - gv * fy * y / (z * z));
          g.row(i) = (R.transpose() * gc).transpose();
        }
        ad::accumulate(parent, g);
      });
  return out;
}

// ---------------------------------------------------------------------------
// Splatting

namespace {

struct Hit {
  Index pixel;
  double alpha;
  Index splat;
};

}  // namespace

Tensor render_splats(const Tensor& uvz, const Camera& cam, double radius, Index splats_per_pixel) {
  if (uvz.cols() != 3) throw DimensionError("render_splats: expected n x 3 (u, v, z)");
  if (!(radius > 0.0)) throw ConfigError("render_splats: radius must be positive");
  const Matrix& s = uvz.value();
  const Index H = cam.height, W = cam.width;

  std::vector<Hit> hits;
  for (Index i = 0; i < s.rows(); ++i) {
    const double u = s(i, 0), v = s(i, 1), z = s(i, 2);
    const double r = radius * cam.fx / z;
    const double r2 = r * r;
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::ceil(u - r)));
    const Index x1 = std::min<Index>(W - 1, static_cast<Index>(std::floor(u + r)));
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::ceil(v - r)));
    const Index y1 = std::min<Index>(H - 1, static_cast<Index>(std::floor(v + r)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - u, dy = static_cast<double>(y) - v;
        const double d2 = dx * dx + dy * dy;
        if (d2 < r2) hits.push_back({y * W + x, 1.0 - d2 / r2, i});
      }
    }
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.pixel != b.pixel) return a.pixel < b.pixel;
    if (a.alpha != b.alpha) return a.alpha > b.alpha;
    return a.splat < b.splat;
  });

  // Keep the most opaque splats per pixel.
  std::vector<Hit> used;
  Matrix image = Matrix::Zero(H, W);
  for (std::size_t k = 0; k < hits.size();) {
    std::size_t end = k;
    while (end < hits.size() && hits[end].pixel == hits[k].pixel) ++end;
    const std::size_t take = std::min<std::size_t>(end - k, static_cast<std::size_t>(splats_per_pixel));
    double transmit = 1.0;
    for (std::size_t j = k; j < k + take; ++j) {
      transmit *= 1.0 - hits[j].alpha;
      used.push_back(hits[j]);
    }
    image.data()[hits[k].pixel] = 1.0 - transmit;
    k = end;
  }

  return Tensor::make_result(
      std::move(image), "render_splats", {uvz},
      [used = std::move(used), radius, fx = cam.fx, W](ad::Node& self) {
        auto& parent = *self.parents[0];
        const Matrix& s = parent.value;
        Matrix g = Matrix::Zero(s.rows(), 3);
        for (std::size_t k = 0; k < used.size();) {
          std::size_t end = k;
          while (end < used.size() && used[end].pixel == used[k].pixel) ++end;
          const Index pixel = used[k].pixel;
          const double up = self.grad.data()[pixel];
          if (up != 0.0) {
            const double px = static_cast<double>(pixel % W);
            const double py = static_cast<double>(pixel / W);
            for (std::size_t i = k; i < end; ++i) {
              double others = 1.0;
              for (std::size_t j = k; j < end; ++j) {
                if (j != i) others *= 1.0 - used[j].alpha;
              }
              const Index sp = used[i].splat;
              const double u = s(sp, 0), v = s(sp, 1), z = s(sp, 2);
              const double r = radius * fx / z;
              const double dx = px - u, dy = py - v;
              const double d2 = dx * dx + dy * dy;
              const double ga = up * others;
              g(sp, 0) += ga * 2.0 * dx / (r * r);
              g(sp, 1) += ga * 2.0 * dy / (r * r);
              // da/dr = 2 d^2 / r^3, dr/dz = -r / z
              g(sp, 2) += ga * (2.0 * d2 / (r * r * r)) * (-r / z);
            }
          }
          k = end;
        }
        ad::accumulate(parent, g);
      });
}

Tensor render_silhouette(const Tensor& points, const Camera& cam, const RenderConfig& cfg) {
  auto proj = project(points, cam, cfg.z_near);
  return render_splats(proj.uvz, cam, cfg.radius, cfg.splats_per_pixel);
}

// ---------------------------------------------------------------------------
// Silhouette processing

Matrix binarize(const RgbImage& image, const RenderConfig& cfg) {
  Matrix out(image.height, image.width);
  for (Index k = 0; k < out.size(); ++k) {
    const double diff = (image.pixels.row(k).transpose() - cfg.background).cwiseAbs().maxCoeff();
    out.data()[k] = diff > cfg.binarize_threshold ? 1.0 : 0.0;
  }
  return out;
}

Matrix log_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("log_kernel: sigma must be positive");
  const Index rad = static_cast<Index>(std::ceil(3.0 * sigma));
  const Index size = 2 * rad + 1;
  Matrix k(size, size);
  const double s2 = sigma * sigma;
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double r2 = static_cast<double>((x - rad) * (x - rad) + (y - rad) * (y - rad));
      // sigma^2 * LoG
      k(y, x) = -1.0 / (M_PI * s2) * (1.0 - r2 / (2.0 * s2)) * std::exp(-r2 / (2.0 * s2));
    }
  }
  k.array() -= k.mean();
  return k;
}

Matrix edge_mask(const Matrix& silhouette, double sigma, double threshold, double epsilon) {
  const Matrix k = log_kernel(sigma);
  const Index rad = k.rows() / 2;
  const Index H = silhouette.rows(), W = silhouette.cols();
  Matrix mask(H, W);
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      double acc = 0.0;
      for (Index dy = -rad; dy <= rad; ++dy) {
        const Index yy = std::clamp<Index>(y + dy, 0, H - 1);
        for (Index dx = -rad; dx <= rad; ++dx) {
          const Index xx = std::clamp<Index>(x + dx, 0, W - 1);
          acc += k(dy + rad, dx + rad) * silhouette(yy, xx);
        }
      }
      mask(y, x) = std::abs(acc) > threshold ? epsilon : 1.0;
    }
  }
  return mask;
}

Tensor render_loss(const Tensor& pred, const Matrix& silhouette, const Matrix& mask,
                   const Camera& cam, const RenderConfig& cfg) {
  if (silhouette.rows() != cam.height || silhouette.cols() != cam.width ||
      mask.rows() != cam.height || mask.cols() != cam.width) {
    throw DimensionError("render_loss: silhouette/mask size differs from camera image size");
  }
  Tensor rendered = render_silhouette(pred, cam, cfg);
  Tensor diff = ad::abs(ad::sub(rendered, Tensor(silhouette)));
  const double pixels = static_cast<double>(cam.height * cam.width);
  return ad::scale(ad::sum(ad::mul(diff, Tensor(mask))), 1.0 / pixels);
}

Tensor render_loss(const Tensor& pred, const RgbImage& image, const Camera& cam,
                   const RenderConfig& cfg) {
  const Matrix s = binarize(image, cfg);
  const Matrix m = edge_mask(s, cfg.log_sigma, cfg.edge_threshold, cfg.epsilon);
  return render_loss(pred, s, m, cam, cfg);
}

// ---------------------------------------------------------------------------
// IO

void write_pgm(const Matrix& gray, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot open for writing: " + path.string());
  out << "P5\n" << gray.cols() << ' ' << gray.rows() << "\n255\n";
  std::string bytes(static_cast<std::size_t>(gray.size()), '\0');
  for (Index k = 0; k < gray.size(); ++k) {
    const double v = std::clamp(gray.data()[k], 0.0, 1.0);
    bytes[static_cast<std::size_t>(k)] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestionError("write failed: " + path.string());
}

Matrix read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open image: " + path.string());
  auto token = [&]() {
    std::string t;
    char c = 0;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P5") throw IngestionError("not a binary PGM (P5): " + path.string());
  Index w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw IngestionError("malformed PGM header: " + path.string());
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw IngestionError("unsupported PGM geometry/maxval: " + path.string());
  }
  std::string bytes(static_cast<std::size_t>(w * h), '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IngestionError("truncated PGM payload: " + path.string());
  }
  Matrix m(h, w);
  for (Index k = 0; k < m.size(); ++k) {
    m.data()[k] = static_cast<double>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(k)])) / maxval;
  }
  return m;
}

std::string camera_to_json(const Camera& cam) {
  nlohmann::json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  std::vector<double> r;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r.push_back(cam.R(a, b));
  j["R"] = r;
  j["t"] = std::vector<double>{cam.t(0), cam.t(1), cam.t(2)};
  j["H"] = cam.height;
  j["W"] = cam.width;
  return j.dump(2);
}

Camera camera_from_json(const std::string& text) {
  Camera cam;
  try {
    auto j = nlohmann::json::parse(text);
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    auto r = j.at("R").get<std::vector<double>>();
    auto t = j.at("t").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw SchemaError("camera: R needs 9 values, t needs 3");
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) cam.R(a, b) = r[static_cast<std::size_t>(3 * a + b)];
    cam.t = Eigen::Vector3d(t[0], t[1], t[2]);
    cam.height = j.at("H").get<Index>();
    cam.width = j.at("W").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("camera JSON: ") + e.what());
  }
  cam.validate();
  return cam;
}

void write_camera(const Camera& cam, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot open for writing: " + path.string());
  out << camera_to_json(cam) << '\n';
}

Camera read_camera(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open camera: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return camera_from_json(ss.str());
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

}  // namespace xmf
