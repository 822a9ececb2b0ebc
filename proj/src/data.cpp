#include "xmf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace xmf {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Eigen::RowVector3d row(double x, double y, double z) { return Eigen::RowVector3d(x, y, z); }

// A surface patch with its area and a uniform sampler.
struct Patch {
  double area;
  std::function<Eigen::RowVector3d(Rng&)> sample;
};

struct Aabb {
  Eigen::Vector3d lo, hi;
  bool strictly_inside(const Eigen::RowVector3d& p, double eps = 1e-12) const {
    for (int a = 0; a < 3; ++a)
      if (!(p(a) > lo(a) + eps && p(a) < hi(a) - eps)) return false;
    return true;
  }
};

void add_box(std::vector<Patch>& out, const Aabb& b) {
  const Eigen::Vector3d e = b.hi - b.lo;
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      const double fixed = side == 0 ? b.lo(axis) : b.hi(axis);
      out.push_back({e(u) * e(v), [=](Rng& rng) {
                       Eigen::RowVector3d p;
                       p(axis) = fixed;
                       p(u) = uniform(rng, b.lo(u), b.hi(u));
                       p(v) = uniform(rng, b.lo(v), b.hi(v));
                       return p;
                     }});
    }
  }
}

// Lateral surface of a y-axis frustum from radius r0 at y0 to r1 at y1.
void add_frustum(std::vector<Patch>& out, double r0, double r1, double y0, double y1) {
  const double h = y1 - y0;
  const double slant = std::sqrt(h * h + (r1 - r0) * (r1 - r0));
  const double rmax = std::max(r0, r1);
  out.push_back({kPi * (r0 + r1) * slant, [=](Rng& rng) {
                   // Area density is proportional to the radius at height t.
                   double t, r;
                   do {
                     t = uniform(rng, 0.0, 1.0);
                     r = r0 + (r1 - r0) * t;
                   } while (uniform(rng, 0.0, rmax) > r);
                   const double th = uniform(rng, 0.0, 2.0 * kPi);
                   return row(r * std::cos(th), y0 + h * t, r * std::sin(th));
                 }});
}

void add_disk(std::vector<Patch>& out, double r, double y) {
  out.push_back({kPi * r * r, [=](Rng& rng) {
                   const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
                   const double th = uniform(rng, 0.0, 2.0 * kPi);
                   return row(rr * std::cos(th), y, rr * std::sin(th));
                 }});
}

PointCloud sample_patches(const std::vector<Patch>& patches, Index n, Rng& rng,
                          const std::function<bool(std::size_t, const Eigen::RowVector3d&)>& reject = {}) {
  std::vector<double> areas;
  for (const auto& p : patches) areas.push_back(p.area);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  PointCloud pc(n, 3);
  Index filled = 0;
  while (filled < n) {
    const std::size_t k = pick(rng);
    Eigen::RowVector3d p = patches[k].sample(rng);
    if (reject && reject(k, p)) continue;
    pc.row(filled++) = p;
  }
  return pc;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

const std::vector<ShapeFamily>& all_families() {
  static const std::vector<ShapeFamily> f{ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder,
                                          ShapeFamily::LBracket, ShapeFamily::Lamp};
  return f;
}

std::string family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Box: return "box";
    case ShapeFamily::Cylinder: return "cylinder";
    case ShapeFamily::LBracket: return "lbracket";
    case ShapeFamily::Lamp: return "lamp";
  }
  return "unknown";
}

ShapeFamily family_from_name(const std::string& name) {
  for (ShapeFamily f : all_families())
    if (family_name(f) == name) return f;
  throw ConfigError("unknown shape family '" + name + "'");
}

void ShapeSpec::validate() const {
  static const std::size_t counts[] = {1, 3, 2, 4, 5};
  const std::size_t want = counts[static_cast<int>(family)];
  if (params.size() != want) {
    throw ConfigError(family_name(family) + " needs " + std::to_string(want) + " parameters");
  }
  for (double p : params)
    if (!(p > 0.0)) throw ConfigError("shape parameters must be positive");
  if (points < 1) throw ConfigError("shape point budget must be positive");
  if (family == ShapeFamily::LBracket && (params[3] >= params[0] || params[3] >= params[1])) {
    throw ConfigError("lbracket thickness must be below length and height");
  }
}

ShapeSpec ShapeSpec::random(ShapeFamily family, Index points, Rng& rng) {
  ShapeSpec s;
  s.family = family;
  s.points = points;
  switch (family) {
    case ShapeFamily::Sphere:
      s.params = {uniform(rng, 0.5, 1.5)};
      break;
    case ShapeFamily::Box:
      s.params = {uniform(rng, 0.4, 1.2), uniform(rng, 0.4, 1.2), uniform(rng, 0.4, 1.2)};
      break;
    case ShapeFamily::Cylinder:
      s.params = {uniform(rng, 0.2, 0.6), uniform(rng, 0.5, 1.5)};
      break;
    case ShapeFamily::LBracket:
      s.params = {uniform(rng, 0.8, 1.4), uniform(rng, 0.6, 1.2), uniform(rng, 0.3, 0.8), uniform(rng, 0.1, 0.25)};
      break;
    case ShapeFamily::Lamp:
      s.params = {uniform(rng, 0.25, 0.45), uniform(rng, 0.5, 1.0), uniform(rng, 0.3, 0.5), uniform(rng, 0.1, 0.25),
                  uniform(rng, 0.25, 0.45)};
      break;
  }
  return s;
}

PointCloud sample_surface(const ShapeSpec& spec, Rng& rng) {
  spec.validate();
  const auto& p = spec.params;
  std::vector<Patch> patches;
  switch (spec.family) {
    case ShapeFamily::Sphere: {
      std::normal_distribution<double> g;
      PointCloud pc(spec.points, 3);
      for (Index i = 0; i < spec.points; ++i) {
        Eigen::RowVector3d d;
        do {
          d = row(g(rng), g(rng), g(rng));
        } while (d.norm() < 1e-12);
        pc.row(i) = p[0] * d.normalized();
      }
      return pc;
    }
    case ShapeFamily::Box: {
      const Eigen::Vector3d half(p[0] / 2, p[1] / 2, p[2] / 2);
      add_box(patches, {-half, half});
      return sample_patches(patches, spec.points, rng);
    }
    case ShapeFamily::Cylinder: {
      add_frustum(patches, p[0], p[0], -p[1] / 2, p[1] / 2);
      add_disk(patches, p[0], -p[1] / 2);
      add_disk(patches, p[0], p[1] / 2);
      return sample_patches(patches, spec.points, rng);
    }
    case ShapeFamily::LBracket: {
      const double len = p[0], h = p[1], d = p[2], t = p[3];
      const Aabb foot{{0, 0, 0}, {len, t, d}};
      const Aabb wall{{0, 0, 0}, {t, h, d}};
      add_box(patches, foot);
      add_box(patches, wall);
      // The first six patches belong to the foot.
      return sample_patches(patches, spec.points, rng, [&](std::size_t k, const Eigen::RowVector3d& q) {
        return k < 6 ? wall.strictly_inside(q) : foot.strictly_inside(q);
      });
    }
    case ShapeFamily::Lamp: {
      const double base_r = p[0], pole_h = p[1], shade_r0 = p[2], shade_r1 = p[3], shade_h = p[4];
      const double base_t = 0.06, pole_r = 0.04;
      add_frustum(patches, base_r, base_r, 0.0, base_t);
      add_disk(patches, base_r, 0.0);
      add_disk(patches, base_r, base_t);
      add_frustum(patches, pole_r, pole_r, base_t, base_t + pole_h);
      add_frustum(patches, shade_r0, shade_r1, base_t + pole_h, base_t + pole_h + shade_h);
      return sample_patches(patches, spec.points, rng, [&](std::size_t k, const Eigen::RowVector3d& q) {
        // Base top covered by the pole foot.
        return k == 2 && std::hypot(q(0), q(2)) < pole_r;
      });
    }
  }
  throw ConfigError("unhandled shape family");
}

Eigen::RowVector3d shape_center(const ShapeSpec& spec) {
  spec.validate();
  const auto& p = spec.params;
  switch (spec.family) {
    case ShapeFamily::LBracket:
      return row(p[0] / 2, p[1] / 2, p[2] / 2);
    case ShapeFamily::Lamp:
      return row(0.0, (0.06 + p[1] + p[4]) / 2, 0.0);
    default:
      return row(0.0, 0.0, 0.0);
  }
}

PointCloud gen_shape(const ShapeSpec& spec, Rng& rng) {
  PointCloud pc = sample_surface(spec, rng);
  pc.rowwise() -= shape_center(spec);
  const double radius = pc.rowwise().norm().maxCoeff();
  if (radius > 0.0) pc /= radius;
  return pc;
}

PointCloud partialize_view(const PointCloud& y, const Eigen::Vector3d& view_dir, Index n, Rng& rng,
                           const PartialConfig& cfg) {
  if (y.rows() < 1) throw SizeError("partialize_view: empty cloud");
  if (view_dir.norm() < 1e-12) throw ConfigError("partialize_view: zero view direction");
  const Eigen::RowVector3d d = view_dir.normalized().transpose();
  const Eigen::RowVector3d c = y.colwise().mean();
  const double angle = cfg.cut_angle_deg + uniform(rng, -cfg.angle_jitter_deg, cfg.angle_jitter_deg);
  const double cos_cut = std::cos(angle * kPi / 180.0);
  IndexList keep;
  Index best = 0;
  double best_cos = -2.0;
  for (Index i = 0; i < y.rows(); ++i) {
    const Eigen::RowVector3d r = y.row(i) - c;
    const double len = r.norm();
    const double cs = len > 1e-12 ? r.dot(d) / len : 1.0;
    if (cs >= cos_cut) keep.push_back(i);
    if (cs > best_cos) {
      best_cos = cs;
      best = i;
    }
  }
  if (keep.empty()) keep.push_back(best);
  return resample(PointCloud(take_rows(y, keep)), n, rng);
}

std::vector<Camera> ring_cameras(Index n_views, Index image_size, const RingConfig& ring) {
  if (n_views < 1) throw ConfigError("ring_cameras: need at least one view");
  if (ring.elevations_deg.empty()) throw ConfigError("ring_cameras: empty elevation set");
  std::vector<Camera> cams;
  for (Index v = 0; v < n_views; ++v) {
    const double az = 2.0 * kPi * static_cast<double>(v) / static_cast<double>(n_views);
    const double el = ring.elevations_deg[static_cast<std::size_t>(v) % ring.elevations_deg.size()] * kPi / 180.0;
    const Eigen::Vector3d eye = ring.radius * Eigen::Vector3d(std::cos(el) * std::cos(az), std::sin(el),
                                                              std::cos(el) * std::sin(az));
    cams.push_back(Camera::look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(),
                                   ring.focal_fraction * static_cast<double>(image_size), image_size, image_size));
  }
  return cams;
}

std::vector<View> render_views(const PointCloud& y, Index n_views, Index image_size, const RenderConfig& render,
                               const RingConfig& ring) {
  std::vector<View> views;
  for (const Camera& cam : ring_cameras(n_views, image_size, ring)) {
    View v;
    v.camera = cam;
    v.image = RgbImage::from_gray(render_silhouette(Tensor(Matrix(y)), cam, render).value());
    v.silhouette = binarize(v.image, render);
    views.push_back(std::move(v));
  }
  return views;
}

// ---------------------------------------------------------------------------
// Config

void DataConfig::validate() const {
  if (shapes < 1) throw ConfigError("shapes must be positive");
  if (views < 1) throw ConfigError("views must be positive");
  if (n_points < 1) throw ConfigError("n_points must be positive");
  if (image_size < 1) throw ConfigError("image_size must be positive");
  if (families.empty()) throw ConfigError("at least one shape family is required");
  render.validate();
}

std::string data_config_to_json(const DataConfig& c) {
  nlohmann::json j;
  j["shapes"] = c.shapes;
  j["views"] = c.views;
  j["n_points"] = c.n_points;
  j["image_size"] = c.image_size;
  j["seed"] = c.seed;
  std::vector<std::string> fam;
  for (auto f : c.families) fam.push_back(family_name(f));
  j["families"] = fam;
  j["render"] = {{"radius", c.render.radius},
                 {"splats_per_pixel", c.render.splats_per_pixel},
                 {"z_near", c.render.z_near},
                 {"epsilon", c.render.epsilon},
                 {"log_sigma", c.render.log_sigma},
                 {"edge_threshold", c.render.edge_threshold},
                 {"binarize_threshold", c.render.binarize_threshold},
                 {"background", {c.render.background(0), c.render.background(1), c.render.background(2)}}};
  j["ring"] = {{"radius", c.ring.radius},
               {"elevations_deg", c.ring.elevations_deg},
               {"focal_fraction", c.ring.focal_fraction}};
  j["partial"] = {{"cut_angle_deg", c.partial.cut_angle_deg}, {"angle_jitter_deg", c.partial.angle_jitter_deg}};
  return j.dump(2);
}

DataConfig data_config_from_json(const std::string& text) {
  DataConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.shapes = j.value("shapes", c.shapes);
    c.views = j.value("views", c.views);
    c.n_points = j.value("n_points", c.n_points);
    c.image_size = j.value("image_size", c.image_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("families")) {
      c.families.clear();
      for (const auto& f : j.at("families")) c.families.push_back(family_from_name(f.get<std::string>()));
    }
    if (j.contains("render")) {
      const auto& r = j.at("render");
      c.render.radius = r.value("radius", c.render.radius);
      c.render.splats_per_pixel = r.value("splats_per_pixel", c.render.splats_per_pixel);
      c.render.z_near = r.value("z_near", c.render.z_near);
      c.render.epsilon = r.value("epsilon", c.render.epsilon);
      c.render.log_sigma = r.value("log_sigma", c.render.log_sigma);
      c.render.edge_threshold = r.value("edge_threshold", c.render.edge_threshold);
      c.render.binarize_threshold = r.value("binarize_threshold", c.render.binarize_threshold);
      if (r.contains("background")) {
        auto bg = r.at("background").get<std::vector<double>>();
        if (bg.size() != 3) throw SchemaError("render.background needs 3 values");
        c.render.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
      }
    }
    if (j.contains("ring")) {
      const auto& r = j.at("ring");
      c.ring.radius = r.value("radius", c.ring.radius);
      c.ring.elevations_deg = r.value("elevations_deg", c.ring.elevations_deg);
      c.ring.focal_fraction = r.value("focal_fraction", c.ring.focal_fraction);
    }
    if (j.contains("partial")) {
      const auto& p = j.at("partial");
      c.partial.cut_angle_deg = p.value("cut_angle_deg", c.partial.cut_angle_deg);
      c.partial.angle_jitter_deg = p.value("angle_jitter_deg", c.partial.angle_jitter_deg);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("dataset config: ") + e.what());
  }
  return c;
}

Split split_of(const std::string& sample_id) { return fnv1a(sample_id) % 5 == 0 ? Split::Test : Split::Train; }

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::All: return "all";
  }
  return "all";
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::string sample_id(ShapeFamily f, Index i) {
  std::ostringstream os;
  os << family_name(f) << '_' << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

std::string indexed(const char* stem, Index v, const char* ext) {
  return std::string(stem) + "_" + std::to_string(v) + ext;
}

}  // namespace

std::vector<Entry> generate_dataset(const std::filesystem::path& root, const DataConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IngestionError("cannot create dataset directory " + root.string() + ": " + ec.message());

  std::vector<Entry> entries;
  std::ofstream manifest(root / "manifest.csv");
  if (!manifest) throw IngestionError("cannot write " + (root / "manifest.csv").string());
  manifest << "sample_id,family,n_views\n";
  const auto cams = ring_cameras(cfg.views, cfg.image_size, cfg.ring);

  for (Index i = 0; i < cfg.shapes; ++i) {
    const ShapeFamily fam = cfg.families[static_cast<std::size_t>(i) % cfg.families.size()];
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    Rng rng(seq);
    const ShapeSpec spec = ShapeSpec::random(fam, 4 * cfg.n_points, rng);
    const PointCloud dense = gen_shape(spec, rng);
    const PointCloud complete = quantize_f32(resample(dense, cfg.n_points, rng));

    Entry e{sample_id(fam, i), family_name(fam), cfg.views, root / sample_id(fam, i)};
    std::filesystem::create_directories(e.dir, ec);
    if (ec) throw IngestionError("cannot create " + e.dir.string() + ": " + ec.message());
    write_pcf(complete, e.dir / "complete.pcf");
    const auto views = render_views(complete, cfg.views, cfg.image_size, cfg.render, cfg.ring);
    for (Index v = 0; v < cfg.views; ++v) {
      const Camera& cam = cams[static_cast<std::size_t>(v)];
      const Eigen::Vector3d eye = -cam.R.transpose() * cam.t;
      const PointCloud partial = quantize_f32(partialize_view(complete, eye, cfg.n_points, rng, cfg.partial));
      write_pcf(partial, e.dir / indexed("partial", v, ".pcf"));
      const View& view = views[static_cast<std::size_t>(v)];
      write_pgm(view.image.to_gray(), e.dir / indexed("view", v, ".pgm"));
      write_camera(cam, e.dir / indexed("cam", v, ".json"));
      write_pgm(view.silhouette, e.dir / indexed("silhouette", v, ".pgm"));
    }
    manifest << e.id << ',' << e.family << ',' << e.n_views << '\n';
    entries.push_back(std::move(e));
  }
  std::ofstream conf(root / "dataset.json");
  conf << data_config_to_json(cfg) << '\n';
  if (!manifest || !conf) throw IngestionError("failed writing dataset metadata under " + root.string());
  return entries;
}

// ---------------------------------------------------------------------------
// Access log

void AccessLog::record(Purpose purpose, const std::filesystem::path& file, bool ground_truth) {
  std::lock_guard lock(mu_);
  records_.push_back({purpose, file.string(), ground_truth});
}

std::vector<AccessRecord> AccessLog::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::size_t AccessLog::ground_truth_reads(Purpose purpose) const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [&](const AccessRecord& r) {
    return r.ground_truth && r.purpose == purpose;
  }));
}

void AccessLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write access log " + path.string());
  out << "purpose,ground_truth,file\n";
  for (const auto& r : records()) {
    out << (r.purpose == Purpose::Train ? "train" : "eval") << ',' << (r.ground_truth ? 1 : 0) << ',' << r.file
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Loading

Dataset Dataset::open(const std::filesystem::path& root, std::shared_ptr<AccessLog> log) {
  if (!std::filesystem::is_directory(root)) throw IngestionError("dataset root not found: " + root.string());
  Dataset ds;
  ds.root_ = root;
  ds.log_ = std::move(log);
  const auto manifest = root / "manifest.csv";
  if (!std::filesystem::exists(manifest)) {
    if (!std::filesystem::is_empty(root)) throw IngestionError("missing manifest: " + manifest.string());
    return ds;
  }
  std::ifstream in(manifest);
  if (!in) throw IngestionError("cannot read " + manifest.string());
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,family,n_views") throw SchemaError(manifest.string() + ":1: unexpected header");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, fam, nv;
    if (!std::getline(ss, id, ',') || !std::getline(ss, fam, ',') || !std::getline(ss, nv)) {
      throw SchemaError(manifest.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    }
    Index n = 0;
    try {
      n = std::stol(nv);
    } catch (const std::exception&) {
      throw SchemaError(manifest.string() + ":" + std::to_string(lineno) + ": bad n_views '" + nv + "'");
    }
    if (n < 1) throw SchemaError(manifest.string() + ":" + std::to_string(lineno) + ": n_views must be >= 1");
    ds.entries_.push_back({id, fam, n, root / id});
  }
  const auto conf = root / "dataset.json";
  if (std::filesystem::exists(conf)) {
    std::ifstream cin(conf);
    std::stringstream text;
    text << cin.rdbuf();
    ds.config_ = data_config_from_json(text.str());
  }
  return ds;
}

std::vector<Entry> Dataset::split(Split s) const {
  if (s == Split::All) return entries_;
  std::vector<Entry> out;
  for (const auto& e : entries_)
    if (split_of(e.id) == s) out.push_back(e);
  return out;
}

Index Dataset::image_view(Index v, Index n_views) { return (v + n_views / 4) % n_views; }

ViewSample Dataset::load_view(const Entry& e, Index v, Purpose purpose, Index expected_points) const {
  if (v < 0 || v >= e.n_views) throw IndexError("view " + std::to_string(v) + " out of range for " + e.id);
  ViewSample s;
  s.id = e.id;
  s.view = v;
  s.image_view = image_view(v, e.n_views);
  auto read = [&](const std::string& name) {
    const auto path = e.dir / name;
    if (log_) log_->record(purpose, path, false);
    return path;
  };
  s.partial = read_pcf(read(indexed("partial", v, ".pcf")));
  if (expected_points > 0 && s.partial.rows() != expected_points) {
    throw SchemaError((e.dir / indexed("partial", v, ".pcf")).string() + ": expected " +
                      std::to_string(expected_points) + " points, found " + std::to_string(s.partial.rows()));
  }
  s.image = RgbImage::from_gray(read_pgm(read(indexed("view", s.image_view, ".pgm"))));
  s.camera = read_camera(read(indexed("cam", s.image_view, ".json")));
  if (s.camera.height != s.image.height || s.camera.width != s.image.width) {
    throw SchemaError(e.id + ": camera " + std::to_string(s.image_view) + " does not match its image size");
  }
  const auto sil = e.dir / indexed("silhouette", s.image_view, ".pgm");
  if (std::filesystem::exists(sil)) s.silhouette = read_pgm(read(sil.filename().string()));
  return s;
}

PointCloud Dataset::load_complete(const Entry& e, Purpose purpose, Index expected_points) const {
  const auto path = e.dir / "complete.pcf";
  if (log_) log_->record(purpose, path, true);
  PointCloud pc = read_pcf(path);
  if (expected_points > 0 && pc.rows() != expected_points) {
    throw SchemaError(path.string() + ": expected " + std::to_string(expected_points) + " points, found " +
                      std::to_string(pc.rows()));
  }
  return pc;
}

}  // namespace xmf
