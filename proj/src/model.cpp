#include "xmf/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"

namespace xmf {

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n_points = 512;
  c.n_decoded = 256;
  c.branches = 4;
  c.branch_points = 64;
  c.pc_dim = c.image_dim = c.fused_dim = c.decoder_dim = 64;
  c.edge_dims = {32, 64};
  c.image_size = 64;
  c.image_channels = {16, 32, 64, 64};
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "toy") return toy();
  throw ConfigError("unknown scale preset '" + name + "' (expected paper or toy)");
}

Index pooled_count(Index n, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("pool ratio must lie in (0, 1]");
  const double exact = ratio * static_cast<double>(n);
  const Index c = static_cast<Index>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  if (c < 1) throw SizeError("pooling would keep no nodes");
  return c;
}

Index ModelConfig::encoded_points() const {
  Index n = n_points;
  for (double r : pool_ratios) n = pooled_count(n, r);
  return n;
}

Index ModelConfig::image_grid() const {
  return image_size >> static_cast<int>(image_channels.size());
}

void ModelConfig::validate() const {
  if (n_points < 1 || n_decoded < 1) throw ConfigError("n_points and n_decoded must be positive");
  if (n_decoded > n_points) throw ConfigError("n_decoded must not exceed n_points");
  if (branches < 1 || branch_points < 1) throw ConfigError("branches and branch_points must be positive");
  if (branches * branch_points != n_decoded) {
    throw ConfigError("branches * branch_points must equal n_decoded (" + std::to_string(branches) +
                      " * " + std::to_string(branch_points) + " != " + std::to_string(n_decoded) + ")");
  }
  if (heads < 1 || fused_dim % heads != 0) throw ConfigError("fused_dim must be divisible by heads");
  if (pc_dim < 1 || image_dim < 1 || fused_dim < 1 || decoder_dim < 1) {
    throw ConfigError("feature dimensions must be positive");
  }
  if (pool_ratios.size() != pool_knn_ks.size()) {
    throw ConfigError("pool_ratios and pool_knn_ks must have the same length");
  }
  if (edge_dims.size() != pool_ratios.size() || edge_dims.empty()) {
    throw ConfigError("edge_dims needs one width per pooling stage");
  }
  if (edge_dims.back() != pc_dim) throw ConfigError("last edge_dims entry must equal pc_dim");
  for (Index d : edge_dims)
    if (d < 1) throw ConfigError("edge_dims entries must be positive");
  if (leaky_slope < 0.0) throw ConfigError("leaky_slope must be non-negative");
  Index n = n_points;
  for (std::size_t s = 0; s < pool_ratios.size(); ++s) {
    if (edgeconv_k < 1 || n <= edgeconv_k) {
      throw ConfigError("edgeconv_k=" + std::to_string(edgeconv_k) + " needs more than that many sites (stage has " +
                        std::to_string(n) + ")");
    }
    if (pool_knn_ks[s] < 1 || n <= pool_knn_ks[s]) {
      throw ConfigError("pool_knn_k=" + std::to_string(pool_knn_ks[s]) + " needs more sites than " +
                        std::to_string(n));
    }
    n = pooled_count(n, pool_ratios[s]);
  }
  if (!unimodal) {
    if (image_channels.empty()) throw ConfigError("image_channels must not be empty");
    if (image_channels.back() != image_dim) throw ConfigError("last image_channels entry must equal image_dim");
    const Index div = Index{1} << image_channels.size();
    if (image_size < div || image_size % div != 0) {
      throw ConfigError("image_size must be a positive multiple of 2^len(image_channels)");
    }
  }
}

namespace {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config key '") + key + "': " + e.what());
  }
}

const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys{
      "n_points", "n_decoded",   "branches",    "branch_points", "pc_dim",       "image_dim",
      "fused_dim", "decoder_dim", "heads",      "edgeconv_k",    "edge_dims",    "pool_ratios",
      "pool_knn_ks", "image_size", "image_channels", "unimodal",  "leaky_slope",  "init_seed"};
  return keys;
}

}  // namespace

ModelConfig model_config_from_json(const std::string& json, ModelConfig base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& keys = model_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  read_key(j, "n_points", base.n_points);
  read_key(j, "n_decoded", base.n_decoded);
  read_key(j, "branches", base.branches);
  read_key(j, "branch_points", base.branch_points);
  read_key(j, "pc_dim", base.pc_dim);
  read_key(j, "image_dim", base.image_dim);
  read_key(j, "fused_dim", base.fused_dim);
  read_key(j, "decoder_dim", base.decoder_dim);
  read_key(j, "heads", base.heads);
  read_key(j, "edgeconv_k", base.edgeconv_k);
  read_key(j, "edge_dims", base.edge_dims);
  read_key(j, "pool_ratios", base.pool_ratios);
  read_key(j, "pool_knn_ks", base.pool_knn_ks);
  read_key(j, "image_size", base.image_size);
  read_key(j, "image_channels", base.image_channels);
  read_key(j, "unimodal", base.unimodal);
  read_key(j, "leaky_slope", base.leaky_slope);
  read_key(j, "init_seed", base.init_seed);
  return base;
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["n_points"] = c.n_points;
  j["n_decoded"] = c.n_decoded;
  j["branches"] = c.branches;
  j["branch_points"] = c.branch_points;
  j["pc_dim"] = c.pc_dim;
  j["image_dim"] = c.image_dim;
  j["fused_dim"] = c.fused_dim;
  j["decoder_dim"] = c.decoder_dim;
  j["heads"] = c.heads;
  j["edgeconv_k"] = c.edgeconv_k;
  j["edge_dims"] = c.edge_dims;
  j["pool_ratios"] = c.pool_ratios;
  j["pool_knn_ks"] = c.pool_knn_ks;
  j["image_size"] = c.image_size;
  j["image_channels"] = c.image_channels;
  j["unimodal"] = c.unimodal;
  j["leaky_slope"] = c.leaky_slope;
  j["init_seed"] = c.init_seed;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Layers

Tensor apply(const Linear& layer, const Tensor& x) {
  return ad::add_bias(ad::matmul(x, layer.weight), layer.bias);
}

Tensor edgeconv(const Tensor& feat, const KnnGraph& graph, const Linear& layer, double slope) {
  const Index n = feat.rows(), f = feat.cols();
  if (graph.size() != n) {
    throw DimensionError("edgeconv: graph has " + std::to_string(graph.size()) + " sites, features have " +
                         std::to_string(n) + " rows");
  }
  if (layer.weight.rows() != 2 * f) throw DimensionError("edgeconv: weight must have 2f rows");
  // [h_i, h_j - h_i] W = h_i (W_top - W_bot) + h_j W_bot; the h_i term is
  // constant over the neighbourhood, so the max only sees h_j W_bot.
  Tensor top = ad::slice_rows(layer.weight, 0, f);
  Tensor bot = ad::slice_rows(layer.weight, f, f);
  Tensor self_term = ad::add_bias(ad::matmul(feat, ad::sub(top, bot)), layer.bias);
  Tensor nb_term = ad::matmul(feat, bot);
  const auto& nb = graph.neighbors;
  IndexList flat(nb.data(), nb.data() + nb.size());
  Tensor out = ad::add(self_term, ad::group_max(ad::gather_rows(nb_term, flat), graph.k));
  return slope >= 0.0 ? ad::leaky_relu(out, slope) : out;
}

Pooled sag_pool(const Tensor& feat, const PointCloud& coords, double ratio, Index knn_k,
                const Linear& score_layer) {
  const Index n = feat.rows();
  if (coords.rows() != n) throw DimensionError("sag_pool: coords and features disagree on site count");
  const Index keep = pooled_count(n, ratio);
  Tensor scores = edgeconv(feat, knn(coords, knn_k), score_layer, -1.0);
  if (scores.cols() != 1) throw DimensionError("sag_pool: score layer must project to one channel");

  Pooled out;
  out.scores = scores.value();
  IndexList order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return out.scores(a, 0) > out.scores(b, 0); });
  out.kept.assign(order.begin(), order.begin() + keep);
  out.coords = take_rows(coords, out.kept);
  Tensor gate = ad::tanh(ad::gather_rows(scores, out.kept));
  out.features = ad::scale_rows(ad::gather_rows(feat, out.kept), gate);
  return out;
}

Tensor multihead_attention(const Tensor& query, const Tensor& context, const AttentionWeights& w,
                           Index heads) {
  Tensor q = apply(w.q, query);
  Tensor k = apply(w.k, context);
  Tensor v = apply(w.v, context);
  const Index F = q.cols();
  if (heads < 1 || F % heads != 0) throw ConfigError("attention: width not divisible by heads");
  const Index d = F / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    Tensor qh = ad::slice_cols(q, h * d, d);
    Tensor kh = ad::slice_cols(k, h * d, d);
    Tensor vh = ad::slice_cols(v, h * d, d);
    Tensor att = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), scale), 1);
    parts.push_back(ad::matmul(att, vh));
  }
  Tensor merged = heads == 1 ? parts[0] : ad::concat_cols(parts);
  return apply(w.out, merged);
}

Tensor attention_block(const Tensor& query, const Tensor& context, const AttentionBlock& b, Index heads,
                       double slope) {
  Tensor qn = ad::layer_norm(query, b.norm_q_gain, b.norm_q_offset);
  Tensor cn = b.self ? qn : ad::layer_norm(context, b.norm_kv_gain, b.norm_kv_offset);
  Tensor a = multihead_attention(qn, cn, b.attn, heads);
  Tensor x = b.residual ? ad::add(query, a) : a;
  Tensor hidden = ad::leaky_relu(apply(b.ffn1, ad::layer_norm(x, b.norm_ffn_gain, b.norm_ffn_offset)), slope);
  return ad::add(x, apply(b.ffn2, hidden));
}

// ---------------------------------------------------------------------------
// Network

namespace {

// Sharper initial site attention so the decoded points start spread out.
constexpr double kLogitGain = 10.0;

class Initializer {
 public:
  Initializer(ParameterSet& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  Tensor uniform(const std::string& name, Index rows, Index cols, Index fan_in, double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng_);
    return params_.add(name, std::move(m));
  }

  Tensor constant(const std::string& name, Index rows, Index cols, double value) {
    return params_.add(name, Matrix::Constant(rows, cols, value));
  }

  Linear linear(const std::string& name, Index in, Index out) {
    Linear l;
    l.weight = uniform(name + ".weight", in, out, in);
    l.bias = uniform(name + ".bias", 1, out, in);
    return l;
  }

  AttentionBlock block(const std::string& name, Index q_dim, Index kv_dim, Index width, bool self) {
    AttentionBlock b;
    b.self = self;
    b.residual = q_dim == width;
    b.norm_q_gain = constant(name + ".norm_q.gain", 1, q_dim, 1.0);
    b.norm_q_offset = constant(name + ".norm_q.offset", 1, q_dim, 0.0);
    if (!self) {
      b.norm_kv_gain = constant(name + ".norm_kv.gain", 1, kv_dim, 1.0);
      b.norm_kv_offset = constant(name + ".norm_kv.offset", 1, kv_dim, 0.0);
    }
    const Index ctx = self ? q_dim : kv_dim;
    b.attn.q = linear(name + ".attn.q", q_dim, width);
    b.attn.k = linear(name + ".attn.k", ctx, width);
    b.attn.v = linear(name + ".attn.v", ctx, width);
    b.attn.out = linear(name + ".attn.out", width, width);
    b.norm_ffn_gain = constant(name + ".norm_ffn.gain", 1, width, 1.0);
    b.norm_ffn_offset = constant(name + ".norm_ffn.offset", 1, width, 0.0);
    b.ffn1 = linear(name + ".ffn1", width, 2 * width);
    b.ffn2 = linear(name + ".ffn2", 2 * width, width);
    return b;
  }

 private:
  ParameterSet& params_;
  std::mt19937_64 rng_;
};

}  // namespace

XmfNet::XmfNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(params_, cfg_.init_seed);
  const Index F = cfg_.fused_dim;

  Index in = 3;
  for (std::size_t s = 0; s < cfg_.edge_dims.size(); ++s) {
    const std::string stage = "encoder." + std::to_string(s);
    edge_layers_.push_back(init.linear(stage + ".edgeconv", 2 * in, cfg_.edge_dims[s]));
    pool_layers_.push_back(init.linear(stage + ".pool_score", 2 * cfg_.edge_dims[s], 1));
    in = cfg_.edge_dims[s];
  }
  encoder_gain_ = init.constant("encoder.norm.gain", 1, in, 1.0);
  encoder_offset_ = init.constant("encoder.norm.offset", 1, in, 0.0);

  if (!cfg_.unimodal) {
    Index ch = 3;
    for (std::size_t l = 0; l < cfg_.image_channels.size(); ++l) {
      conv_layers_.push_back(init.linear("image.conv" + std::to_string(l), 9 * ch, cfg_.image_channels[l]));
      ch = cfg_.image_channels[l];
    }
    const Index grid = cfg_.image_grid();
    image_pos_ = init.uniform("image.pos", grid * grid, cfg_.image_dim, cfg_.image_dim);
  }

  // cross(H_X <- H_I), self, cross(. <- H_I), self, then end attends beginning.
  const bool uni = cfg_.unimodal;
  blocks_.push_back(init.block("fusion.0", cfg_.pc_dim, cfg_.image_dim, F, uni));
  blocks_.push_back(init.block("fusion.1", F, F, F, true));
  blocks_.push_back(init.block("fusion.2", F, cfg_.image_dim, F, uni));
  blocks_.push_back(init.block("fusion.3", F, F, F, true));
  blocks_.push_back(init.block("fusion.4", F, F, F, false));
  final_gain_ = init.constant("fusion.norm.gain", 1, F, 1.0);
  final_offset_ = init.constant("fusion.norm.offset", 1, F, 0.0);

  const Index Fp = cfg_.decoder_dim;
  for (Index k = 0; k < cfg_.branches; ++k) {
    const std::string name = "decoder." + std::to_string(k);
    Branch b;
    b.proj1 = init.linear(name + ".proj1", F, Fp);
    b.proj2 = init.linear(name + ".proj2", Fp, Fp);
    b.dec1 = init.linear(name + ".dec1", Fp, Fp);
    b.dec2.weight = init.uniform(name + ".dec2.weight", Fp, cfg_.branch_points, Fp, kLogitGain);
    b.dec2.bias = init.uniform(name + ".dec2.bias", 1, cfg_.branch_points, Fp);
    b.out = init.uniform(name + ".out", Fp, 3, Fp);
    branches_.push_back(std::move(b));
  }
}

XmfNet::Encoded XmfNet::encode_pointcloud(const PointCloud& partial) const {
  if (partial.rows() != cfg_.n_points) {
    throw SizeError("encode_pointcloud: expected " + std::to_string(cfg_.n_points) + " points, got " +
                    std::to_string(partial.rows()));
  }
  Encoded e{Tensor(Matrix(partial)), partial};
  for (std::size_t s = 0; s < edge_layers_.size(); ++s) {
    Tensor h = edgeconv(e.features, knn(e.coords, cfg_.edgeconv_k), edge_layers_[s], cfg_.leaky_slope);
    Pooled p = sag_pool(h, e.coords, cfg_.pool_ratios[s], cfg_.pool_knn_ks[s], pool_layers_[s]);
    e.features = p.features;
    e.coords = std::move(p.coords);
  }
  e.features = ad::layer_norm(e.features, encoder_gain_, encoder_offset_);
  return e;
}

Tensor XmfNet::encode_image(const RgbImage& image) const {
  if (cfg_.unimodal) throw ContractError("encode_image: unimodal model has no image encoder");
  if (image.height != cfg_.image_size || image.width != cfg_.image_size ||
      image.pixels.rows() != image.height * image.width || image.pixels.cols() != 3) {
    throw DimensionError("encode_image: expected a " + std::to_string(cfg_.image_size) + "x" +
                         std::to_string(cfg_.image_size) + " RGB image, got " + std::to_string(image.height) +
                         "x" + std::to_string(image.width));
  }
  Tensor x(image.pixels);
  Index side = cfg_.image_size;
  for (const auto& conv : conv_layers_) {
    x = ad::leaky_relu(apply(conv, ad::im2col(x, side, side, 3, 2, 1)), cfg_.leaky_slope);
    side /= 2;
  }
  return ad::add(x, image_pos_);
}

Tensor XmfNet::fuse(const Tensor& hx, const Tensor& hi) const {
  const Index h = cfg_.heads;
  const double s = cfg_.leaky_slope;
  Tensor first = attention_block(hx, hi, blocks_[0], h, s);
  Tensor x = attention_block(first, first, blocks_[1], h, s);
  x = attention_block(x, hi, blocks_[2], h, s);
  x = attention_block(x, x, blocks_[3], h, s);
  x = attention_block(x, first, blocks_[4], h, s);
  return ad::layer_norm(x, final_gain_, final_offset_);
}

Tensor XmfNet::decode(const Tensor& fused) const {
  const double s = cfg_.leaky_slope;
  std::vector<Tensor> parts;
  parts.reserve(branches_.size());
  for (const auto& b : branches_) {
    Tensor z = apply(b.proj2, ad::leaky_relu(apply(b.proj1, fused), s));
    Tensor logits = apply(b.dec2, ad::leaky_relu(apply(b.dec1, z), s));
    Tensor att = ad::softmax(logits, 0);  // over the N_X sites
    parts.push_back(ad::matmul(ad::matmul(ad::transpose(att), z), b.out));
  }
  return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
}

Tensor XmfNet::predict_missing(const PointCloud& partial, const RgbImage& image) const {
  Encoded e = encode_pointcloud(partial);
  Tensor hi = cfg_.unimodal ? Tensor() : encode_image(image);
  return decode(fuse(e.features, hi));
}

Tensor XmfNet::complete(const PointCloud& partial, const RgbImage& image, Index seed_index) const {
  Tensor pred = predict_missing(partial, image);
  const Index copy = cfg_.n_points - cfg_.n_decoded;
  if (copy == 0) return pred;
  Tensor kept(Matrix(take_rows(partial, fps(partial, copy, seed_index))));
  return ad::concat_rows({pred, kept});
}

}  // namespace xmf
