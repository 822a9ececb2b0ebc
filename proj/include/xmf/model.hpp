#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmf/autodiff.hpp"
#include "xmf/geometry.hpp"
#include "xmf/optim.hpp"
#include "xmf/render.hpp"

namespace xmf {

struct ModelConfig {
  Index n_points = 2048;       // N
  Index n_decoded = 1024;      // N'
  Index branches = 8;          // K
  Index branch_points = 128;   // M
  Index pc_dim = 256;          // F_X
  Index image_dim = 256;       // F_I
  Index fused_dim = 256;       // F
  Index decoder_dim = 256;     // F'
  Index heads = 4;
  Index edgeconv_k = 20;
  std::vector<Index> edge_dims{128, 256};  // EdgeConv widths, one per pooling stage
  std::vector<double> pool_ratios{0.25, 0.25};
  std::vector<Index> pool_knn_ks{16, 6};
  Index image_size = 224;
  std::vector<Index> image_channels{32, 64, 128, 256};  // stride-2 3x3 convs
  bool unimodal = false;
  double leaky_slope = 0.2;
  std::uint64_t init_seed = 0;

  static ModelConfig paper();
  static ModelConfig toy();
  /// "paper" or "toy"; ConfigError otherwise.
  static ModelConfig preset(const std::string& name);

  /// Rows left after the pooling stages.
  Index encoded_points() const;
  /// Side of the image feature grid.
  Index image_grid() const;

  void validate() const;
};

/// Overlays the keys present in `json` onto `base`. Unknown keys and type
/// mismatches throw ConfigError.
ModelConfig model_config_from_json(const std::string& json, ModelConfig base = ModelConfig::paper());
std::string model_config_to_json(const ModelConfig& cfg);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

Tensor apply(const Linear& layer, const Tensor& x);

/// h'_i = max_{j in N(i)} act([h_i, h_j - h_i] W + b), W is 2f x f'. With
/// slope < 0 no activation is applied.
Tensor edgeconv(const Tensor& feat, const KnnGraph& graph, const Linear& layer, double slope);

struct Pooled {
  Tensor features;  // kept x f, gated by tanh(score)
  IndexList kept;   // source rows, in descending score order
  PointCloud coords;
  Matrix scores;    // n x 1, all nodes
};

/// Self-attention graph pooling. Scores come from an EdgeConv-style layer
/// (to 1 channel, no activation) over a k-NN graph of `coords`.
Pooled sag_pool(const Tensor& feat, const PointCloud& coords, double ratio, Index knn_k,
                const Linear& score_layer);

/// ceil(ratio * n), robust to rounding in the product.
Index pooled_count(Index n, double ratio);

struct AttentionWeights {
  Linear q, k, v, out;
};

/// Multi-head attention without residual or normalization:
/// concat_h softmax(Q_h K_h^T / sqrt(F/h)) V_h, then the output projection.
Tensor multihead_attention(const Tensor& query, const Tensor& context, const AttentionWeights& w,
                           Index heads);

struct AttentionBlock {
  AttentionWeights attn;
  Tensor norm_q_gain, norm_q_offset;
  Tensor norm_kv_gain, norm_kv_offset;
  Linear ffn1, ffn2;
  Tensor norm_ffn_gain, norm_ffn_offset;
  bool self = false;
  bool residual = true;  // off when the query width differs from F
};

/// Pre-norm transformer block: x + MHA(LN(x), LN(ctx)), then x + FFN(LN(x)).
/// For self blocks `context` is ignored.
Tensor attention_block(const Tensor& query, const Tensor& context, const AttentionBlock& block,
                       Index heads, double slope);

struct Branch {
  Linear proj1, proj2;  // F -> F' -> F'
  Linear dec1, dec2;    // F' -> F' -> M
  Tensor out;           // F' x 3
};

class XmfNet {
 public:
  explicit XmfNet(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  struct Encoded {
    Tensor features;  // N_X x F_X, layer-normalized
    PointCloud coords;
  };
  Encoded encode_pointcloud(const PointCloud& partial) const;
  /// N_I x F_I. Throws DimensionError on a wrong image size, ContractError in
  /// unimodal mode (no image encoder).
  Tensor encode_image(const RgbImage& image) const;
  /// N_X x F. `image_features` is ignored in unimodal mode.
  Tensor fuse(const Tensor& pc_features, const Tensor& image_features) const;
  /// N' x 3.
  Tensor decode(const Tensor& fused) const;

  /// Decoder output only (N' x 3).
  Tensor predict_missing(const PointCloud& partial, const RgbImage& image) const;
  /// Decoder output followed by fps(partial, N - N', seed_index): N x 3.
  Tensor complete(const PointCloud& partial, const RgbImage& image, Index seed_index = 0) const;

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<Linear> edge_layers_;
  std::vector<Linear> pool_layers_;
  Tensor encoder_gain_, encoder_offset_;
  std::vector<Linear> conv_layers_;
  Tensor image_pos_;
  std::vector<AttentionBlock> blocks_;
  Tensor final_gain_, final_offset_;
  std::vector<Branch> branches_;
};

}  // namespace xmf
