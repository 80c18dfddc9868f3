#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mrir/config.hpp"
#include "mrir/nn.hpp"

namespace mrir::unet {

// Sinusoidal features of timestep t, [1, d]: cos(t f_i) for i < d/2 then sin(t f_i),
// with f_i spaced geometrically from 1 down to 1/10000.
Tensor timestep_embedding(int t, int d);

// Projections of one attention sub-layer. K has no bias.
struct AttentionWeights {
  nn::Linear q, k, v, out;
  int heads = 1;

  static AttentionWeights create(nn::ParameterStore& store, const std::string& path, int d_model, int d_kv, int heads,
                                 bool zero_out);
  int d_model() const { return q.out_features(); }
  int d_kv() const { return k.in_features(); }
};

// Scaled dot-product attention per head with scale 1/sqrt(d_head), then the output
// projection. No residual. `probs`, when given, receives the [heads][N, M] weights.
ag::Var multihead_attention(const ag::Var& queries, const ag::Var& keys_values, const AttentionWeights& w,
                            std::vector<Tensor>* probs = nullptr);

enum class BlockKind { down, up };

struct AttentionBlockConfig {
  int d_model = 0;
  int n_heads = 1;
  int d_cross = 0;  // refined image token width
  int d_text = 0;
  BlockKind kind = BlockKind::down;
  int scale_index = 1;
  std::vector<std::string> order{"self", "image", "text", "pixel"};
  bool image_attention = true;
  bool pixel_attention = true;
};

// Conditioning tokens as seen by the denoiser.
struct CrossTokens {
  ag::Var text;   // [L, d_text]
  ag::Var image;  // [M, d_cross], already refined
};

// Down blocks run self, image-cross and text-cross attention; up blocks add pixel
// attention over the control map of their scale. Every sub-layer is pre-LayerNorm
// and residual on the flattened spatial tokens.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(nn::ParameterStore& store, const std::string& path, const AttentionBlockConfig& cfg);

  // `pixel` must be given (same shape as x) iff the block is an up block.
  ag::Var forward(const ag::Var& x, const CrossTokens& cond, const ag::Var* pixel) const;
  // Up block evaluated without its pixel sub-layer (controls absent).
  ag::Var forward_without_pixel(const ag::Var& x, const CrossTokens& cond) const;

  const AttentionBlockConfig& config() const { return cfg_; }
  // `name` is an order entry: self, image, text or pixel.
  const AttentionWeights& sublayer(const std::string& name) const;

 private:
  struct Sublayer {
    std::string name;
    nn::LayerNorm norm;
    AttentionWeights attn;
  };
  ag::Var run(const ag::Var& x, const CrossTokens& cond, const ag::Var* pixel, bool use_pixel) const;

  AttentionBlockConfig cfg_;
  std::vector<Sublayer> sublayers_;
};

// Per-scale pixel controls P_i, scale 0 at latent resolution.
struct PixelControlSet {
  std::vector<ag::Var> P;
  bool conditioned_on_t = true;
};

struct ForwardOptions {
  bool skip_attention = false;  // convolutional skeleton only
};

class UNet {
 public:
  UNet() = default;
  UNet(nn::ParameterStore& store, const std::string& path, const Config& cfg);

  // eps prediction with the shape of z_t. `controls` may be null.
  ag::Var forward(const ag::Var& z_t, int t, const CrossTokens& cond, const PixelControlSet* controls,
                  const ForwardOptions& opts = {}) const;

  // [C, h, w] of the decoder features at each scale for a latent of h0 x w0.
  std::vector<Shape> decoder_shapes(int h0, int w0) const;
  int scales() const { return static_cast<int>(widths_.size()); }
  const std::vector<int>& widths() const { return widths_; }
  int time_dim() const { return 4 * widths_.front(); }

  const std::vector<FusionBlock>& attention_blocks() const { return all_blocks_; }

 private:
  struct Level {
    std::vector<nn::ResBlock> res;
    std::vector<FusionBlock> attn;
    std::optional<nn::Conv2d> resample;
  };

  std::vector<int> widths_;
  int latent_channels_ = 0;
  nn::Linear time_fc0_, time_fc1_;
  nn::Conv2d conv_in_;
  std::vector<Level> down_;
  nn::ResBlock mid_res0_, mid_res1_;
  FusionBlock mid_attn_;
  std::vector<Level> up_;  // indexed by scale
  nn::GroupNorm out_norm_;
  nn::Conv2d conv_out_;
  std::vector<FusionBlock> all_blocks_;
  bool additive_skips_ = false;
};

}  // namespace mrir::unet
