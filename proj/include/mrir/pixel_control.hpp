#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mrir/fusion_unet.hpp"
#include "mrir/nn.hpp"

namespace mrir::pixel {

struct ProcessorFeatures {
  ag::Var f_half;     // [c1, H/2, W/2]
  ag::Var f_quarter;  // [c2, H/4, W/4]
  ag::Var f_eighth;   // [c3, H/8, W/8]
  ag::Var F;          // [c_F, H/8, W/8]

  std::array<ag::Var, 3> scales() const { return {f_half, f_quarter, f_eighth}; }
};

// Four 3x3 convolutions with strides 2, 2, 2, 1; SiLU after the first three.
class Processor {
 public:
  Processor() = default;
  Processor(nn::ParameterStore& store, const std::string& path, const ProcessorConfig& cfg);

  // `lq_up` is the LQ image resized to the HQ size; both dims divisible by 8.
  ProcessorFeatures forward(const ag::Var& lq_up) const;
  const nn::Conv2d& conv(int i) const { return convs_[i]; }

 private:
  std::array<nn::Conv2d, 4> convs_;
};

// Predicted RGB images and area-downsampled targets at 1/2, 1/4 and 1/8.
struct SupervisionImages {
  std::array<ag::Var, 3> I;
  std::array<Tensor, 3> gt;
};

// One 1x1 convolution per processor scale to three channels, no activation.
class RgbHeads {
 public:
  RgbHeads() = default;
  RgbHeads(nn::ParameterStore& store, const std::string& path, const ProcessorConfig& cfg);

  SupervisionImages forward(const ProcessorFeatures& feats, const Tensor& hq) const;
  const nn::Conv2d& head(int i) const { return heads_[i]; }

 private:
  std::array<nn::Conv2d, 3> heads_;
};

// Trunk mirroring the denoiser encoder over F. Each scale ends in a zero-initialized
// 1x1 projection to the denoiser width, so every P_i starts at exactly zero.
class ControlBranch {
 public:
  ControlBranch() = default;
  ControlBranch(nn::ParameterStore& store, const std::string& path, const Config& cfg);

  // `text`, if the branch is text-conditioned, is the prompt token matrix.
  unet::PixelControlSet forward(const ag::Var& F, int t, const ag::Var* text = nullptr) const;
  const nn::Conv2d& projection(int i) const { return levels_[i].proj; }
  int scales() const { return static_cast<int>(levels_.size()); }
  bool text_conditioned() const { return text_conditioned_; }

 private:
  struct Level {
    std::vector<nn::ResBlock> res;
    std::vector<nn::LayerNorm> text_norm;
    std::vector<unet::AttentionWeights> text_attn;
    nn::Conv2d proj;
    std::optional<nn::Conv2d> down;
  };

  int w0_ = 0;
  int feature_channels_ = 0;
  bool text_conditioned_ = false;
  nn::Linear time_fc0_, time_fc1_;
  nn::Conv2d conv_in_;
  std::vector<Level> levels_;
};

}  // namespace mrir::pixel
