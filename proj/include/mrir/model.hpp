#pragma once

#include <string>
#include <vector>

#include "mrir/conditioning.hpp"
#include "mrir/config.hpp"
#include "mrir/fusion_unet.hpp"
#include "mrir/nn.hpp"
#include "mrir/pixel_control.hpp"

namespace mrir {

// Which parameters an optimizer may touch. A pattern matches a parameter path when
// its dot-separated segments occur contiguously in the path ("image_cross" matches
// "unet.down.0.attn.0.image_cross.q.weight").
struct FreezePolicy {
  std::string regime;
  std::vector<std::string> trainable_patterns;  // empty with regime "full" means everything

  static FreezePolicy adapter();
  static FreezePolicy full();
  static FreezePolicy from_regime(const std::string& regime);

  bool is_trainable(const std::string& path) const;
  // Sets requires_grad on every parameter of the store.
  void apply(nn::ParameterStore& store) const;
};

// Every learned piece of the restorer over one parameter store.
class MrirModel {
 public:
  explicit MrirModel(const Config& cfg);
  MrirModel(const MrirModel&) = delete;
  MrirModel& operator=(const MrirModel&) = delete;

  const Config& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  const pixel::Processor& processor() const { return processor_; }
  const pixel::RgbHeads& rgb_heads() const { return rgb_heads_; }
  const pixel::ControlBranch& control_branch() const { return control_; }
  const conditioning::RefineLayer& refine_layer() const { return refine_; }
  const unet::UNet& unet() const { return unet_; }

  // Refined image tokens; embeddings already refined (the null one) pass through.
  ag::Var image_tokens(const conditioning::ImageEmbedding& emb) const;
  unet::CrossTokens cross_tokens(const conditioning::TextEmbedding& text,
                                 const conditioning::ImageEmbedding& image) const;
  unet::PixelControlSet controls(const pixel::ProcessorFeatures& feats, int t, const unet::CrossTokens& cond) const;

  void apply_policy(const FreezePolicy& policy) { policy.apply(store_); }

 private:
  Config cfg_;
  nn::ParameterStore store_;
  pixel::Processor processor_;
  pixel::RgbHeads rgb_heads_;
  pixel::ControlBranch control_;
  conditioning::RefineLayer refine_;
  unet::UNet unet_;
};

}  // namespace mrir
