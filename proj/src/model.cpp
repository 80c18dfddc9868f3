#include "mrir/model.hpp"

#include <algorithm>
#include <sstream>

namespace mrir {

namespace {

std::vector<std::string> split_dots(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

}  // namespace

FreezePolicy FreezePolicy::adapter() {
  return {"adapter", {"processor", "rgb_heads", "control_branch", "refine_layer", "image_cross", "pixel_attn"}};
}

FreezePolicy FreezePolicy::full() { return {"full", {}}; }

FreezePolicy FreezePolicy::from_regime(const std::string& regime) {
  if (regime == "adapter") return adapter();
  if (regime == "full") return full();
  throw ConfigError("train.regime: unknown regime '" + regime + "'");
}

bool FreezePolicy::is_trainable(const std::string& path) const {
  if (regime == "full") return true;
  const auto segs = split_dots(path);
  for (const auto& pattern : trainable_patterns) {
    const auto pat = split_dots(pattern);
    if (pat.empty() || pat.size() > segs.size()) continue;
    for (std::size_t i = 0; i + pat.size() <= segs.size(); ++i) {
      if (std::equal(pat.begin(), pat.end(), segs.begin() + static_cast<std::ptrdiff_t>(i))) return true;
    }
  }
  return false;
}

void FreezePolicy::apply(nn::ParameterStore& store) const {
  for (const auto& [path, _] : store.entries()) store.set_trainable(path, is_trainable(path));
}

MrirModel::MrirModel(const Config& cfg) : cfg_(cfg), store_(cfg.train.init_seed) {
  cfg_.validate();
  processor_ = pixel::Processor(store_, "processor", cfg_.processor);
  rgb_heads_ = pixel::RgbHeads(store_, "rgb_heads", cfg_.processor);
  control_ = pixel::ControlBranch(store_, "control_branch", cfg_);
  const auto& c = cfg_.conditioning;
  refine_ = conditioning::RefineLayer(store_, "refine_layer", c.d_img, c.refine.d_hidden, cfg_.unet.d_cross,
                                      c.refine.mode, c.refine.leaky_slope);
  unet_ = unet::UNet(store_, "unet", cfg_);
}

ag::Var MrirModel::image_tokens(const conditioning::ImageEmbedding& emb) const {
  if (emb.refined) {
    if (emb.tokens.rank() != 2 || emb.tokens.shape()[1] != cfg_.unet.d_cross) {
      throw ArgumentError("refined image tokens " + shape_str(emb.tokens.shape()) + " do not have width d_cross");
    }
    return ag::constant(emb.tokens);
  }
  return refine_.forward(ag::constant(emb.tokens));
}

unet::CrossTokens MrirModel::cross_tokens(const conditioning::TextEmbedding& text,
                                          const conditioning::ImageEmbedding& image) const {
  return {ag::constant(text.tokens), image_tokens(image)};
}

unet::PixelControlSet MrirModel::controls(const pixel::ProcessorFeatures& feats, int t,
                                          const unet::CrossTokens& cond) const {
  return control_.forward(feats.F, t, control_.text_conditioned() ? &cond.text : nullptr);
}

}  // namespace mrir
