#include "mrir/pixel_control.hpp"

#include "mrir/image.hpp"

namespace mrir::pixel {

Processor::Processor(nn::ParameterStore& store, const std::string& path, const ProcessorConfig& cfg) {
  if (cfg.channels.size() != 3) throw ConfigError("processor.channels: expected three widths");
  const int widths[5] = {3, cfg.channels[0], cfg.channels[1], cfg.channels[2], cfg.feature_channels};
  for (int i = 0; i < 4; ++i) {
    convs_[i] = nn::Conv2d::create(store, path + ".conv" + std::to_string(i), widths[i], widths[i + 1], 3, i < 3 ? 2 : 1);
  }
}

ProcessorFeatures Processor::forward(const ag::Var& lq_up) const {
  if (lq_up.value().rank() != 3 || lq_up.shape()[0] != 3) {
    throw ArgumentError("processor: expected a [3, H, W] image, got " + shape_str(lq_up.shape()));
  }
  if (lq_up.shape()[1] % 8 != 0 || lq_up.shape()[2] % 8 != 0) {
    throw ArgumentError("processor: input " + shape_str(lq_up.shape()) + " not divisible by 8");
  }
  ProcessorFeatures f;
  f.f_half = ag::silu(convs_[0](lq_up));
  f.f_quarter = ag::silu(convs_[1](f.f_half));
  f.f_eighth = ag::silu(convs_[2](f.f_quarter));
  f.F = convs_[3](f.f_eighth);
  return f;
}

RgbHeads::RgbHeads(nn::ParameterStore& store, const std::string& path, const ProcessorConfig& cfg) {
  if (cfg.channels.size() != 3) throw ConfigError("processor.channels: expected three widths");
  for (int i = 0; i < 3; ++i) heads_[i] = nn::Conv2d::create(store, path + ".head" + std::to_string(i), cfg.channels[i], 3, 1);
}

SupervisionImages RgbHeads::forward(const ProcessorFeatures& feats, const Tensor& hq) const {
  image::require_image(hq, "rgb heads");
  const auto maps = feats.scales();
  const int h = image::height(hq), w = image::width(hq);
  SupervisionImages s;
  for (int i = 0; i < 3; ++i) {
    const int f = 2 << i;
    if (maps[i].shape()[1] * f != h || maps[i].shape()[2] * f != w) {
      throw ArgumentError("rgb heads: feature map " + shape_str(maps[i].shape()) + " does not match HQ " +
                          shape_str(hq.shape()) + " at 1/" + std::to_string(f));
    }
    s.I[i] = heads_[i](maps[i]);
    s.gt[i] = image::area_resize(hq, h / f, w / f);
  }
  return s;
}

ControlBranch::ControlBranch(nn::ParameterStore& store, const std::string& path, const Config& cfg)
    : w0_(cfg.unet.widths.front()),
      feature_channels_(cfg.processor.feature_channels),
      text_conditioned_(cfg.control.text_conditioned) {
  const auto& u = cfg.unet;
  const int td = 4 * w0_;
  time_fc0_ = nn::Linear::create(store, path + ".time_mlp.fc0", w0_, td);
  time_fc1_ = nn::Linear::create(store, path + ".time_mlp.fc1", td, td);
  conv_in_ = nn::Conv2d::create(store, path + ".conv_in", feature_channels_, w0_, 3);
  int ch = w0_;
  const int n = u.scales();
  levels_.resize(n);
  for (int i = 0; i < n; ++i) {
    const std::string lp = path + ".down." + std::to_string(i);
    const int width = u.widths[i];
    for (int r = 0; r < u.res_blocks; ++r) {
      const std::string rp = std::to_string(r);
      levels_[i].res.push_back(nn::ResBlock::create(store, lp + ".res." + rp, ch, width, td, u.norm_groups));
      ch = width;
      if (text_conditioned_) {
        levels_[i].text_norm.push_back(nn::LayerNorm::create(store, lp + ".text_cross." + rp + ".norm", ch));
        levels_[i].text_attn.push_back(unet::AttentionWeights::create(store, lp + ".text_cross." + rp, ch,
                                                                      cfg.conditioning.d_txt, u.heads, false));
      }
    }
    levels_[i].proj = nn::Conv2d::create(store, path + ".proj." + std::to_string(i), ch, width, 1, 1, true);
    if (i + 1 < n) levels_[i].down = nn::Conv2d::create(store, lp + ".downsample", ch, ch, 3, 2);
  }
}

unet::PixelControlSet ControlBranch::forward(const ag::Var& F, int t, const ag::Var* text) const {
  if (F.value().rank() != 3 || F.shape()[0] != feature_channels_) {
    throw ArgumentError("control branch: expected [" + std::to_string(feature_channels_) + ", h, w] features, got " +
                        shape_str(F.shape()));
  }
  if (text_conditioned_ && !text) throw ArgumentError("control branch: text tokens required");
  const ag::Var temb = time_fc1_(ag::silu(time_fc0_(ag::constant(unet::timestep_embedding(t, w0_)))));
  const ag::Var ta = ag::silu(temb);
  unet::PixelControlSet out;
  out.conditioned_on_t = true;
  ag::Var h = conv_in_(F);
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const Level& l = levels_[i];
    if (h.shape()[1] < 1 || h.shape()[2] < 1) throw ArgumentError("control branch: map vanished at scale " + std::to_string(i + 1));
    for (std::size_t r = 0; r < l.res.size(); ++r) {
      h = l.res[r](h, ta);
      if (text_conditioned_) {
        const int hh = h.shape()[1], ww = h.shape()[2];
        ag::Var tok = ag::to_tokens(h);
        tok = ag::add(tok, unet::multihead_attention(l.text_norm[r](tok), *text, l.text_attn[r]));
        h = ag::from_tokens(tok, hh, ww);
      }
    }
    out.P.push_back(l.proj(h));
    if (l.down) {
      if (h.shape()[1] % 2 != 0 || h.shape()[2] % 2 != 0) {
        throw ArgumentError("control branch: map " + shape_str(h.shape()) + " not halvable at scale " +
                            std::to_string(i + 1));
      }
      h = (*l.down)(h);
    }
  }
  return out;
}

}  // namespace mrir::pixel
