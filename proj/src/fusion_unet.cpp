#include "mrir/fusion_unet.hpp"

#include <cmath>

namespace mrir::unet {

Tensor timestep_embedding(int t, int d) {
  if (d <= 0 || d % 2 != 0) throw ArgumentError("timestep_embedding: d must be positive and even, got " + std::to_string(d));
  const int half = d / 2;
  Tensor e({1, d});
  for (int i = 0; i < half; ++i) {
    const double expo = half > 1 ? static_cast<double>(i) / (half - 1) : 0.0;
    const double freq = std::pow(10000.0, -expo);
    e[i] = std::cos(t * freq);
    e[half + i] = std::sin(t * freq);
  }
  return e;
}

AttentionWeights AttentionWeights::create(nn::ParameterStore& store, const std::string& path, int d_model, int d_kv,
                                          int heads, bool zero_out) {
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError(path + ": " + std::to_string(heads) + " heads do not divide d_model " + std::to_string(d_model));
  }
  AttentionWeights w;
  w.q = nn::Linear::create(store, path + ".q", d_model, d_model);
  w.k = nn::Linear::create(store, path + ".k", d_kv, d_model, false);
  w.v = nn::Linear::create(store, path + ".v", d_kv, d_model);
  w.out = nn::Linear::create(store, path + ".out", d_model, d_model, true, zero_out);
  w.heads = heads;
  return w;
}

ag::Var multihead_attention(const ag::Var& queries, const ag::Var& keys_values, const AttentionWeights& w,
                            std::vector<Tensor>* probs) {
  const int d = w.d_model();
  if (queries.value().rank() != 2 || queries.shape()[1] != d) {
    throw ArgumentError("attention: queries " + shape_str(queries.shape()) + " do not match d_model " + std::to_string(d));
  }
  if (keys_values.value().rank() != 2 || keys_values.shape()[1] != w.d_kv()) {
    throw ArgumentError("attention: keys " + shape_str(keys_values.shape()) + " do not match d_kv " +
                        std::to_string(w.d_kv()));
  }
  const ag::Var q = w.q(queries);
  const ag::Var k = w.k(keys_values);
  const ag::Var v = w.v(keys_values);
  const int dh = d / w.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (probs) probs->clear();
  std::vector<ag::Var> heads;
  heads.reserve(w.heads);
  for (int h = 0; h < w.heads; ++h) {
    const ag::Var qh = w.heads == 1 ? q : ag::slice_cols(q, h * dh, dh);
    const ag::Var kh = w.heads == 1 ? k : ag::slice_cols(k, h * dh, dh);
    const ag::Var vh = w.heads == 1 ? v : ag::slice_cols(v, h * dh, dh);
    const ag::Var a = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), scale));
    if (probs) probs->push_back(a.value());
    heads.push_back(ag::matmul(a, vh));
  }
  return w.out(w.heads == 1 ? heads.front() : ag::concat_cols(heads));
}

FusionBlock::FusionBlock(nn::ParameterStore& store, const std::string& path, const AttentionBlockConfig& cfg)
    : cfg_(cfg) {
  for (const auto& name : cfg.order) {
    Sublayer s;
    s.name = name;
    std::string sub;
    int d_kv = cfg.d_model;
    bool zero_out = false;
    if (name == "self") {
      sub = "self_attn";
    } else if (name == "image") {
      sub = "image_cross";
      d_kv = cfg.d_cross;
      zero_out = true;
    } else if (name == "text") {
      sub = "text_cross";
      d_kv = cfg.d_text;
    } else if (name == "pixel") {
      if (cfg.kind != BlockKind::up) continue;
      sub = "pixel_attn";
      zero_out = true;
    } else {
      throw ConfigError("unet.sublayer_order: unknown sub-layer '" + name + "'");
    }
    s.norm = nn::LayerNorm::create(store, path + "." + sub + ".norm", cfg.d_model);
    s.attn = AttentionWeights::create(store, path + "." + sub, cfg.d_model, d_kv, cfg.n_heads, zero_out);
    sublayers_.push_back(std::move(s));
  }
}

const AttentionWeights& FusionBlock::sublayer(const std::string& name) const {
  for (const auto& s : sublayers_) {
    if (s.name == name) return s.attn;
  }
  throw ArgumentError("fusion block has no '" + name + "' sub-layer");
}

ag::Var FusionBlock::forward(const ag::Var& x, const CrossTokens& cond, const ag::Var* pixel) const {
  if (cfg_.kind == BlockKind::up && !pixel) {
    throw ArgumentError("up attention block at scale " + std::to_string(cfg_.scale_index) + " needs a pixel control");
  }
  if (cfg_.kind == BlockKind::down && pixel) throw ArgumentError("down attention block given a pixel control");
  return run(x, cond, pixel, true);
}

ag::Var FusionBlock::forward_without_pixel(const ag::Var& x, const CrossTokens& cond) const {
  return run(x, cond, nullptr, false);
}

ag::Var FusionBlock::run(const ag::Var& x, const CrossTokens& cond, const ag::Var* pixel, bool use_pixel) const {
  if (x.value().rank() != 3 || x.shape()[0] != cfg_.d_model) {
    throw ArgumentError("attention block at scale " + std::to_string(cfg_.scale_index) + ": input " +
                        shape_str(x.shape()) + " does not have " + std::to_string(cfg_.d_model) + " channels");
  }
  const int h = x.shape()[1], w = x.shape()[2];
  ag::Var tokens = ag::to_tokens(x);
  ag::Var pixel_tokens;
  if (use_pixel && pixel) {
    if (pixel->shape() != x.shape()) {
      throw ArgumentError("pixel control at scale " + std::to_string(cfg_.scale_index) + " has shape " +
                          shape_str(pixel->shape()) + ", decoder features " + shape_str(x.shape()));
    }
    pixel_tokens = ag::to_tokens(*pixel);
  }
  for (const auto& s : sublayers_) {
    ag::Var kv;
    if (s.name == "self") {
      kv = s.norm(tokens);
    } else if (s.name == "image") {
      if (!cfg_.image_attention) continue;
      kv = cond.image;
    } else if (s.name == "text") {
      kv = cond.text;
    } else {
      if (!use_pixel || !cfg_.pixel_attention) continue;
      kv = pixel_tokens;
    }
    const ag::Var normed = s.name == "self" ? kv : s.norm(tokens);
    tokens = ag::add(tokens, multihead_attention(normed, kv, s.attn));
  }
  return ag::from_tokens(tokens, h, w);
}

UNet::UNet(nn::ParameterStore& store, const std::string& path, const Config& cfg)
    : widths_(cfg.unet.widths), latent_channels_(cfg.latent_channels()), additive_skips_(cfg.control.additive_skips) {
  const auto& u = cfg.unet;
  const int w0 = widths_.front();
  const int td = time_dim();
  const int n = scales();
  time_fc0_ = nn::Linear::create(store, path + ".time_mlp.fc0", w0, td);
  time_fc1_ = nn::Linear::create(store, path + ".time_mlp.fc1", td, td);
  conv_in_ = nn::Conv2d::create(store, path + ".conv_in", latent_channels_, w0, 3);

  auto block_cfg = [&](int width, BlockKind kind, int scale) {
    AttentionBlockConfig b;
    b.d_model = width;
    b.n_heads = u.heads;
    b.d_cross = u.d_cross;
    b.d_text = cfg.conditioning.d_txt;
    b.kind = kind;
    b.scale_index = scale + 1;
    b.order = u.sublayer_order;
    b.image_attention = u.image_attention;
    b.pixel_attention = u.pixel_attention;
    return b;
  };

  int ch = w0;
  std::vector<int> skip_channels;
  down_.resize(n);
  for (int i = 0; i < n; ++i) {
    const std::string lp = path + ".down." + std::to_string(i);
    for (int r = 0; r < u.res_blocks; ++r) {
      const std::string rp = std::to_string(r);
      down_[i].res.push_back(nn::ResBlock::create(store, lp + ".res." + rp, ch, widths_[i], td, u.norm_groups));
      ch = widths_[i];
      down_[i].attn.emplace_back(store, lp + ".attn." + rp, block_cfg(ch, BlockKind::down, i));
      skip_channels.push_back(ch);
    }
    if (i + 1 < n) down_[i].resample = nn::Conv2d::create(store, lp + ".downsample", ch, ch, 3, 2);
  }

  mid_res0_ = nn::ResBlock::create(store, path + ".mid.res.0", ch, ch, td, u.norm_groups);
  mid_attn_ = FusionBlock(store, path + ".mid.attn", block_cfg(ch, BlockKind::down, n - 1));
  mid_res1_ = nn::ResBlock::create(store, path + ".mid.res.1", ch, ch, td, u.norm_groups);

  up_.resize(n);
  for (int i = n - 1; i >= 0; --i) {
    const std::string lp = path + ".up." + std::to_string(i);
    for (int r = 0; r < u.res_blocks; ++r) {
      const std::string rp = std::to_string(r);
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      up_[i].res.push_back(nn::ResBlock::create(store, lp + ".res." + rp, ch + skip, widths_[i], td, u.norm_groups));
      ch = widths_[i];
      up_[i].attn.emplace_back(store, lp + ".attn." + rp, block_cfg(ch, BlockKind::up, i));
    }
    if (i > 0) up_[i].resample = nn::Conv2d::create(store, lp + ".upsample", ch, ch, 3);
  }

  out_norm_ = nn::GroupNorm::create(store, path + ".out_norm", ch, u.norm_groups);
  conv_out_ = nn::Conv2d::create(store, path + ".conv_out", ch, latent_channels_, 3);

  for (const auto& l : down_) all_blocks_.insert(all_blocks_.end(), l.attn.begin(), l.attn.end());
  all_blocks_.push_back(mid_attn_);
  for (int i = n - 1; i >= 0; --i) all_blocks_.insert(all_blocks_.end(), up_[i].attn.begin(), up_[i].attn.end());
}

std::vector<Shape> UNet::decoder_shapes(int h0, int w0) const {
  std::vector<Shape> shapes;
  int h = h0, w = w0;
  for (int i = 0; i < scales(); ++i) {
    if (h < 1 || w < 1) throw ArgumentError("latent " + std::to_string(h0) + "x" + std::to_string(w0) +
                                            " too small for scale " + std::to_string(i + 1));
    shapes.push_back({widths_[i], h, w});
    if (i + 1 < scales()) {
      if (h % 2 != 0 || w % 2 != 0) {
        throw ArgumentError("latent " + std::to_string(h0) + "x" + std::to_string(w0) + " not halvable at scale " +
                            std::to_string(i + 1));
      }
      h /= 2;
      w /= 2;
    }
  }
  return shapes;
}

ag::Var UNet::forward(const ag::Var& z_t, int t, const CrossTokens& cond, const PixelControlSet* controls,
                      const ForwardOptions& opts) const {
  if (z_t.value().rank() != 3 || z_t.shape()[0] != latent_channels_) {
    throw ArgumentError("denoiser: latent " + shape_str(z_t.shape()) + " does not have " +
                        std::to_string(latent_channels_) + " channels");
  }
  const auto shapes = decoder_shapes(z_t.shape()[1], z_t.shape()[2]);
  const int n = scales();
  if (controls && static_cast<int>(controls->P.size()) != n) {
    throw ArgumentError("denoiser: " + std::to_string(controls->P.size()) + " pixel controls for " + std::to_string(n) +
                        " scales");
  }
  if (controls) {
    for (int i = 0; i < n; ++i) {
      if (controls->P[i].shape() != shapes[i]) {
        throw ArgumentError("denoiser: pixel control at scale " + std::to_string(i + 1) + " has shape " +
                            shape_str(controls->P[i].shape()) + ", expected " + shape_str(shapes[i]));
      }
    }
  }

  const ag::Var temb = time_fc1_(ag::silu(time_fc0_(ag::constant(timestep_embedding(t, widths_.front())))));
  const ag::Var ta = ag::silu(temb);

  auto attend = [&](const FusionBlock& block, const ag::Var& h, int scale) {
    if (opts.skip_attention) return h;
    if (block.config().kind == BlockKind::down) return block.forward(h, cond, nullptr);
    if (!controls) return block.forward_without_pixel(h, cond);
    return block.forward(h, cond, &controls->P[scale]);
  };

  ag::Var h = conv_in_(z_t);
  std::vector<ag::Var> skips;
  for (int i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < down_[i].res.size(); ++r) {
      h = down_[i].res[r](h, ta);
      h = attend(down_[i].attn[r], h, i);
      skips.push_back(h);
    }
    if (down_[i].resample) h = (*down_[i].resample)(h);
  }
  h = mid_res0_(h, ta);
  h = attend(mid_attn_, h, n - 1);
  h = mid_res1_(h, ta);
  for (int i = n - 1; i >= 0; --i) {
    for (std::size_t r = 0; r < up_[i].res.size(); ++r) {
      h = up_[i].res[r](ag::concat_channels(h, skips.back()), ta);
      skips.pop_back();
      if (additive_skips_ && controls) h = ag::add(h, controls->P[i]);
      h = attend(up_[i].attn[r], h, i);
    }
    if (up_[i].resample) h = (*up_[i].resample)(ag::upsample_nearest2(h));
  }
  return conv_out_(ag::silu(out_norm_(h)));
}

}  // namespace mrir::unet
