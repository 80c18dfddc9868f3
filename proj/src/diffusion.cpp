#include "mrir/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "mrir/image.hpp"

namespace mrir::diffusion {

NoiseSchedule make_schedule(int T, double beta_min, double beta_max, int S) {
  if (T < 1) throw ArgumentError("make_schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min < 1.0 && beta_max > 0.0 && beta_max < 1.0 && beta_min <= beta_max) ||
      (T > 1 && !(beta_min < beta_max))) {
    throw ArgumentError("make_schedule: need 0 < beta_min < beta_max < 1");
  }
  if (S < 1 || S > T) throw ArgumentError("make_schedule: need 1 <= S <= T");
  NoiseSchedule s;
  s.T = T;
  double abar = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * t / (T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    abar *= 1.0 - beta;
    s.alpha_bars.push_back(abar);
  }
  for (int k = S - 1; k >= 0; --k) {
    const double pos = S == 1 ? T - 1 : static_cast<double>(k) * (T - 1) / (S - 1);
    s.inference_steps.push_back(static_cast<int>(std::lround(pos)));
  }
  return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw ArgumentError("forward_diffuse: t=" + std::to_string(t) + " outside [0, T)");
  if (!z0.same_shape(eps)) {
    throw ArgumentError("forward_diffuse: eps " + shape_str(eps.shape()) + " vs z0 " + shape_str(z0.shape()));
  }
  const double a = std::sqrt(sched.alpha_bars[t]), b = std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

double loss_fft(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt)) throw ArgumentError("loss_fft: shape mismatch");
  ag::NoGradGuard guard;
  return ag::fft_l1(ag::constant(pred), ag::constant(gt)).value()[0];
}

double loss_rgb(const std::array<Tensor, 3>& I, const std::array<Tensor, 3>& gt) {
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (!I[i].same_shape(gt[i])) throw ArgumentError("loss_rgb: shape mismatch at scale " + std::to_string(i));
    double acc = 0.0;
    for (std::size_t k = 0; k < I[i].size(); ++k) acc += std::abs(I[i][k] - gt[i][k]);
    total += acc / static_cast<double>(I[i].size());
  }
  return total;
}

LossBreakdown compose_losses(double l_diff, double l_rgb, double l_fft, double lambda1, double lambda2) {
  LossBreakdown b;
  b.l_diff = l_diff;
  b.l_rgb = l_rgb;
  b.l_fft = l_fft;
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.total = l_diff + lambda1 * l_rgb + lambda2 * l_fft;
  return b;
}

void Adam::step(nn::ParameterStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [path, var] : store.entries()) {
    ag::Var p = var;
    if (!p.requires_grad() || p.grad().size() == 0) continue;
    const Tensor& g = p.grad();
    auto [it, fresh] = state_.try_emplace(path);
    if (fresh) it->second = {Tensor(g.shape()), Tensor(g.shape())};
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
  store.zero_grad();
}

Tensor upsample_lq(const Tensor& lq, int h, int w) { return image::resize(lq, h, w, ResizeMode::bilinear); }

ItemGraph item_losses(const MrirModel& model, const codec::Codec& codec, const TrainingItem& item,
                      const NoiseSchedule& sched, int t, const Tensor& eps, bool use_null) {
  const Config& cfg = model.config();
  const int h = image::height(item.hq), w = image::width(item.hq);
  const Tensor z0 = codec.encode(item.hq).z;
  const Tensor z_t = forward_diffuse(z0, t, eps, sched);
  const auto& text = use_null ? item.cond.text_null : item.cond.text;
  const auto& img = use_null ? item.cond.image_null : item.cond.image;
  const unet::CrossTokens cond = model.cross_tokens(text, img);

  const auto feats = model.processor().forward(ag::constant(upsample_lq(item.lq, h, w)));
  const auto sup = model.rgb_heads().forward(feats, item.hq);
  const auto controls = model.controls(feats, t, cond);
  const ag::Var eps_hat = model.unet().forward(ag::constant(z_t), t, cond, &controls);

  ItemGraph g;
  g.l_diff = ag::mse(eps_hat, ag::constant(eps));
  for (int i = 0; i < 3; ++i) {
    const ag::Var gt = ag::constant(sup.gt[i]);
    const ag::Var r = ag::l1_mean(sup.I[i], gt);
    const ag::Var f = ag::fft_l1(sup.I[i], gt);
    g.l_rgb = i == 0 ? r : ag::add(g.l_rgb, r);
    g.l_fft = i == 0 ? f : ag::add(g.l_fft, f);
  }
  g.total = ag::add(g.l_diff, ag::add(ag::scale(g.l_rgb, cfg.train.lambda1), ag::scale(g.l_fft, cfg.train.lambda2)));
  return g;
}

LossBreakdown train_step(MrirModel& model, const codec::Codec& codec, const std::vector<TrainingItem>& batch,
                         const NoiseSchedule& sched, Adam& opt, Rng& rng) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  const auto& tc = model.config().train;
  const double n = static_cast<double>(batch.size());
  double l_diff = 0.0, l_rgb = 0.0, l_fft = 0.0;
  for (const auto& item : batch) {
    const int t = static_cast<int>(rng.uniform_int(0, sched.T - 1));
    const int fac = codec.factor();
    const Tensor eps = rng.normal_tensor({codec.latent_channels(), image::height(item.hq) / fac, image::width(item.hq) / fac});
    const bool use_null = rng.uniform() < tc.null_prob;
    const ItemGraph g = item_losses(model, codec, item, sched, t, eps, use_null);
    const double d = g.l_diff.value()[0], r = g.l_rgb.value()[0], f = g.l_fft.value()[0];
    if (!std::isfinite(d)) throw TrainingError("l_diff", "non-finite diffusion loss");
    if (!std::isfinite(r)) throw TrainingError("l_rgb", "non-finite RGB loss");
    if (!std::isfinite(f)) throw TrainingError("l_fft", "non-finite FFT loss");
    ag::backward(ag::scale(g.total, 1.0 / n));
    l_diff += d / n;
    l_rgb += r / n;
    l_fft += f / n;
  }
  const LossBreakdown out = compose_losses(l_diff, l_rgb, l_fft, tc.lambda1, tc.lambda2);
  if (!std::isfinite(out.total)) throw TrainingError("total", "non-finite total loss");
  opt.step(model.params());
  return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
  if (!eps_uncond.same_shape(eps_cond)) throw ArgumentError("cfg_combine: shape mismatch");
  Tensor out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * eps_uncond[i] + w * eps_cond[i];
  return out;
}

Tensor lre_init(const Tensor& lq_latent, const NoiseSchedule& sched, const Tensor& eps, bool enabled) {
  if (!lq_latent.same_shape(eps)) throw ArgumentError("lre_init: shape mismatch");
  if (!enabled) return eps;
  return forward_diffuse(lq_latent, sched.inference_steps.front(), eps, sched);
}

Tensor ddpm_sample(const MrirModel& model, const codec::Codec& codec, const conditioning::ConditioningBundle& cond,
                   const Tensor& lq_up, const NoiseSchedule& sched, const SampleOptions& opts) {
  image::require_image(lq_up, "ddpm_sample");
  ag::NoGradGuard guard;
  const int out_h = image::height(lq_up), out_w = image::width(lq_up);
  const Tensor lq_latent = codec.encode(lq_up).z;
  Rng rng(opts.seed);
  Tensor z = lre_init(lq_latent, sched, rng.normal_tensor(lq_latent.shape()), opts.lre);

  const unet::CrossTokens c_tokens = model.cross_tokens(cond.text, cond.image);
  const unet::CrossTokens u_tokens = model.cross_tokens(cond.text_null, cond.image_null);
  const auto feats = model.processor().forward(ag::constant(lq_up));
  const bool skip_uncond = opts.elide_unconditional && opts.cfg_scale == 1.0;

  const auto& steps = sched.inference_steps;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const int t = steps[k];
    const double abar = sched.alpha_bars[t];
    const double abar_prev = k + 1 < steps.size() ? sched.alpha_bars[steps[k + 1]] : 1.0;
    const auto controls = model.controls(feats, t, c_tokens);
    const ag::Var zv = ag::constant(z);
    const Tensor eps_c = model.unet().forward(zv, t, c_tokens, &controls).value();
    Tensor eps;
    if (skip_uncond) {
      eps = eps_c;
    } else {
      const auto u_controls = !model.control_branch().text_conditioned() ? controls : model.controls(feats, t, u_tokens);
      const Tensor eps_u = model.unet().forward(zv, t, u_tokens, &u_controls).value();
      eps = cfg_combine(eps_u, eps_c, opts.cfg_scale);
    }

    const double alpha = abar / abar_prev;
    const double beta = 1.0 - alpha;
    const double c_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
    const double c_z = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
    const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
    const bool last = k + 1 == steps.size();
    Tensor next(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      double x0 = (z[i] - std::sqrt(1.0 - abar) * eps[i]) / std::sqrt(abar);
      if (opts.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
      next[i] = last ? x0 : c_x0 * x0 + c_z * z[i];
    }
    if (!last) {
      const Tensor noise = rng.normal_tensor(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) next[i] += sigma * noise[i];
    }
    if (!next.all_finite()) throw SamplingError(static_cast<int>(k), "non-finite latent at step " + std::to_string(k));
    z = std::move(next);
  }
  return codec.decode(codec::LatentCode{z, codec.factor(), out_h, out_w});
}

}  // namespace mrir::diffusion
