#pragma once

#include <map>
#include <string>
#include <vector>

#include "mrir/codec.hpp"
#include "mrir/conditioning.hpp"
#include "mrir/model.hpp"

namespace mrir::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<int> inference_steps;  // strictly decreasing
};

// Linear betas; inference_steps = round(linspace(0, T - 1, S)) in descending order.
NoiseSchedule make_schedule(int T, double beta_min, double beta_max, int S);

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Mean over channels and bins of |Re| + |Im| of DFT2(pred) - DFT2(gt).
double loss_fft(const Tensor& pred, const Tensor& gt);
// Sum over the three scales of the mean absolute error.
double loss_rgb(const std::array<Tensor, 3>& I, const std::array<Tensor, 3>& gt);

struct LossBreakdown {
  double l_diff = 0.0;
  double l_rgb = 0.0;
  double l_fft = 0.0;
  double total = 0.0;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
};

// l_diff + lambda1 l_rgb + lambda2 l_fft.
LossBreakdown compose_losses(double l_diff, double l_rgb, double l_fft, double lambda1, double lambda2);

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates every parameter that requires grad and has a gradient, then clears all
  // gradients. Frozen parameters are never written.
  void step(nn::ParameterStore& store);
  long steps() const { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TrainingItem {
  Tensor hq;
  Tensor lq;
  conditioning::ConditioningBundle cond;
};

// Bilinear resize of the LQ image to the HQ size.
Tensor upsample_lq(const Tensor& lq, int h, int w);

// Differentiable losses of one item for given t and eps.
struct ItemGraph {
  ag::Var l_diff, l_rgb, l_fft, total;
};
ItemGraph item_losses(const MrirModel& model, const codec::Codec& codec, const TrainingItem& item,
                      const NoiseSchedule& sched, int t, const Tensor& eps, bool use_null);

// One optimizer step over the batch: per item draws t, eps and the null-conditioning
// coin from `rng`, accumulates gradients of the batch-mean loss and applies Adam to
// trainable parameters. Throws TrainingError naming a non-finite term.
LossBreakdown train_step(MrirModel& model, const codec::Codec& codec, const std::vector<TrainingItem>& batch,
                         const NoiseSchedule& sched, Adam& opt, Rng& rng);

// (1 - w) eps_uncond + w eps_cond, which is eps_uncond + w (eps_cond - eps_uncond)
// with both endpoints exact.
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

// forward_diffuse(lq_latent, inference_steps[0], eps) when enabled, eps otherwise.
Tensor lre_init(const Tensor& lq_latent, const NoiseSchedule& sched, const Tensor& eps, bool enabled);

struct SampleOptions {
  double cfg_scale = 5.5;
  bool lre = true;
  bool clip_x0 = true;
  std::uint64_t seed = 0;
  // With cfg_scale == 1 the unconditional pass is skipped.
  bool elide_unconditional = false;
};

// DDPM ancestral sampling over the respaced inference steps with classifier-free
// guidance. `lq_up` is the LQ image already resized to the output size; it seeds the
// LRE start and feeds the processor that drives the control branch. Returns the
// decoded image clipped to [0, 1].
Tensor ddpm_sample(const MrirModel& model, const codec::Codec& codec, const conditioning::ConditioningBundle& cond,
                   const Tensor& lq_up, const NoiseSchedule& sched, const SampleOptions& opts);

}  // namespace mrir::diffusion
