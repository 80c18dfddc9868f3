#include <cmath>

#include "doctest.h"
#include "gen.hpp"
#include "mrir/codec.hpp"
#include "mrir/degrade.hpp"
#include "mrir/diffusion.hpp"
#include "mrir/image.hpp"
#include "support/oracles.hpp"

using namespace mrir;
using namespace mrir::diffusion;

namespace {

std::vector<TrainingItem> items(const Config& cfg, int n, std::uint64_t seed) {
  conditioning::Conditioner cond(cfg);
  std::vector<TrainingItem> out;
  for (int i = 0; i < n; ++i) {
    const Tensor hq = image::synthetic_scene(64, 64, seed + i);
    const Tensor lq = degrade::synthesize_pair(hq, degrade::DegradationParams::neutral(4)).lq;
    out.push_back({hq, lq, cond.bundle(lq)});
  }
  return out;
}

}  // namespace

TEST_CASE("schedule: defaults") {
  const auto s = make_schedule(1000, 1e-4, 0.02, 50);
  REQUIRE(s.alpha_bars.size() == 1000);
  CHECK(s.alpha_bars[0] > 0.99);
  CHECK(s.alpha_bars[999] < 0.01);
  double prod = 1.0;
  for (int t = 0; t < 1000; ++t) {
    CHECK(s.betas[t] > 0.0);
    CHECK(s.betas[t] < 1.0);
    CHECK(s.alphas[t] == 1.0 - s.betas[t]);
    prod *= s.alphas[t];
    CHECK(s.alpha_bars[t] == doctest::Approx(prod).epsilon(1e-12));
    if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.alpha_bars[t] > 0.0);
  }
  CHECK(s.betas[0] == 1e-4);
  CHECK(s.betas[999] == doctest::Approx(0.02).epsilon(1e-12));
  REQUIRE(s.inference_steps.size() == 50);
  CHECK(s.inference_steps.front() == 999);
  CHECK(s.inference_steps.back() == 0);
  for (std::size_t i = 1; i < s.inference_steps.size(); ++i) CHECK(s.inference_steps[i] < s.inference_steps[i - 1]);
}

TEST_CASE("schedule: full subsequence and the single-step case") {
  const auto full = make_schedule(20, 1e-3, 0.1, 20);
  for (int i = 0; i < 20; ++i) CHECK(full.inference_steps[i] == 19 - i);
  const auto one = make_schedule(1, 1e-4, 0.02, 1);
  CHECK(one.inference_steps == std::vector<int>{0});
  CHECK(one.alpha_bars[0] == 1.0 - 1e-4);
}

TEST_CASE("schedule: invalid bounds") {
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02, 5), ArgumentError);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 0.01, 5), ArgumentError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0, 5), ArgumentError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 0.02, 11), ArgumentError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 0.02, 0), ArgumentError);
}

TEST_CASE("forward diffusion") {
  const auto s = make_schedule(1000, 1e-4, 0.02, 50);
  Rng rng(1);
  const Tensor z0 = rng.normal_tensor({4, 5, 5}), eps = rng.normal_tensor({4, 5, 5});
  const Tensor zero({4, 5, 5});
  for (int t : {0, 10, 500, 999}) {
    const Tensor zt = forward_diffuse(z0, t, eps, s);
    const double a = s.alpha_bars[t];
    for (std::size_t i = 0; i < zt.size(); ++i) {
      CHECK(zt[i] == std::sqrt(a) * z0[i] + std::sqrt(1 - a) * eps[i]);
      CHECK(std::fabs((zt[i] - std::sqrt(a) * z0[i]) / std::sqrt(1 - a) - eps[i]) <= 1e-12);
    }
    const Tensor pure = forward_diffuse(zero, t, eps, s);
    for (std::size_t i = 0; i < pure.size(); ++i) CHECK(pure[i] == std::sqrt(1 - a) * eps[i]);
  }
  NoiseSchedule ident;
  ident.T = 1;
  ident.alpha_bars = {1.0};
  CHECK(forward_diffuse(z0, 0, eps, ident) == z0);
  CHECK_THROWS_AS(forward_diffuse(z0, 1000, eps, s), ArgumentError);
  CHECK_THROWS_AS(forward_diffuse(z0, -1, eps, s), ArgumentError);
  CHECK_THROWS_AS(forward_diffuse(z0, 3, Tensor({4, 5, 4}), s), ArgumentError);
}

TEST_CASE("forward diffusion preserves unit variance") {
  const auto s = make_schedule(1000, 1e-4, 0.02, 50);
  Rng rng(2);
  const Tensor z0 = rng.normal_tensor({10000}), eps = rng.normal_tensor({10000});
  for (int t : {1, 500, 999}) {
    const Tensor zt = forward_diffuse(z0, t, eps, s);
    double mean = 0, var = 0;
    for (double v : zt.storage()) mean += v;
    mean /= zt.size();
    for (double v : zt.storage()) var += (v - mean) * (v - mean);
    var /= zt.size() - 1;
    CHECK(var >= 0.95);
    CHECK(var <= 1.05);
  }
}

TEST_CASE("loss_fft: identity, DC shift and the naive oracle") {
  Rng rng(3);
  const Tensor a = rng.normal_tensor({3, 8, 8});
  CHECK(loss_fft(a, a) == 0.0);
  Tensor shifted = a;
  for (double& v : shifted.storage()) v += 0.37;
  CHECK(loss_fft(shifted, a) == doctest::Approx(0.37).epsilon(1e-12));
  CHECK(oracle::naive_fft_l1(shifted, a) == doctest::Approx(0.37).epsilon(1e-12));
  gen::for_all(10, 4, [](Rng& r) {
    const int h = gen::pick(r, {3, 8, 12, 16}), w = gen::pick(r, {5, 8, 16});
    const Tensor p = r.normal_tensor({3, h, w}), g = r.normal_tensor({3, h, w});
    CHECK(std::fabs(loss_fft(p, g) - oracle::naive_fft_l1(p, g)) <= 1e-8);
    CHECK(loss_fft(p, g) >= 0);
  });
  CHECK_THROWS_AS(loss_fft(Tensor({3, 8, 8}), Tensor({3, 8, 4})), ArgumentError);
}

TEST_CASE("loss_rgb") {
  Rng rng(5);
  const std::array<Tensor, 3> gt{rng.uniform_tensor({3, 8, 8}, 0, 1), rng.uniform_tensor({3, 4, 4}, 0, 1),
                                 rng.uniform_tensor({3, 2, 2}, 0, 1)};
  CHECK(loss_rgb(gt, gt) == 0.0);
  std::array<Tensor, 3> off = gt;
  for (Tensor& t : off)
    for (double& v : t.storage()) v += 0.1;
  CHECK(loss_rgb(off, gt) == doctest::Approx(0.3).epsilon(1e-12));
  const std::array<Tensor, 3> pred{rng.normal_tensor({3, 8, 8}), rng.normal_tensor({3, 4, 4}), rng.normal_tensor({3, 2, 2})};
  double direct = 0;
  for (int k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < gt[k].size(); ++i) s += std::fabs(pred[k][i] - gt[k][i]);
    direct += s / gt[k].size();
  }
  CHECK(std::fabs(loss_rgb(pred, gt) - direct) <= 1e-12);
  std::array<Tensor, 3> bad = gt;
  bad[1] = Tensor({3, 4, 5});
  CHECK_THROWS_AS(loss_rgb(bad, gt), ArgumentError);
}

TEST_CASE("loss terms are non-negative and vanish at identity") {
  gen::for_all(10, 6, [](Rng& rng) {
    const Tensor a = rng.normal_tensor({3, 8, 8}), b = rng.normal_tensor({3, 8, 8});
    const ag::Var va = ag::constant(a), vb = ag::constant(b);
    CHECK(ag::mse(va, vb).value()[0] >= 0);
    CHECK(ag::l1_mean(va, vb).value()[0] >= 0);
    CHECK(ag::fft_l1(va, vb).value()[0] >= 0);
    CHECK(ag::mse(va, va).value()[0] == 0);
    CHECK(ag::l1_mean(va, va).value()[0] == 0);
    CHECK(ag::fft_l1(va, va).value()[0] == 0);
  });
}

TEST_CASE("loss composition uses the stated weights") {
  const auto b = compose_losses(0.7, 0.2, 3.0, 0.1, 0.01);
  CHECK(b.total == 0.7 + 0.1 * 0.2 + 0.01 * 3.0);
  CHECK(b.lambda1 == 0.1);
  CHECK(b.lambda2 == 0.01);
  const Config defaults;
  CHECK(defaults.train.lambda1 == 0.1);
  CHECK(defaults.train.lambda2 == 0.01);
}

TEST_CASE("cfg_combine") {
  gen::for_all(10, 7, [](Rng& rng) {
    const Tensor u = rng.normal_tensor({6, 2, 2}), c = rng.normal_tensor({6, 2, 2});
    CHECK(cfg_combine(u, c, 1.0) == c);
    CHECK(cfg_combine(u, c, 0.0) == u);
    const double w = rng.uniform(-3, 9);
    CHECK(max_abs_diff(cfg_combine(c, c, w), c) <= 1e-12);
    const Tensor g = cfg_combine(u, c, w);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::fabs(g[i] - (u[i] + w * (c[i] - u[i]))) <= 1e-12);
  });
  CHECK_THROWS_AS(cfg_combine(Tensor({2}), Tensor({3}), 1.0), ArgumentError);
}

TEST_CASE("lre_init") {
  const auto s = make_schedule(1000, 1e-4, 0.02, 50);
  Rng rng(8);
  const Tensor lq = rng.uniform_tensor({12, 3, 3}, -1, 1), eps = rng.normal_tensor({12, 3, 3});
  CHECK(lre_init(lq, s, eps, false) == eps);
  const Tensor start = lre_init(lq, s, Tensor({12, 3, 3}), true);
  const double a = s.alpha_bars[s.inference_steps[0]];
  for (std::size_t i = 0; i < start.size(); ++i) CHECK(start[i] == std::sqrt(a) * lq[i]);
  CHECK(a < 1e-3);
  CHECK(max_abs_diff(lre_init(lq, s, eps, true), eps) < 0.05);
  const auto short_sched = make_schedule(1000, 1e-4, 0.02, 1);
  CHECK(short_sched.inference_steps[0] == 999);
  CHECK_THROWS_AS(lre_init(lq, s, Tensor({12, 3, 2}), true), ArgumentError);
}

TEST_CASE("adam: bias-corrected first step and frozen leaves") {
  nn::ParameterStore store(0);
  ag::Var a = store.create("a", Tensor({3}, {1.0, 2.0, 3.0}));
  ag::Var b = store.create("b", Tensor({2}, {5.0, 6.0}));
  store.set_trainable("b", false);
  a.grad_buffer() = Tensor({3}, {0.5, -2.0, 0.0});
  Adam opt(0.1);
  opt.step(store);
  CHECK(a.value()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(a.value()[1] == doctest::Approx(2.1).epsilon(1e-6));
  CHECK(a.value()[2] == 3.0);
  CHECK(b.value() == Tensor({2}, {5.0, 6.0}));
  CHECK(opt.steps() == 1);
}

TEST_CASE("train_step: adapter policy keeps frozen parameters bit-identical") {
  Config cfg = Config::micro();
  MrirModel model(cfg);
  FreezePolicy::adapter().apply(model.params());
  std::map<std::string, Tensor> before;
  for (const auto& [p, v] : model.params().entries()) before[p] = v.value();
  auto codec = codec::make_codec(cfg.codec);
  const auto batch = items(cfg, 2, 3);
  const auto sched = make_schedule(1000, 1e-4, 0.02, 10);
  Adam opt(cfg.train.lr);
  Rng rng(4);
  for (int step = 0; step < 3; ++step) {
    const auto l = train_step(model, *codec, batch, sched, opt, rng);
    CHECK(l.lambda1 == 0.1);
    CHECK(l.lambda2 == 0.01);
    CHECK(l.total == l.l_diff + 0.1 * l.l_rgb + 0.01 * l.l_fft);
    CHECK(l.l_diff >= 0);
    CHECK(l.l_rgb >= 0);
    CHECK(l.l_fft >= 0);
  }
  int changed = 0;
  for (const auto& [p, v] : model.params().entries()) {
    CAPTURE(p);
    if (!v.requires_grad()) {
      CHECK(v.value() == before[p]);
    } else if (!(v.value() == before[p])) {
      ++changed;
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("train_step: item losses are reproducible for a given t and eps") {
  Config cfg = Config::micro();
  MrirModel model(cfg);
  auto codec = codec::make_codec(cfg.codec);
  const auto batch = items(cfg, 1, 5);
  const auto sched = make_schedule(1000, 1e-4, 0.02, 10);
  Rng rng(1);
  const Tensor eps = rng.normal_tensor({192, 8, 8});
  const auto a = item_losses(model, *codec, batch[0], sched, 321, eps, false);
  const auto b = item_losses(model, *codec, batch[0], sched, 321, eps, false);
  CHECK(a.total.value() == b.total.value());
  const auto n = item_losses(model, *codec, batch[0], sched, 321, eps, true);
  CHECK(n.l_rgb.value() == a.l_rgb.value());
}

TEST_CASE("train_step: a non-finite term is named") {
  Config cfg = Config::micro();
  MrirModel model(cfg);
  FreezePolicy::adapter().apply(model.params());
  ag::Var w = model.rgb_heads().head(1).bias;
  w.mutable_value()[0] = NAN;
  auto codec = codec::make_codec(cfg.codec);
  const auto batch = items(cfg, 1, 7);
  const auto sched = make_schedule(1000, 1e-4, 0.02, 10);
  Adam opt(1e-3);
  Rng rng(2);
  try {
    train_step(model, *codec, batch, sched, opt, rng);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.term == "l_rgb");
  }
  CHECK_THROWS_AS(train_step(model, *codec, {}, sched, opt, rng), ArgumentError);
}

TEST_CASE("ddpm_sample: shape, range, determinism and divergence reporting") {
  Config cfg = Config::micro();
  MrirModel model(cfg);
  gen::randomize(model.params(), "control_branch.proj", 0.05, 1);
  auto codec = codec::make_codec(cfg.codec);
  conditioning::Conditioner cond(cfg);
  Rng rng(3);
  const Tensor lq = gen::quantized_image(rng, 16, 16);
  const Tensor up = upsample_lq(lq, 64, 64);
  CHECK(up.shape() == Shape{3, 64, 64});
  const auto sched = make_schedule(1000, 1e-4, 0.02, 5);
  SampleOptions opts;
  opts.seed = 9;
  const auto bundle = cond.bundle(lq);
  const Tensor a = ddpm_sample(model, *codec, bundle, up, sched, opts);
  const Tensor b = ddpm_sample(model, *codec, bundle, up, sched, opts);
  CHECK(a.shape() == Shape{3, 64, 64});
  CHECK(a == b);
  for (double v : a.storage()) CHECK((v >= 0.0 && v <= 1.0));
  opts.seed = 10;
  CHECK_FALSE(ddpm_sample(model, *codec, bundle, up, sched, opts) == a);
  opts.lre = false;
  CHECK(ddpm_sample(model, *codec, bundle, up, sched, opts).shape() == a.shape());

  for (const auto& [path, var] : model.params().entries()) {
    if (path == "unet.conv_out.bias") {
      ag::Var v = var;
      v.mutable_value()[0] = INFINITY;
    }
  }
  try {
    ddpm_sample(model, *codec, bundle, up, sched, opts);
    FAIL("expected SamplingError");
  } catch (const SamplingError& e) {
    CHECK(e.step == 0);
  }
}
