#include <cmath>

#include "doctest.h"
#include "gen.hpp"
#include "mrir/fusion_unet.hpp"
#include "mrir/model.hpp"
#include "support/oracles.hpp"

using namespace mrir;
using namespace mrir::unet;

namespace {

AttentionBlockConfig block_config(BlockKind kind, int d = 16) {
  AttentionBlockConfig c;
  c.d_model = d;
  c.n_heads = 2;
  c.d_cross = 12;
  c.d_text = 10;
  c.kind = kind;
  return c;
}

CrossTokens random_cond(Rng& rng, const AttentionBlockConfig& c, int text = 6, int image = 5) {
  return {ag::constant(rng.normal_tensor({text, c.d_text})), ag::constant(rng.normal_tensor({image, c.d_cross}))};
}

Config two_scale_config() {
  Config cfg = Config::micro();
  cfg.unet.widths = {8, 16};
  cfg.unet.heads = 2;
  cfg.unet.norm_groups = 4;
  cfg.processor.channels = {4, 8, 8};
  cfg.processor.feature_channels = 8;
  return cfg;
}

std::vector<Config> toy_configs() {
  Config a = Config::micro();
  Config b = two_scale_config();
  Config c = Config::micro();
  c.unet.widths = {8, 16, 16};
  c.unet.res_blocks = 2;
  return {a, b, c};
}

}  // namespace

TEST_CASE("unet: timestep embedding") {
  const Tensor e0 = timestep_embedding(0, 16);
  CHECK(e0.shape() == Shape{1, 16});
  for (int i = 0; i < 8; ++i) {
    CHECK(e0[i] == 1.0);
    CHECK(e0[8 + i] == 0.0);
  }
  for (int t : {1, 5, 500, 999}) {
    const Tensor e = timestep_embedding(t, 32);
    for (double v : e.storage()) CHECK((v >= -1.0 && v <= 1.0));
  }
  const Tensor a = timestep_embedding(1, 32), b = timestep_embedding(5, 32), c = timestep_embedding(500, 32);
  CHECK(max_abs_diff(a, b) > 0);
  CHECK(max_abs_diff(a, c) > 0);
  CHECK(max_abs_diff(b, c) > 0);
  // the lowest frequency is 1e-4, the highest 1
  CHECK(timestep_embedding(1, 32)[0] == doctest::Approx(std::cos(1.0)));
  CHECK(timestep_embedding(100, 32)[15] == doctest::Approx(std::cos(100 * 1e-4)));
  CHECK_THROWS_AS(timestep_embedding(3, 15), ArgumentError);
  CHECK_THROWS_AS(timestep_embedding(3, 0), ArgumentError);
}

TEST_CASE("attention: matches a step-by-step oracle (2 queries, 3 keys, d_model 4)") {
  nn::ParameterStore store(3);
  const auto w = AttentionWeights::create(store, "a", 4, 5, 2, false);
  gen::randomize(store, "a", 0.5, 1);
  Rng rng(2);
  const Tensor q = rng.normal_tensor({2, 4}), kv = rng.normal_tensor({3, 5});
  const Tensor out = multihead_attention(ag::constant(q), ag::constant(kv), w).value();
  const Tensor ref = oracle::naive_attention(q, kv, w.q.weight.value(), w.q.bias.value(), w.k.weight.value(),
                                             w.v.weight.value(), w.v.bias.value(), w.out.weight.value(),
                                             w.out.bias.value(), 2);
  CHECK(max_abs_diff(out, ref) <= 1e-12);
  CHECK_FALSE(w.k.bias);
}

TEST_CASE("attention: oracle agreement on random shapes") {
  gen::for_all(10, 3, [](Rng& rng) {
    const int heads = gen::pick(rng, {1, 2, 4}), d = heads * gen::pick(rng, {2, 3}), dkv = gen::pick(rng, {3, 8});
    const int n = gen::pick(rng, {1, 4, 7}), m = gen::pick(rng, {1, 2, 9});
    nn::ParameterStore store(rng.next_u64());
    const auto w = AttentionWeights::create(store, "a", d, dkv, heads, false);
    gen::randomize(store, "a", 0.6, rng.next_u64());
    const Tensor q = rng.normal_tensor({n, d}), kv = rng.normal_tensor({m, dkv});
    std::vector<Tensor> probs;
    const Tensor out = multihead_attention(ag::constant(q), ag::constant(kv), w, &probs).value();
    CHECK(max_abs_diff(out, oracle::naive_attention(q, kv, w.q.weight.value(), w.q.bias.value(), w.k.weight.value(),
                                                    w.v.weight.value(), w.v.bias.value(), w.out.weight.value(),
                                                    w.out.bias.value(), heads)) <= 1e-12);
    REQUIRE(probs.size() == static_cast<std::size_t>(heads));
    for (const Tensor& p : probs) {
      for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int c = 0; c < m; ++c) s += p.at(r, c);
        CHECK(std::fabs(s - 1.0) <= 1e-6);
      }
    }
  });
}

TEST_CASE("attention: identical value rows collapse to the projected value") {
  nn::ParameterStore store(4);
  const auto w = AttentionWeights::create(store, "a", 6, 4, 3, false);
  gen::randomize(store, "a", 0.5, 2);
  Rng rng(5);
  const Tensor row = rng.normal_tensor({1, 4});
  Tensor kv({7, 4});
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 4; ++c) kv.at(r, c) = row.at(0, c);
  const Tensor out = multihead_attention(ag::constant(rng.normal_tensor({5, 6})), ag::constant(kv), w).value();
  const Tensor v = w.v(ag::constant(row)).value();
  const Tensor expect = w.out(ag::constant(v)).value();
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 6; ++c) CHECK(std::fabs(out.at(r, c) - expect.at(0, c)) <= 1e-12);
}

TEST_CASE("attention: a single key gets weight exactly 1") {
  nn::ParameterStore store(4);
  const auto w = AttentionWeights::create(store, "a", 4, 4, 2, false);
  gen::randomize(store, "a", 3.0, 9);
  Rng rng(6);
  std::vector<Tensor> probs;
  multihead_attention(ag::constant(rng.normal_tensor({3, 4})), ag::constant(rng.normal_tensor({1, 4})), w, &probs);
  for (const Tensor& p : probs)
    for (double v : p.storage()) CHECK(v == 1.0);
}

TEST_CASE("attention: shape errors") {
  nn::ParameterStore store(4);
  const auto w = AttentionWeights::create(store, "a", 4, 3, 2, false);
  CHECK_THROWS_AS(multihead_attention(ag::constant(Tensor({2, 5})), ag::constant(Tensor({3, 3})), w), ArgumentError);
  CHECK_THROWS_AS(multihead_attention(ag::constant(Tensor({2, 4})), ag::constant(Tensor({3, 4})), w), ArgumentError);
  nn::ParameterStore s2(1);
  CHECK_THROWS_AS(AttentionWeights::create(s2, "b", 6, 3, 4, false), ConfigError);
}

TEST_CASE("fusion block: up block with zero control equals the down block") {
  nn::ParameterStore up_store(11), down_store(11);
  const FusionBlock up(up_store, "blk", block_config(BlockKind::up));
  const FusionBlock down(down_store, "blk", block_config(BlockKind::down));
  gen::randomize(up_store, "image_cross.out", 0.3, 1);
  gen::randomize(down_store, "image_cross.out", 0.3, 1);
  Rng rng(3);
  const ag::Var x = ag::constant(rng.normal_tensor({16, 3, 2}));
  const ag::Var zero = ag::constant(Tensor({16, 3, 2}));
  const auto cond = random_cond(rng, block_config(BlockKind::up));
  CHECK(up.forward(x, cond, &zero).value() == down.forward(x, cond, nullptr).value());
  CHECK(up.forward_without_pixel(x, cond).value() == down.forward(x, cond, nullptr).value());
}

TEST_CASE("fusion block: pixel control reaches the output once the projection is trained") {
  nn::ParameterStore store(11);
  const FusionBlock up(store, "blk", block_config(BlockKind::up));
  gen::randomize(store, "pixel_attn.out", 0.3, 1);
  Rng rng(3);
  const ag::Var x = ag::constant(rng.normal_tensor({16, 2, 2}));
  const auto cond = random_cond(rng, block_config(BlockKind::up));
  const ag::Var p1 = ag::constant(rng.normal_tensor({16, 2, 2})), p2 = ag::constant(rng.normal_tensor({16, 2, 2}));
  CHECK(max_abs_diff(up.forward(x, cond, &p1).value(), up.forward(x, cond, &p2).value()) > 1e-6);
}

TEST_CASE("fusion block: zero image tokens add the closed-form bias constant") {
  auto cfg = block_config(BlockKind::down);
  cfg.order = {"image"};
  nn::ParameterStore store(5);
  const FusionBlock blk(store, "blk", cfg);
  gen::randomize(store, "blk", 0.4, 2);
  Rng rng(8);
  const Tensor xv = rng.normal_tensor({16, 2, 3});
  CrossTokens cond{ag::constant(rng.normal_tensor({4, cfg.d_text})), ag::constant(Tensor({5, cfg.d_cross}))};
  const Tensor out = blk.forward(ag::constant(xv), cond, nullptr).value();
  const auto& w = blk.sublayer("image");
  const Tensor bv = w.v.bias.value().reshaped({1, 16});
  const Tensor expect = w.out(ag::constant(bv)).value();
  for (int c = 0; c < 16; ++c)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) CHECK(std::fabs(out.at(c, y, x) - xv.at(c, y, x) - expect.at(0, c)) <= 1e-12);
}

TEST_CASE("fusion block: permuting text tokens leaves the output unchanged") {
  nn::ParameterStore store(6);
  const auto cfg = block_config(BlockKind::down);
  const FusionBlock blk(store, "blk", cfg);
  gen::randomize(store, "image_cross.out", 0.3, 3);
  gen::for_all(5, 7, [&](Rng& rng) {
    const ag::Var x = ag::constant(rng.normal_tensor({16, 2, 2}));
    const Tensor text = rng.normal_tensor({6, cfg.d_text});
    Tensor shuffled = text;
    const int perm[6] = {3, 0, 5, 1, 4, 2};
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < cfg.d_text; ++c) shuffled.at(r, c) = text.at(perm[r], c);
    const ag::Var img = ag::constant(rng.normal_tensor({5, cfg.d_cross}));
    const Tensor a = blk.forward(x, {ag::constant(text), img}, nullptr).value();
    const Tensor b = blk.forward(x, {ag::constant(shuffled), img}, nullptr).value();
    CHECK(max_abs_diff(a, b) <= 1e-12);
  });
}

TEST_CASE("fusion block: argument checks") {
  nn::ParameterStore store(6);
  const FusionBlock up(store, "up", block_config(BlockKind::up));
  const FusionBlock down(store, "down", block_config(BlockKind::down));
  Rng rng(1);
  const ag::Var x = ag::constant(Tensor({16, 2, 2}));
  const auto cond = random_cond(rng, block_config(BlockKind::up));
  CHECK_THROWS_AS(up.forward(x, cond, nullptr), ArgumentError);
  CHECK_THROWS_AS(down.forward(x, cond, &x), ArgumentError);
  const ag::Var wrong = ag::constant(Tensor({16, 1, 2}));
  CHECK_THROWS_AS(up.forward(x, cond, &wrong), ArgumentError);
  CHECK_THROWS_AS(down.sublayer("pixel"), ArgumentError);
  CHECK_NOTHROW(up.sublayer("pixel"));
}

TEST_CASE("fusion block: gradient check on a 2x2 latent") {
  nn::ParameterStore store(12);
  const auto cfg = block_config(BlockKind::up);
  const FusionBlock blk(store, "blk", cfg);
  gen::randomize(store, ".out.", 0.4, 4);
  Rng rng(13);
  const ag::Var x = ag::leaf(rng.normal_tensor({16, 2, 2}), true);
  const ag::Var p = ag::constant(rng.normal_tensor({16, 2, 2}));
  const auto cond = random_cond(rng, cfg);
  std::vector<oracle::GradTarget> targets;
  for (const auto& [path, var] : store.entries()) targets.push_back({path, var});
  targets.push_back({"x", x});
  const auto g = oracle::gradcheck([&] { return ag::sum(blk.forward(x, cond, &p)); }, targets, 8, 2);
  CHECK(g.rel_error <= 1e-4);
}

TEST_CASE("unet: output and decoder shapes for three toy configs") {
  for (const Config& cfg : toy_configs()) {
    MrirModel model(cfg);
    const int s = model.unet().scales();
    const int side = 2 << s;  // halvable down to a 4x4 coarsest level
    Rng rng(1);
    conditioning::Conditioner cond(cfg);
    const auto bundle = cond.bundle(Tensor({3, 8, 8}, 0.3));
    const auto tokens = model.cross_tokens(bundle.text, bundle.image);
    const ag::Var z = ag::constant(rng.normal_tensor({cfg.latent_channels(), side, side}));
    CHECK(model.unet().forward(z, 10, tokens, nullptr).shape() == z.shape());
    const auto shapes = model.unet().decoder_shapes(side, side);
    REQUIRE(static_cast<int>(shapes.size()) == s);
    const Tensor lq_up = rng.uniform_tensor({3, side * 8, side * 8}, 0, 1);
    const auto controls = model.controls(model.processor().forward(ag::constant(lq_up)), 10, tokens);
    REQUIRE(static_cast<int>(controls.P.size()) == s);
    for (int i = 0; i < s; ++i) {
      CHECK(controls.P[i].shape() == shapes[i]);
      CHECK(shapes[i][1] == side >> i);
    }
  }
}

TEST_CASE("unet: fresh controls are inert and forward is deterministic") {
  const Config cfg = Config::micro();
  MrirModel model(cfg);
  conditioning::Conditioner cond(cfg);
  Rng rng(2);
  const Tensor lq = gen::quantized_image(rng, 16, 16);
  const auto bundle = cond.bundle(lq);
  const auto tokens = model.cross_tokens(bundle.text, bundle.image);
  const ag::Var z = ag::constant(rng.normal_tensor({192, 8, 8}));
  const auto controls = model.controls(model.processor().forward(ag::constant(rng.uniform_tensor({3, 64, 64}, 0, 1))), 5, tokens);
  for (const auto& p : controls.P)
    for (double v : p.value().storage()) CHECK(v == 0.0);
  const Tensor with = model.unet().forward(z, 5, tokens, &controls).value();
  const Tensor without = model.unet().forward(z, 5, tokens, nullptr).value();
  CHECK(with == without);
  CHECK(model.unet().forward(z, 5, tokens, &controls).value() == with);
}

TEST_CASE("unet: zero attention outputs reduce the network to its convolutional skeleton") {
  const Config cfg = Config::micro();
  MrirModel model(cfg);
  gen::randomize(model.params(), "unet", 0.1, 3);
  for (const auto& [path, var] : model.params().entries()) {
    const bool attn_out = path.find(".attn") != std::string::npos && path.find(".out.") != std::string::npos;
    if (attn_out) {
      ag::Var v = var;
      v.mutable_value().fill(0.0);
    }
  }
  conditioning::Conditioner cond(cfg);
  Rng rng(4);
  const auto bundle = cond.bundle(gen::quantized_image(rng, 16, 16));
  const auto tokens = model.cross_tokens(bundle.text, bundle.image);
  const ag::Var z = ag::constant(rng.normal_tensor({192, 8, 8}));
  PixelControlSet controls;
  for (const auto& s : model.unet().decoder_shapes(8, 8)) controls.P.push_back(ag::constant(rng.normal_tensor(s)));
  const Tensor full = model.unet().forward(z, 77, tokens, &controls).value();
  ForwardOptions skeleton;
  skeleton.skip_attention = true;
  CHECK(full == model.unet().forward(z, 77, tokens, nullptr, skeleton).value());
}

TEST_CASE("unet: shape errors name the failing scale") {
  const Config cfg = Config::micro();
  MrirModel model(cfg);
  conditioning::Conditioner cond(cfg);
  const auto bundle = cond.bundle(Tensor({3, 16, 16}, 0.5));
  const auto tokens = model.cross_tokens(bundle.text, bundle.image);
  PixelControlSet bad;
  for (const auto& s : model.unet().decoder_shapes(8, 8)) bad.P.push_back(ag::constant(Tensor(s)));
  bad.P[2] = ag::constant(Tensor({32, 3, 3}));
  const ag::Var z = ag::constant(Tensor({192, 8, 8}));
  try {
    model.unet().forward(z, 1, tokens, &bad);
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("scale 3") != std::string::npos);
  }
  CHECK_THROWS_AS(model.unet().forward(ag::constant(Tensor({192, 6, 6})), 1, tokens, nullptr), ArgumentError);
  CHECK_THROWS_AS(model.unet().forward(ag::constant(Tensor({100, 8, 8})), 1, tokens, nullptr), ArgumentError);
}

TEST_CASE("unet: end-to-end gradient check on a 2-scale micro config") {
  const Config cfg = two_scale_config();
  MrirModel model(cfg);
  gen::randomize(model.params(), ".out.", 0.2, 5);
  FreezePolicy::full().apply(model.params());
  conditioning::Conditioner cond(cfg);
  Rng rng(6);
  const auto bundle = cond.bundle(gen::quantized_image(rng, 8, 8));
  const auto tokens = model.cross_tokens(bundle.text, bundle.image);
  const ag::Var z = ag::constant(rng.normal_tensor({192, 4, 4}));
  PixelControlSet controls;
  for (const auto& s : model.unet().decoder_shapes(4, 4)) controls.P.push_back(ag::constant(rng.normal_tensor(s)));
  const Tensor r = rng.normal_tensor({192, 4, 4});
  std::vector<oracle::GradTarget> targets;
  for (const auto& [path, var] : model.params().entries()) {
    if (path.rfind("unet", 0) == 0) targets.push_back({path, var});
  }
  const auto g = oracle::gradcheck(
      [&] { return ag::sum(ag::mul(model.unet().forward(z, 300, tokens, &controls), ag::constant(r))); }, targets, 2, 3);
  CHECK(g.rel_error <= 1e-5);
  CHECK(g.coords >= 100);
}
