#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gen.hpp"
#include "mrir/conditioning.hpp"
#include "mrir/image.hpp"
#include "support/oracles.hpp"

using namespace mrir;
using namespace mrir::conditioning;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "mrir_unit" / name;
  fs::create_directories(p);
  return p;
}

std::string words(int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += (i ? " w" : "w") + std::to_string(i);
  return s;
}

// Plain-loop forward of the three-layer refine MLP for one token.
std::vector<double> refine_oracle(const RefineLayer& layer, const std::vector<double>& x) {
  auto affine = [](const nn::Linear& l, const std::vector<double>& in) {
    std::vector<double> out(l.out_features());
    for (int o = 0; o < l.out_features(); ++o) {
      double s = l.bias.value()[o];
      for (int i = 0; i < l.in_features(); ++i) s += l.weight.value().at(o, i) * in[i];
      out[o] = s;
    }
    return out;
  };
  auto norm_act = [&](const nn::LayerNorm& n, std::vector<double> v) {
    double mean = 0, var = 0;
    for (double e : v) mean += e;
    mean /= v.size();
    for (double e : v) var += (e - mean) * (e - mean);
    var /= v.size();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double y = (v[i] - mean) / std::sqrt(var + 1e-5) * n.gamma.value()[i] + n.beta.value()[i];
      v[i] = y > 0 ? y : layer.leaky_slope() * y;
    }
    return v;
  };
  auto h = norm_act(layer.norm(0), affine(layer.fc(0), x));
  h = norm_act(layer.norm(1), affine(layer.fc(1), h));
  return affine(layer.fc(2), h);
}

}  // namespace

TEST_CASE("conditioning: stub captions are deterministic and non-empty") {
  Rng rng(1);
  const Tensor a = gen::quantized_image(rng, 16, 16), b = gen::quantized_image(rng, 16, 16);
  StubCaptionProvider stub("describe");
  const auto ra = stub.caption(a, ""), rb = stub.caption(a, "");
  CHECK(ra.caption == rb.caption);
  CHECK_FALSE(ra.caption.empty());
  CHECK(ra.source == CaptionSource::stub);
  CHECK(ra.instruction == "describe");
  bool any_differs = false;
  for (int i = 0; i < 8 && !any_differs; ++i) any_differs = stub.caption(gen::quantized_image(rng, 16, 16), "").caption != ra.caption;
  CHECK(any_differs);
  (void)b;
}

TEST_CASE("conditioning: default instruction") {
  CHECK(ConditioningConfig{}.instruction ==
        "Describe the image in a very detailed manner if we remove the degradation artifacts from the image.");
}

TEST_CASE("conditioning: sidecar captions") {
  const fs::path dir = scratch("sidecar");
  const std::string img = (dir / "wheat.png").string();
  CHECK(sidecar_path(img) == (dir / "wheat.caption.txt").string());
  std::ofstream(sidecar_path(img)) << "A field of ripe wheat stands against a clear blue sky\n";
  SidecarCaptionProvider provider("q");
  const auto rec = provider.caption(Tensor({3, 8, 8}), img);
  CHECK(rec.caption == "A field of ripe wheat stands against a clear blue sky");
  CHECK(rec.source == CaptionSource::sidecar_file);
  CHECK_THROWS_AS(provider.caption(Tensor({3, 8, 8}), (dir / "missing.png").string()), ProvenanceError);
}

TEST_CASE("conditioning: empty sidecar caption falls back to the stub") {
  const fs::path dir = scratch("sidecar_empty");
  const std::string img = (dir / "blank.png").string();
  std::ofstream(sidecar_path(img)) << "   \n";
  SidecarCaptionProvider provider("q");
  const Tensor lq({3, 8, 8}, 0.25);
  const auto rec = get_caption(lq, img, provider, "q");
  CHECK_FALSE(rec.caption.empty());
  CHECK(rec.caption == StubCaptionProvider("q").caption(lq, img).caption);
}

TEST_CASE("conditioning: external command adapter") {
  const fs::path dir = scratch("external");
  const fs::path script = dir / "captioner.sh";
  std::ofstream(script) << "#!/bin/sh\np=\"$1\"\nprintf 'harbor at dusk (%s)' \"$MRIR_INSTRUCTION\" > \"${p%.png}.caption.txt\"\n";
  fs::permissions(script, fs::perms::owner_all);
  ExternalCaptionProvider provider(script.string(), "say it");
  const auto rec = provider.caption(Tensor({3, 8, 8}), (dir / "boat.png").string());
  CHECK(rec.caption == "harbor at dusk (say it)");
  CHECK(rec.source == CaptionSource::external);
}

TEST_CASE("conditioning: provider factory") {
  ConditioningConfig c;
  c.provider = "nope";
  CHECK_THROWS_AS(make_caption_provider(c), ConfigError);
  c.provider = "stub";
  CHECK(make_caption_provider(c) != nullptr);
}

TEST_CASE("conditioning: tokenizer") {
  StubTextEncoder enc(512, 8, 75, 3);
  CHECK(enc.tokenize("A field, of wheat!").size() == 6);
  CHECK(enc.tokenize("Wheat") == enc.tokenize("wheat"));
  CHECK(enc.tokenize("").empty());
  CHECK(enc.tokenize("   ").empty());
  for (int id : enc.tokenize("sharp focus; high quality")) {
    CHECK(id >= 3);
    CHECK(id < 512);
  }
}

TEST_CASE("conditioning: chunking examples") {
  StubTextEncoder enc(512, 8, 75, 3);
  const auto e75 = encode_long_prompt(words(75), enc);
  CHECK(e75.chunk_count == 1);
  CHECK(e75.tokens == enc.encode_window(enc.tokenize(words(75))));
  const auto e150 = encode_long_prompt(words(150), enc);
  CHECK(e150.chunk_count == 2);
  CHECK(e150.tokens.shape() == Shape{2 * 77, 8});
  const auto e76 = encode_long_prompt(words(76), enc);
  CHECK(e76.chunk_count == 2);
  const Tensor prefix = enc.encode_window(enc.tokenize(words(75)));
  for (int r = 0; r < 77; ++r)
    for (int c = 0; c < 8; ++c) CHECK(e76.tokens.at(r, c) == prefix.at(r, c));
  const auto empty = encode_long_prompt("", enc);
  CHECK(empty.chunk_count == 1);
  CHECK(empty.tokens.shape() == Shape{77, 8});
  CHECK_THROWS_AS(enc.encode_window(std::vector<int>(76, 5)), ArgumentError);
}

TEST_CASE("conditioning: chunks are independent of each other") {
  StubTextEncoder enc(512, 8, 75, 3);
  gen::for_all(10, 5, [&](Rng& rng) {
    const int n = static_cast<int>(rng.uniform_int(76, 220));
    std::string base, mutated;
    for (int i = 0; i < n; ++i) {
      const std::string w = "t" + std::to_string(rng.uniform_int(0, 40));
      base += w + " ";
      mutated += (i >= 75 ? "z" + std::to_string(rng.uniform_int(0, 40)) : w) + " ";
    }
    const auto a = encode_long_prompt(base, enc), b = encode_long_prompt(mutated, enc);
    CHECK(a.chunk_count == b.chunk_count);
    for (int r = 0; r < 77; ++r)
      for (int c = 0; c < 8; ++c) CHECK(a.tokens.at(r, c) == b.tokens.at(r, c));
  });
}

TEST_CASE("conditioning: chunk-count law on a generated corpus") {
  StubTextEncoder enc(512, 8, 75, 9);
  gen::for_all(100, 6, [&](Rng& rng) {
    std::string caption;
    const int n = static_cast<int>(rng.uniform_int(0, 400));
    for (int i = 0; i < n; ++i) caption += rng.uniform() < 0.1 ? std::string(",") : " word" + std::to_string(i % 13);
    const int tokens = static_cast<int>(enc.tokenize(caption).size());
    const auto e = encode_long_prompt(caption, enc);
    CHECK(e.chunk_count == std::max(1, (tokens + 74) / 75));
    CHECK(e.tokens.shape()[0] == e.chunk_count * 77);
    CHECK(e.tokens.all_finite());
  });
}

TEST_CASE("conditioning: stub image encoder") {
  StubImageEncoder enc(4, 16, 2);
  Rng rng(3);
  const Tensor img = gen::quantized_image(rng, 24, 40);
  const auto a = enc.encode(img), b = enc.encode(img);
  CHECK(a.tokens.shape() == Shape{17, 16});
  CHECK(a.tokens == b.tokens);
  CHECK_FALSE(a.refined);
  CHECK(a.tokens.all_finite());
}

TEST_CASE("conditioning: refine layer zero input with zero biases gives zero") {
  nn::ParameterStore store(1);
  RefineLayer layer(store, "refine_layer", 6, 0, 5, "mlp3", 0.01);
  for (const auto& [path, var] : store.entries()) {
    if (path.find("fc") != std::string::npos && path.ends_with(".bias")) {
      ag::Var v = var;
      v.mutable_value().fill(0.0);
    }
  }
  const Tensor out = layer.forward(ag::constant(Tensor({3, 6}))).value();
  CHECK(out.shape() == Shape{3, 5});
  for (double v : out.storage()) CHECK(v == 0.0);
}

TEST_CASE("conditioning: refine layer with identity weights on (1, -1, 1, -1)") {
  nn::ParameterStore store(1);
  RefineLayer layer(store, "r", 4, 4, 4, "mlp3", 0.01);
  for (const auto& [path, var] : store.entries()) {
    ag::Var v = var;
    Tensor& t = v.mutable_value();
    if (path.find(".fc") != std::string::npos && path.ends_with(".weight")) {
      t.fill(0.0);
      for (int i = 0; i < 4; ++i) t.at(i, i) = 1.0;
    } else if (path.find(".fc") != std::string::npos) {
      t.fill(0.0);
    }
  }
  const Tensor out = layer.forward(ag::constant(Tensor({1, 4}, {1, -1, 1, -1}))).value();
  // step by step: LN(1,-1,1,-1) = x / sqrt(1 + eps); leaky; LN again; leaky; identity
  const double s1 = 1.0 / std::sqrt(1.0 + 1e-5);
  std::vector<double> h{s1, -0.01 * s1, s1, -0.01 * s1};
  double mean = (h[0] + h[1] + h[2] + h[3]) / 4, var = 0;
  for (double e : h) var += (e - mean) * (e - mean) / 4;
  for (double& e : h) {
    e = (e - mean) / std::sqrt(var + 1e-5);
    e = e > 0 ? e : 0.01 * e;
  }
  for (int i = 0; i < 4; ++i) CHECK(out.at(0, i) == doctest::Approx(h[i]).epsilon(1e-12));
}

TEST_CASE("conditioning: refine layer matches a plain-loop oracle on random weights") {
  nn::ParameterStore store(7);
  RefineLayer layer(store, "r", 16, 12, 8, "mlp3", 0.01);
  Rng rng(8);
  const Tensor x = rng.normal_tensor({5, 16});
  const Tensor out = layer.forward(ag::constant(x)).value();
  for (int r = 0; r < 5; ++r) {
    const auto ref = refine_oracle(layer, std::vector<double>(x.data() + r * 16, x.data() + (r + 1) * 16));
    for (int c = 0; c < 8; ++c) CHECK(std::fabs(out.at(r, c) - ref[c]) <= 1e-12);
  }
}

TEST_CASE("conditioning: refine layer gradients of sum(output)") {
  nn::ParameterStore store(2);
  RefineLayer layer(store, "r", 6, 0, 5, "mlp3", 0.01);
  Rng rng(4);
  const Tensor x = rng.normal_tensor({4, 6});
  std::vector<oracle::GradTarget> targets;
  for (const auto& [path, var] : store.entries()) targets.push_back({path, var});
  const auto g = oracle::gradcheck([&] { return ag::sum(layer.forward(ag::constant(x))); }, targets, 1000, 1);
  CHECK(g.rel_error <= 1e-4);
  CHECK(g.analytic_norm > 0);
}

TEST_CASE("conditioning: refine layer shape errors and single-linear mode") {
  nn::ParameterStore store(2);
  RefineLayer layer(store, "r", 6, 0, 5, "mlp3", 0.01);
  CHECK_THROWS_AS(layer.forward(ag::constant(Tensor({4, 7}))), ArgumentError);
  ImageEmbedding ok{Tensor({3, 6}), false};
  const auto refined = refine_image_embedding(ok, layer);
  CHECK(refined.refined);
  CHECK(refined.tokens.shape() == Shape{3, 5});
  CHECK_THROWS_AS(refine_image_embedding(refined, layer), ArgumentError);
  nn::ParameterStore s2(2);
  RefineLayer lin(s2, "l", 6, 0, 5, "linear", 0.01);
  CHECK(lin.single_linear());
  CHECK(s2.size() == 2);
}

TEST_CASE("conditioning: refine layer output shape over random sizes") {
  gen::for_all(10, 12, [](Rng& rng) {
    const int d_img = gen::pick(rng, {3, 8, 16}), d_cross = gen::pick(rng, {4, 16}), m = gen::pick(rng, {1, 5, 17});
    nn::ParameterStore store(rng.next_u64());
    RefineLayer layer(store, "r", d_img, 0, d_cross, "mlp3", 0.01);
    const Tensor out = layer.forward(ag::constant(rng.normal_tensor({m, d_img}))).value();
    CHECK(out.shape() == Shape{m, d_cross});
    CHECK(out.all_finite());
  });
}

TEST_CASE("conditioning: null conditioning") {
  const Config cfg = Config::micro();
  StubTextEncoder enc(cfg.conditioning.vocab, cfg.conditioning.d_txt, cfg.conditioning.window, cfg.conditioning.seed);
  const auto [t1, i1] = make_null_conditioning(cfg, enc);
  const auto [t2, i2] = make_null_conditioning(cfg, enc);
  CHECK(t1.chunk_count == 1);
  CHECK(i1.refined);
  CHECK(i1.tokens.shape() == Shape{cfg.conditioning.image_tokens(), cfg.unet.d_cross});
  for (double v : i1.tokens.storage()) CHECK(v == 0.0);
  CHECK(t1.tokens == t2.tokens);
  CHECK(i1.tokens == i2.tokens);
}

TEST_CASE("conditioning: conditioner switches") {
  Config cfg = Config::micro();
  Rng rng(5);
  const Tensor lq = gen::quantized_image(rng, 16, 16);
  const auto plain = Conditioner(cfg).bundle(lq);
  CHECK(plain.text.tokens == Conditioner(cfg).bundle(lq).text.tokens);
  CHECK_FALSE(plain.image.refined);
  cfg.conditioning.null_prompt = true;
  const auto no_text = Conditioner(cfg).bundle(lq);
  CHECK(no_text.text.tokens == no_text.text_null.tokens);
  cfg.conditioning.null_image = true;
  const auto none = Conditioner(cfg).bundle(lq);
  CHECK(none.image.refined);
  CHECK(none.image.tokens == none.image_null.tokens);
}
