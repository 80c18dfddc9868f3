#include "mrir/conditioning.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mrir/image.hpp"

namespace mrir::conditioning {

namespace fs = std::filesystem;

std::string to_string(CaptionSource source) {
  switch (source) {
    case CaptionSource::sidecar_file: return "sidecar_file";
    case CaptionSource::stub: return "stub";
    case CaptionSource::external: return "external";
  }
  return "stub";
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

}  // namespace

std::string sidecar_path(const std::string& image_path) {
  fs::path p(image_path);
  return (p.parent_path() / (p.stem().string() + ".caption.txt")).string();
}

PromptRecord StubCaptionProvider::caption(const Tensor& lq, const std::string&) const {
  static const std::array<const char*, 8> kMood{"quiet", "sunlit", "weathered", "vivid",
                                                "misty", "crisp", "warm", "overcast"};
  static const std::array<const char*, 8> kSubject{"stone building", "field of ripe wheat", "harbor with boats",
                                                   "forest path", "city street", "mountain lake",
                                                   "market stall", "garden of flowers"};
  static const std::array<const char*, 8> kSetting{"under a clear blue sky", "at dusk", "in soft morning light",
                                                   "after rain", "in late autumn", "at midday",
                                                   "beneath scattered clouds", "in winter"};
  static const std::array<const char*, 8> kDetail{"fine textures on every surface", "sharp edges and clean lines",
                                                  "rich natural colors", "detailed foreground foliage",
                                                  "intricate patterns in the background", "gentle shadows",
                                                  "clear reflections", "subtle gradients of light"};
  const auto bytes = image::to_bytes8(lq);
  const std::uint64_t h = fnv1a(bytes);
  std::string text = std::string("a ") + kMood[h & 7] + " photograph of a " + kSubject[(h >> 3) & 7] + " " +
                     kSetting[(h >> 6) & 7] + ", " + kDetail[(h >> 9) & 7] + ", high quality, sharp focus";
  return {text, CaptionSource::stub, instruction_};
}

PromptRecord SidecarCaptionProvider::caption(const Tensor&, const std::string& image_path) const {
  if (image_path.empty()) throw ProvenanceError("sidecar caption requested for an image without a path");
  const std::string path = sidecar_path(image_path);
  if (!fs::exists(path)) throw ProvenanceError("sidecar caption file missing: " + path);
  return {trim(read_text(path)), CaptionSource::sidecar_file, instruction_};
}

PromptRecord ExternalCaptionProvider::caption(const Tensor&, const std::string& image_path) const {
  if (image_path.empty()) throw ProvenanceError("external captioner needs an image path");
  std::lock_guard<std::mutex> lock(mutex_);
  const std::string out_path = sidecar_path(image_path);
  ::setenv("MRIR_INSTRUCTION", instruction_.c_str(), 1);
  const std::string cmd = command_ + " " + shell_quote(image_path);
  const int status = std::system(cmd.c_str());
  if (status != 0) throw ProvenanceError("external captioner failed (status " + std::to_string(status) + "): " + cmd);
  if (!fs::exists(out_path)) throw ProvenanceError("external captioner did not write " + out_path);
  return {trim(read_text(out_path)), CaptionSource::external, instruction_};
}

std::unique_ptr<CaptionProvider> make_caption_provider(const ConditioningConfig& cfg) {
  if (cfg.provider == "stub") return std::make_unique<StubCaptionProvider>(cfg.instruction);
  if (cfg.provider == "sidecar") return std::make_unique<SidecarCaptionProvider>(cfg.instruction);
  if (cfg.provider == "external") return std::make_unique<ExternalCaptionProvider>(cfg.external_command, cfg.instruction);
  throw ConfigError("conditioning.provider: unknown provider '" + cfg.provider + "'");
}

PromptRecord get_caption(const Tensor& lq, const std::string& image_path, const CaptionProvider& provider,
                         const std::string& instruction) {
  PromptRecord rec = provider.caption(lq, image_path);
  rec.caption = trim(rec.caption);
  if (rec.caption.empty()) rec = StubCaptionProvider(instruction).caption(lq, image_path);
  return rec;
}

// ---- text -----------------------------------------------------------------

StubTextEncoder::StubTextEncoder(int vocab, int dim, int window, std::uint64_t seed)
    : vocab_(vocab), dim_(dim), window_(window) {
  if (vocab < 8 || dim < 1 || window < 1) throw ArgumentError("StubTextEncoder: invalid sizes");
  Rng rng(mix_seed(seed, 0x7e47));
  token_table_ = rng.normal_tensor({vocab, dim});
  position_table_ = rng.uniform_tensor({window + 2, dim}, -0.5, 0.5);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  mix_self_ = rng.uniform_tensor({dim, dim}, -bound, bound);
  mix_context_ = rng.uniform_tensor({dim, dim}, -bound, bound);
}

std::vector<int> StubTextEncoder::tokenize(const std::string& text) const {
  std::vector<int> ids;
  auto emit = [&](const std::string& word) {
    ids.push_back(3 + static_cast<int>(fnv1a(word) % static_cast<std::uint64_t>(vocab_ - 3)));
  };
  std::string word;
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch == '\'' || ch >= 0x80) {
      word += static_cast<char>(std::tolower(ch));
      continue;
    }
    if (!word.empty()) {
      emit(word);
      word.clear();
    }
    if (std::ispunct(ch)) emit(std::string(1, static_cast<char>(ch)));
  }
  if (!word.empty()) emit(word);
  return ids;
}

Tensor StubTextEncoder::encode_window(const std::vector<int>& ids) const {
  if (static_cast<int>(ids.size()) > window_) {
    throw ArgumentError("encode_window: " + std::to_string(ids.size()) + " ids exceed the window of " +
                        std::to_string(window_));
  }
  const int len = window_ + 2;
  std::vector<int> seq;
  seq.reserve(len);
  seq.push_back(kBegin);
  seq.insert(seq.end(), ids.begin(), ids.end());
  seq.push_back(kEnd);
  while (static_cast<int>(seq.size()) < len) seq.push_back(kPad);

  Tensor out({len, dim_});
  std::vector<double> e(dim_), running(dim_, 0.0);
  for (int j = 0; j < len; ++j) {
    if (seq[j] < 0 || seq[j] >= vocab_) throw ArgumentError("encode_window: token id out of range");
    for (int k = 0; k < dim_; ++k) {
      e[k] = token_table_.at(seq[j], k) + position_table_.at(j, k);
      running[k] += e[k];
    }
    for (int o = 0; o < dim_; ++o) {
      double acc = 0.0;
      for (int k = 0; k < dim_; ++k) acc += mix_self_.at(o, k) * e[k] + mix_context_.at(o, k) * running[k] / (j + 1);
      out.at(j, o) = std::tanh(acc);
    }
  }
  return out;
}

TextEmbedding encode_long_prompt(const std::string& caption, const TextEncoder& encoder) {
  const auto ids = encoder.tokenize(caption);
  const int window = encoder.window();
  const int chunks = std::max<int>(1, (static_cast<int>(ids.size()) + window - 1) / window);
  const int per = window + 2;
  TextEmbedding emb{Tensor({chunks * per, encoder.dim()}), chunks, window};
  for (int c = 0; c < chunks; ++c) {
    const auto begin = ids.begin() + std::min<std::size_t>(ids.size(), static_cast<std::size_t>(c) * window);
    const auto end = ids.begin() + std::min<std::size_t>(ids.size(), static_cast<std::size_t>(c + 1) * window);
    const Tensor part = encoder.encode_window(std::vector<int>(begin, end));
    std::copy(part.storage().begin(), part.storage().end(),
              emb.tokens.storage().begin() + static_cast<std::ptrdiff_t>(c) * per * encoder.dim());
  }
  return emb;
}

// ---- image ----------------------------------------------------------------

StubImageEncoder::StubImageEncoder(int grid, int dim, std::uint64_t seed) : grid_(grid), dim_(dim) {
  if (grid < 1 || dim < 1) throw ArgumentError("StubImageEncoder: invalid sizes");
  Rng rng(mix_seed(seed, 0x1a6e));
  const int in = 3 * kPatch * kPatch;
  patch_proj_ = rng.uniform_tensor({dim, in}, -2.0 / std::sqrt(in), 2.0 / std::sqrt(in));
  patch_pos_ = rng.uniform_tensor({grid * grid, dim}, -0.1, 0.1);
  global_proj_ = rng.uniform_tensor({dim, dim}, -1.0 / std::sqrt(dim), 1.0 / std::sqrt(dim));
}

ImageEmbedding StubImageEncoder::encode(const Tensor& img) const {
  image::require_image(img, "image encoder");
  if (img.shape()[0] != 3) throw ArgumentError("image encoder: expected an RGB image");
  const int side = grid_ * kPatch;
  const Tensor small = image::area_resize(img, side, side);
  const int n = grid_ * grid_;
  ImageEmbedding emb{Tensor({n + 1, dim_}), false};
  std::vector<double> patch(3 * kPatch * kPatch);
  std::vector<double> pooled(dim_, 0.0);
  for (int gy = 0; gy < grid_; ++gy) {
    for (int gx = 0; gx < grid_; ++gx) {
      int k = 0;
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < kPatch; ++y) {
          for (int x = 0; x < kPatch; ++x) patch[k++] = small.at(c, gy * kPatch + y, gx * kPatch + x) - 0.5;
        }
      }
      const int t = gy * grid_ + gx;
      for (int o = 0; o < dim_; ++o) {
        double acc = patch_pos_.at(t, o);
        for (std::size_t i = 0; i < patch.size(); ++i) acc += patch_proj_.at(o, static_cast<int>(i)) * patch[i];
        emb.tokens.at(t, o) = acc;
        pooled[o] += acc / n;
      }
    }
  }
  for (int o = 0; o < dim_; ++o) {
    double acc = 0.0;
    for (int k = 0; k < dim_; ++k) acc += global_proj_.at(o, k) * pooled[k];
    emb.tokens.at(n, o) = acc;
  }
  return emb;
}

// ---- refine layer -----------------------------------------------------------

RefineLayer::RefineLayer(nn::ParameterStore& store, const std::string& path, int d_img, int d_hidden, int d_cross,
                         const std::string& mode, double leaky_slope)
    : d_img_(d_img), d_cross_(d_cross), single_(mode == "linear"), slope_(leaky_slope) {
  if (single_) {
    fc_[0] = nn::Linear::create(store, path + ".fc0", d_img, d_cross);
    return;
  }
  const int hidden = d_hidden > 0 ? d_hidden : d_cross;
  fc_[0] = nn::Linear::create(store, path + ".fc0", d_img, hidden);
  norm_[0] = nn::LayerNorm::create(store, path + ".norm0", hidden);
  fc_[1] = nn::Linear::create(store, path + ".fc1", hidden, hidden);
  norm_[1] = nn::LayerNorm::create(store, path + ".norm1", hidden);
  fc_[2] = nn::Linear::create(store, path + ".fc2", hidden, d_cross);
}

ag::Var RefineLayer::forward(const ag::Var& raw_tokens) const {
  if (raw_tokens.value().rank() != 2 || raw_tokens.shape()[1] != d_img_) {
    throw ArgumentError("refine layer: expected [M, " + std::to_string(d_img_) + "] tokens, got " +
                        shape_str(raw_tokens.shape()));
  }
  if (single_) return fc_[0](raw_tokens);
  ag::Var h = ag::leaky_relu(norm_[0](fc_[0](raw_tokens)), slope_);
  h = ag::leaky_relu(norm_[1](fc_[1](h)), slope_);
  return fc_[2](h);
}

ImageEmbedding refine_image_embedding(const ImageEmbedding& raw, const RefineLayer& layer) {
  if (raw.refined) throw ArgumentError("refine_image_embedding: embedding is already refined");
  ag::NoGradGuard guard;
  return {layer.forward(ag::constant(raw.tokens)).value(), true};
}

std::pair<TextEmbedding, ImageEmbedding> make_null_conditioning(const Config& cfg, const TextEncoder& encoder) {
  return {encode_long_prompt("", encoder), ImageEmbedding{Tensor({cfg.conditioning.image_tokens(), cfg.unet.d_cross}), true}};
}

Conditioner::Conditioner(const Config& cfg)
    : cfg_(cfg),
      provider_(make_caption_provider(cfg.conditioning)),
      text_encoder_(std::make_unique<StubTextEncoder>(cfg.conditioning.vocab, cfg.conditioning.d_txt,
                                                      cfg.conditioning.window, cfg.conditioning.seed)),
      image_encoder_(std::make_unique<StubImageEncoder>(cfg.conditioning.image_grid, cfg.conditioning.d_img,
                                                        cfg.conditioning.seed)) {
  std::tie(text_null_, image_null_) = make_null_conditioning(cfg_, *text_encoder_);
}

PromptRecord Conditioner::caption(const Tensor& lq, const std::string& image_path) const {
  return get_caption(lq, image_path, *provider_, cfg_.conditioning.instruction);
}

ConditioningBundle Conditioner::bundle_from_caption(const Tensor& lq, const std::string& caption) const {
  ConditioningBundle b;
  b.text = cfg_.conditioning.null_prompt ? text_null_ : encode_long_prompt(caption, *text_encoder_);
  b.image = cfg_.conditioning.null_image ? image_null_ : image_encoder_->encode(lq);
  b.text_null = text_null_;
  b.image_null = image_null_;
  return b;
}

ConditioningBundle Conditioner::bundle(const Tensor& lq, const std::string& image_path) const {
  if (cfg_.conditioning.null_prompt) return bundle_from_caption(lq, "");
  return bundle_from_caption(lq, caption(lq, image_path).caption);
}

}  // namespace mrir::conditioning
