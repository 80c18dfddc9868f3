#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "mrir/config.hpp"
#include "mrir/nn.hpp"
#include "mrir/tensor.hpp"

namespace mrir::conditioning {

enum class CaptionSource { sidecar_file, stub, external };

std::string to_string(CaptionSource source);

struct PromptRecord {
  std::string caption;
  CaptionSource source = CaptionSource::stub;
  std::string instruction;
};

struct TextEmbedding {
  Tensor tokens;  // [chunk_count * (window + 2), d_txt]
  int chunk_count = 1;
  int window = 75;
};

struct ImageEmbedding {
  Tensor tokens;  // [M, d]
  bool refined = false;
};

// Text and image conditioning for the denoiser plus the null pair used by
// classifier-free guidance. `image` may still be raw; the model refines it.
struct ConditioningBundle {
  TextEmbedding text;
  ImageEmbedding image;
  TextEmbedding text_null;
  ImageEmbedding image_null;
};

// ---- captions -------------------------------------------------------------

// `<dir>/<stem>.caption.txt` for an image path.
std::string sidecar_path(const std::string& image_path);

class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  // `image_path` may be empty for in-memory images.
  virtual PromptRecord caption(const Tensor& lq, const std::string& image_path) const = 0;
};

// Fixed template filled from a hash of the 8-bit image bytes.
class StubCaptionProvider final : public CaptionProvider {
 public:
  explicit StubCaptionProvider(std::string instruction) : instruction_(std::move(instruction)) {}
  PromptRecord caption(const Tensor& lq, const std::string& image_path) const override;

 private:
  std::string instruction_;
};

class SidecarCaptionProvider final : public CaptionProvider {
 public:
  explicit SidecarCaptionProvider(std::string instruction) : instruction_(std::move(instruction)) {}
  // Throws ProvenanceError when the sidecar file is missing.
  PromptRecord caption(const Tensor& lq, const std::string& image_path) const override;

 private:
  std::string instruction_;
};

// Runs `<command> <image path>` with MRIR_INSTRUCTION in the environment; the command
// must write the sidecar caption file. Calls are serialized.
class ExternalCaptionProvider final : public CaptionProvider {
 public:
  ExternalCaptionProvider(std::string command, std::string instruction)
      : command_(std::move(command)), instruction_(std::move(instruction)) {}
  PromptRecord caption(const Tensor& lq, const std::string& image_path) const override;

 private:
  std::string command_;
  std::string instruction_;
  mutable std::mutex mutex_;
};

std::unique_ptr<CaptionProvider> make_caption_provider(const ConditioningConfig& cfg);

// Delegates to the provider; an empty (after trimming) caption is replaced by the
// stub caption so the result is never empty. Provenance errors propagate.
PromptRecord get_caption(const Tensor& lq, const std::string& image_path, const CaptionProvider& provider,
                         const std::string& instruction);

// ---- text -----------------------------------------------------------------

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::vector<int> tokenize(const std::string& text) const = 0;
  // Encodes at most window() content ids framed by begin/end markers and padded to
  // window() + 2 positions; returns [window() + 2, dim()].
  virtual Tensor encode_window(const std::vector<int>& ids) const = 0;
  virtual int window() const = 0;
  virtual int dim() const = 0;
};

// Seeded stand-in for a contextual text encoder: token + position embeddings mixed
// causally, h_j = tanh(A e_j + B mean_{k<=j} e_k).
class StubTextEncoder final : public TextEncoder {
 public:
  static constexpr int kBegin = 0;
  static constexpr int kEnd = 1;
  static constexpr int kPad = 2;

  StubTextEncoder(int vocab, int dim, int window, std::uint64_t seed);

  // Lower-cased alphanumeric words and single punctuation marks, each hashed to an id
  // in [3, vocab).
  std::vector<int> tokenize(const std::string& text) const override;
  Tensor encode_window(const std::vector<int>& ids) const override;
  int window() const override { return window_; }
  int dim() const override { return dim_; }

 private:
  int vocab_, dim_, window_;
  Tensor token_table_;  // [vocab, dim]
  Tensor position_table_;  // [window + 2, dim]
  Tensor mix_self_;        // [dim, dim]
  Tensor mix_context_;     // [dim, dim]
};

// Splits the ids into consecutive chunks of at most window() tokens, encodes each on
// its own and concatenates along the sequence axis. The empty caption yields one chunk.
TextEmbedding encode_long_prompt(const std::string& caption, const TextEncoder& encoder);

// ---- image ----------------------------------------------------------------

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual ImageEmbedding encode(const Tensor& img) const = 0;
  virtual int tokens() const = 0;
  virtual int dim() const = 0;
};

// grid x grid patch tokens plus one global token; each patch is area-pooled to 4x4,
// centered and mapped through a seeded linear projection.
class StubImageEncoder final : public ImageEncoder {
 public:
  StubImageEncoder(int grid, int dim, std::uint64_t seed);
  ImageEmbedding encode(const Tensor& img) const override;
  int tokens() const override { return grid_ * grid_ + 1; }
  int dim() const override { return dim_; }

 private:
  static constexpr int kPatch = 4;
  int grid_, dim_;
  Tensor patch_proj_;   // [dim, 3 * kPatch * kPatch]
  Tensor patch_pos_;    // [grid * grid, dim]
  Tensor global_proj_;  // [dim, dim]
};

// ---- refine layer -----------------------------------------------------------

// Per token: [linear -> LayerNorm -> LeakyReLU] x 2 -> linear (mode "mlp3"), or a
// single linear projection (mode "linear").
class RefineLayer {
 public:
  RefineLayer() = default;
  RefineLayer(nn::ParameterStore& store, const std::string& path, int d_img, int d_hidden, int d_cross,
              const std::string& mode, double leaky_slope);

  ag::Var forward(const ag::Var& raw_tokens) const;
  int input_dim() const { return d_img_; }
  int output_dim() const { return d_cross_; }

  const nn::Linear& fc(int i) const { return fc_[i]; }
  const nn::LayerNorm& norm(int i) const { return norm_[i]; }
  double leaky_slope() const { return slope_; }
  bool single_linear() const { return single_; }

 private:
  int d_img_ = 0, d_cross_ = 0;
  bool single_ = false;
  double slope_ = 0.01;
  nn::Linear fc_[3];
  nn::LayerNorm norm_[2];
};

// Throws ArgumentError if `raw` is already refined or has the wrong width.
ImageEmbedding refine_image_embedding(const ImageEmbedding& raw, const RefineLayer& layer);

std::pair<TextEmbedding, ImageEmbedding> make_null_conditioning(const Config& cfg, const TextEncoder& encoder);

// Owns the providers and encoders built from a config.
class Conditioner {
 public:
  explicit Conditioner(const Config& cfg);

  PromptRecord caption(const Tensor& lq, const std::string& image_path = "") const;
  // Caption, text embedding, raw image embedding and the null pair. Honors the
  // null_prompt / null_image switches.
  ConditioningBundle bundle(const Tensor& lq, const std::string& image_path = "") const;
  ConditioningBundle bundle_from_caption(const Tensor& lq, const std::string& caption) const;

  const TextEncoder& text_encoder() const { return *text_encoder_; }
  const ImageEncoder& image_encoder() const { return *image_encoder_; }

 private:
  Config cfg_;
  std::unique_ptr<CaptionProvider> provider_;
  std::unique_ptr<TextEncoder> text_encoder_;
  std::unique_ptr<ImageEncoder> image_encoder_;
  TextEmbedding text_null_;
  ImageEmbedding image_null_;
};

}  // namespace mrir::conditioning
