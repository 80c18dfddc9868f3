#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrir/errors.hpp"

namespace mrir {

enum class ResizeMode { nearest, bilinear, area };

std::string to_string(ResizeMode mode);
ResizeMode resize_mode_from_string(const std::string& name);

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
};

// Sampling ranges for one degradation order.
struct OrderRanges {
  std::vector<int> kernel_sizes;
  RealRange blur_sigma;
  RealRange resize_scale;
  std::vector<ResizeMode> resize_modes;
  RealRange noise_sigma;
  double gray_noise_prob = 0.4;
  IntRange jpeg_quality;
};

struct DegradeConfig {
  OrderRanges order1;
  OrderRanges order2;
  int final_scale = 4;

  static DegradeConfig defaults();
};

struct CodecConfig {
  std::string kind = "s2d";
  int factor = 8;
};

struct RefineConfig {
  std::string mode = "mlp3";  // "mlp3" or "linear"
  int d_hidden = 0;            // 0 -> d_cross
  double leaky_slope = 0.01;
};

struct ConditioningConfig {
  std::string provider = "stub";  // sidecar | stub | external
  std::string instruction =
      "Describe the image in a very detailed manner if we remove the degradation artifacts from the image.";
  std::string external_command;
  std::uint64_t seed = 1234;
  int vocab = 4096;
  int window = 75;
  int d_txt = 64;
  int d_img = 64;
  int image_grid = 4;  // grid x grid patch tokens plus one global token
  bool null_prompt = false;
  bool null_image = false;
  RefineConfig refine;

  int image_tokens() const { return image_grid * image_grid + 1; }
};

struct ProcessorConfig {
  std::vector<int> channels{32, 64, 128};
  int feature_channels = 128;
};

struct ControlConfig {
  bool additive_skips = false;
  bool text_conditioned = false;
};

struct UNetConfig {
  std::vector<int> widths{32, 64, 128, 128};
  int res_blocks = 1;
  int heads = 4;
  int norm_groups = 8;
  int d_cross = 64;
  std::vector<std::string> sublayer_order{"self", "image", "text", "pixel"};
  bool image_attention = true;
  bool pixel_attention = true;

  int scales() const { return static_cast<int>(widths.size()); }
};

struct TrainConfig {
  int steps = 1000;
  int batch = 32;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double null_prob = 0.1;
  std::string regime = "adapter";  // adapter | full
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 0;
  int timesteps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int log_every = 50;
};

struct SamplerConfig {
  int steps = 50;
  double cfg_scale = 5.5;
  bool lre = true;
  bool clip_x0 = true;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  std::uint64_t seed = 0;
  std::string restorer = "model";  // model | upsample
};

struct Config {
  DegradeConfig degrade = DegradeConfig::defaults();
  CodecConfig codec;
  ConditioningConfig conditioning;
  ProcessorConfig processor;
  ControlConfig control;
  UNetConfig unet;
  TrainConfig train;
  SamplerConfig sampler;
  EvalConfig eval;

  int latent_channels() const { return 3 * codec.factor * codec.factor; }

  // Throws ConfigError naming the first inconsistent key.
  void validate() const;

  // Small architecture used by tests and the toy runs: 64x64 images, 4 scales.
  static Config micro();
};

// Unknown keys are rejected; missing keys keep their defaults.
Config config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const Config& cfg);
Config load_config(const std::string& path);

DegradeConfig degrade_config_from_json(const nlohmann::json& doc);
nlohmann::json degrade_config_to_json(const DegradeConfig& cfg);
void validate_degrade_config(const DegradeConfig& cfg);

// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_fingerprint(const Config& cfg);

}  // namespace mrir
