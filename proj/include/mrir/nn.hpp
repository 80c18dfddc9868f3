#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrir/autograd.hpp"

namespace mrir::nn {

// Named parameter leaves. Paths are dot-separated ("unet.down.0.res.0.conv1.weight");
// iteration order is lexicographic, which makes checkpoints and optimizer state
// deterministic.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  ag::Var create(const std::string& path, Tensor value);
  // U(-bound, bound) with a stream derived from (init_seed, path).
  ag::Var create_uniform(const std::string& path, const Shape& shape, double bound);

  const ag::Var& get(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) > 0; }
  const std::map<std::string, ag::Var>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  // Marks leaves as trainable (requires_grad) or frozen.
  void set_trainable(const std::string& path, bool trainable);
  bool trainable(const std::string& path) const { return get(path).requires_grad(); }

  std::uint64_t init_seed() const { return init_seed_; }

 private:
  std::uint64_t init_seed_;
  std::map<std::string, ag::Var> params_;
};

struct Linear {
  ag::Var weight;  // [out, in]
  ag::Var bias;    // [out] or empty

  static Linear create(ParameterStore& store, const std::string& path, int in, int out, bool with_bias = true,
                       bool zero_init = false);
  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  int in_features() const { return weight.shape()[1]; }
  int out_features() const { return weight.shape()[0]; }
};

struct Conv2d {
  ag::Var weight;  // [out, in, k, k]
  ag::Var bias;    // [out]
  int stride = 1;
  int pad = 0;

  // Same-padding (k / 2) convolution.
  static Conv2d create(ParameterStore& store, const std::string& path, int in, int out, int kernel, int stride = 1,
                       bool zero_init = false);
  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
  int out_channels() const { return weight.shape()[0]; }
};

struct LayerNorm {
  ag::Var gamma, beta;
  static LayerNorm create(ParameterStore& store, const std::string& path, int width);
  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct GroupNorm {
  ag::Var gamma, beta;
  int groups = 1;
  static GroupNorm create(ParameterStore& store, const std::string& path, int channels, int groups);
  ag::Var operator()(const ag::Var& x) const { return ag::group_norm(x, groups, gamma, beta); }
};

// GroupNorm -> SiLU -> conv3x3 -> + time projection -> GroupNorm -> SiLU -> conv3x3,
// plus a 1x1 skip when the width changes.
struct ResBlock {
  GroupNorm norm1;
  Conv2d conv1;
  Linear time_proj;
  GroupNorm norm2;
  Conv2d conv2;
  std::optional<Conv2d> skip;

  static ResBlock create(ParameterStore& store, const std::string& path, int in, int out, int time_dim, int groups);
  // `time_act` is SiLU(time embedding), shape [1, time_dim].
  ag::Var operator()(const ag::Var& x, const ag::Var& time_act) const;
};

}  // namespace mrir::nn
