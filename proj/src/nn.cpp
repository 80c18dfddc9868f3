#include "mrir/nn.hpp"

#include <cmath>

namespace mrir::nn {

ag::Var ParameterStore::create(const std::string& path, Tensor value) {
  if (params_.count(path)) throw ArgumentError("duplicate parameter path " + path);
  auto var = ag::leaf(std::move(value), true);
  params_.emplace(path, var);
  return var;
}

ag::Var ParameterStore::create_uniform(const std::string& path, const Shape& shape, double bound) {
  Rng rng(mix_seed(init_seed_, fnv1a(path)));
  return create(path, rng.uniform_tensor(shape, -bound, bound));
}

const ag::Var& ParameterStore::get(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ArgumentError("unknown parameter path " + path);
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v.value().size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, v] : params_) {
    ag::Var copy = v;
    copy.zero_grad();
  }
}

void ParameterStore::set_trainable(const std::string& path, bool trainable) {
  ag::Var v = get(path);
  v.set_requires_grad(trainable);
}

Linear Linear::create(ParameterStore& store, const std::string& path, int in, int out, bool with_bias,
                      bool zero_init) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = zero_init ? store.create(path + ".weight", Tensor({out, in}))
                       : store.create_uniform(path + ".weight", {out, in}, bound);
  if (with_bias) {
    l.bias = zero_init ? store.create(path + ".bias", Tensor({out})) : store.create_uniform(path + ".bias", {out}, bound);
  }
  return l;
}

Conv2d Conv2d::create(ParameterStore& store, const std::string& path, int in, int out, int kernel, int stride,
                      bool zero_init) {
  Conv2d c;
  c.stride = stride;
  c.pad = kernel / 2;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  const Shape shape{out, in, kernel, kernel};
  c.weight = zero_init ? store.create(path + ".weight", Tensor(shape)) : store.create_uniform(path + ".weight", shape, bound);
  c.bias = zero_init ? store.create(path + ".bias", Tensor({out})) : store.create_uniform(path + ".bias", {out}, bound);
  return c;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& path, int width) {
  return {store.create(path + ".weight", Tensor({width}, 1.0)), store.create(path + ".bias", Tensor({width}, 0.0))};
}

GroupNorm GroupNorm::create(ParameterStore& store, const std::string& path, int channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError(path + ": " + std::to_string(groups) + " groups do not divide " + std::to_string(channels) +
                      " channels");
  }
  return {store.create(path + ".weight", Tensor({channels}, 1.0)), store.create(path + ".bias", Tensor({channels}, 0.0)),
          groups};
}

ResBlock ResBlock::create(ParameterStore& store, const std::string& path, int in, int out, int time_dim, int groups) {
  ResBlock b;
  b.norm1 = GroupNorm::create(store, path + ".norm1", in, groups);
  b.conv1 = Conv2d::create(store, path + ".conv1", in, out, 3);
  b.time_proj = Linear::create(store, path + ".time_proj", time_dim, out);
  b.norm2 = GroupNorm::create(store, path + ".norm2", out, groups);
  b.conv2 = Conv2d::create(store, path + ".conv2", out, out, 3);
  if (in != out) b.skip = Conv2d::create(store, path + ".skip", in, out, 1);
  return b;
}

ag::Var ResBlock::operator()(const ag::Var& x, const ag::Var& time_act) const {
  ag::Var h = conv1(ag::silu(norm1(x)));
  h = ag::add_channel_vector(h, time_proj(time_act));
  h = conv2(ag::silu(norm2(h)));
  return ag::add(h, skip ? (*skip)(x) : x);
}

}  // namespace mrir::nn
