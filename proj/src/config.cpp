#include "mrir/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "mrir/tensor.hpp"

namespace mrir {

using nlohmann::json;

std::string to_string(ResizeMode mode) {
  switch (mode) {
    case ResizeMode::nearest: return "nearest";
    case ResizeMode::bilinear: return "bilinear";
    case ResizeMode::area: return "area";
  }
  return "area";
}

ResizeMode resize_mode_from_string(const std::string& name) {
  if (name == "nearest") return ResizeMode::nearest;
  if (name == "bilinear") return ResizeMode::bilinear;
  if (name == "area") return ResizeMode::area;
  throw ConfigError("unknown resize mode '" + name + "'");
}

namespace {

// Reads keys from one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name(key) + ": wrong type");
    }
  }

  void get_range(const char* key, RealRange& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
      throw ConfigError(name(key) + ": expected [low, high]");
    }
    out = {(*it)[0].get<double>(), (*it)[1].get<double>()};
  }

  void get_range(const char* key, IntRange& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_integer() || !(*it)[1].is_number_integer()) {
      throw ConfigError(name(key) + ": expected integer [low, high]");
    }
    out = {(*it)[0].get<int>(), (*it)[1].get<int>()};
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(name(it.key()) + ": unknown key");
    }
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

OrderRanges order_from_json(const json& doc, const std::string& path, OrderRanges out) {
  Section s(doc, path);
  s.get("kernel_sizes", out.kernel_sizes);
  s.get_range("blur_sigma", out.blur_sigma);
  s.get_range("resize_scale", out.resize_scale);
  if (const json* modes = s.child("resize_modes")) {
    if (!modes->is_array()) throw ConfigError(s.name("resize_modes") + ": expected a list");
    out.resize_modes.clear();
    for (const auto& m : *modes) {
      if (!m.is_string()) throw ConfigError(s.name("resize_modes") + ": expected strings");
      try {
        out.resize_modes.push_back(resize_mode_from_string(m.get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError(s.name("resize_modes") + ": " + e.what());
      }
    }
  }
  s.get_range("noise_sigma", out.noise_sigma);
  s.get("gray_noise_prob", out.gray_noise_prob);
  s.get_range("jpeg_quality", out.jpeg_quality);
  s.finish();
  return out;
}

json order_to_json(const OrderRanges& o) {
  json modes = json::array();
  for (auto m : o.resize_modes) modes.push_back(to_string(m));
  return json{{"kernel_sizes", o.kernel_sizes},
              {"blur_sigma", {o.blur_sigma.lo, o.blur_sigma.hi}},
              {"resize_scale", {o.resize_scale.lo, o.resize_scale.hi}},
              {"resize_modes", modes},
              {"noise_sigma", {o.noise_sigma.lo, o.noise_sigma.hi}},
              {"gray_noise_prob", o.gray_noise_prob},
              {"jpeg_quality", {o.jpeg_quality.lo, o.jpeg_quality.hi}}};
}

void check_range(const RealRange& r, const std::string& key, double lo_bound, double hi_bound, bool open_lo = false) {
  if (!(r.lo <= r.hi)) throw ConfigError(key + ": low > high");
  const bool lo_ok = open_lo ? r.lo > lo_bound : r.lo >= lo_bound;
  if (!lo_ok || r.hi > hi_bound) {
    throw ConfigError(key + ": range outside permitted domain [" + std::to_string(lo_bound) + ", " +
                      std::to_string(hi_bound) + "]");
  }
}

void validate_order(const OrderRanges& o, const std::string& path) {
  if (o.kernel_sizes.empty()) throw ConfigError(path + ".kernel_sizes: empty");
  for (int k : o.kernel_sizes) {
    if (k < 1 || k % 2 == 0) throw ConfigError(path + ".kernel_sizes: " + std::to_string(k) + " is not odd");
  }
  check_range(o.blur_sigma, path + ".blur_sigma", 0.0, 1e3, true);
  check_range(o.resize_scale, path + ".resize_scale", 0.25, 1.5);
  if (o.resize_modes.empty()) throw ConfigError(path + ".resize_modes: empty");
  check_range(o.noise_sigma, path + ".noise_sigma", 0.0, 1.0);
  if (!(o.gray_noise_prob >= 0.0 && o.gray_noise_prob <= 1.0)) {
    throw ConfigError(path + ".gray_noise_prob: outside [0, 1]");
  }
  if (o.jpeg_quality.lo > o.jpeg_quality.hi) throw ConfigError(path + ".jpeg_quality: low > high");
  if (o.jpeg_quality.lo < 1 || o.jpeg_quality.hi > 100) throw ConfigError(path + ".jpeg_quality: outside [1, 100]");
}

}  // namespace

DegradeConfig DegradeConfig::defaults() {
  DegradeConfig d;
  const std::vector<int> kernels{7, 9, 11, 13, 15, 17, 19, 21};
  const std::vector<ResizeMode> modes{ResizeMode::nearest, ResizeMode::bilinear, ResizeMode::area};
  d.order1 = {kernels, {0.2, 3.0}, {0.25, 1.5}, modes, {1.0 / 255.0, 30.0 / 255.0}, 0.4, {30, 95}};
  d.order2 = {kernels, {0.2, 1.5}, {0.3, 1.2}, modes, {1.0 / 255.0, 25.0 / 255.0}, 0.4, {30, 95}};
  d.final_scale = 4;
  return d;
}

DegradeConfig degrade_config_from_json(const json& doc) {
  DegradeConfig out = DegradeConfig::defaults();
  Section s(doc, "degrade");
  if (const json* o1 = s.child("order1")) out.order1 = order_from_json(*o1, "degrade.order1", out.order1);
  if (const json* o2 = s.child("order2")) out.order2 = order_from_json(*o2, "degrade.order2", out.order2);
  s.get("final_scale", out.final_scale);
  s.finish();
  validate_degrade_config(out);
  return out;
}

json degrade_config_to_json(const DegradeConfig& cfg) {
  return json{{"order1", order_to_json(cfg.order1)},
              {"order2", order_to_json(cfg.order2)},
              {"final_scale", cfg.final_scale}};
}

void validate_degrade_config(const DegradeConfig& cfg) {
  validate_order(cfg.order1, "degrade.order1");
  validate_order(cfg.order2, "degrade.order2");
  if (cfg.final_scale < 1) throw ConfigError("degrade.final_scale: must be >= 1");
}

void Config::validate() const {
  validate_degrade_config(degrade);
  if (codec.kind != "s2d") throw ConfigError("codec.kind: only \"s2d\" is available");
  if (codec.factor < 1) throw ConfigError("codec.factor: must be >= 1");
  const auto& c = conditioning;
  if (c.provider != "sidecar" && c.provider != "stub" && c.provider != "external") {
    throw ConfigError("conditioning.provider: expected sidecar, stub or external");
  }
  if (c.provider == "external" && c.external_command.empty()) {
    throw ConfigError("conditioning.external_command: required for the external provider");
  }
  if (c.vocab < 8) throw ConfigError("conditioning.vocab: too small");
  if (c.window < 1) throw ConfigError("conditioning.window: must be >= 1");
  if (c.d_txt < 1 || c.d_img < 1) throw ConfigError("conditioning.d_txt/d_img: must be >= 1");
  if (c.image_grid < 1) throw ConfigError("conditioning.image_grid: must be >= 1");
  if (c.refine.mode != "mlp3" && c.refine.mode != "linear") {
    throw ConfigError("conditioning.refine.mode: expected mlp3 or linear");
  }
  if (c.refine.d_hidden < 0) throw ConfigError("conditioning.refine.d_hidden: negative");
  if (processor.channels.size() != 3) throw ConfigError("processor.channels: expected three widths");
  for (int w : processor.channels) {
    if (w < 1) throw ConfigError("processor.channels: widths must be positive");
  }
  if (processor.feature_channels < 1) throw ConfigError("processor.feature_channels: must be positive");
  if (codec.factor != 8) throw ConfigError("codec.factor: the processor's three stride-2 stages require 8");
  if (unet.widths.empty()) throw ConfigError("unet.widths: empty");
  for (int w : unet.widths) {
    if (w < 1 || w % unet.heads != 0) throw ConfigError("unet.widths: each width must be divisible by unet.heads");
    if (w % unet.norm_groups != 0) throw ConfigError("unet.widths: each width must be divisible by unet.norm_groups");
  }
  if (unet.res_blocks < 1) throw ConfigError("unet.res_blocks: must be >= 1");
  if (unet.d_cross < 1) throw ConfigError("unet.d_cross: must be >= 1");
  std::set<std::string> names;
  for (const auto& s : unet.sublayer_order) {
    if (s != "self" && s != "image" && s != "text" && s != "pixel") {
      throw ConfigError("unet.sublayer_order: unknown sublayer '" + s + "'");
    }
    if (!names.insert(s).second) throw ConfigError("unet.sublayer_order: duplicate '" + s + "'");
  }
  if (train.regime != "adapter" && train.regime != "full") throw ConfigError("train.regime: expected adapter or full");
  if (train.batch < 1) throw ConfigError("train.batch: must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr: must be positive");
  if (!(train.null_prob >= 0.0 && train.null_prob <= 1.0)) throw ConfigError("train.null_prob: outside [0, 1]");
  if (train.lambda1 < 0.0 || train.lambda2 < 0.0) throw ConfigError("train.lambda1/lambda2: negative");
  if (train.timesteps < 1) throw ConfigError("train.timesteps: must be >= 1");
  if (!(0.0 < train.beta_min && train.beta_min < train.beta_max && train.beta_max < 1.0)) {
    throw ConfigError("train.beta_min/beta_max: need 0 < beta_min < beta_max < 1");
  }
  if (sampler.steps < 1 || sampler.steps > train.timesteps) {
    throw ConfigError("sampler.steps: must lie in [1, train.timesteps]");
  }
  if (eval.restorer != "model" && eval.restorer != "upsample") {
    throw ConfigError("eval.restorer: expected model or upsample");
  }
}

Config Config::micro() {
  Config cfg;
  cfg.conditioning.d_txt = 16;
  cfg.conditioning.d_img = 16;
  cfg.conditioning.vocab = 512;
  cfg.processor.channels = {8, 16, 32};
  cfg.processor.feature_channels = 32;
  cfg.unet.widths = {16, 16, 32, 32};
  cfg.unet.heads = 2;
  cfg.unet.norm_groups = 4;
  cfg.unet.d_cross = 16;
  cfg.train.batch = 4;
  cfg.train.lr = 1e-3;
  return cfg;
}

Config config_from_json(const json& doc) {
  Config cfg;
  Section root(doc, "");
  if (const json* d = root.child("degrade")) cfg.degrade = degrade_config_from_json(*d);
  if (const json* d = root.child("codec")) {
    Section s(*d, "codec");
    s.get("kind", cfg.codec.kind);
    s.get("factor", cfg.codec.factor);
    s.finish();
  }
  if (const json* d = root.child("conditioning")) {
    Section s(*d, "conditioning");
    auto& c = cfg.conditioning;
    s.get("provider", c.provider);
    s.get("instruction", c.instruction);
    s.get("external_command", c.external_command);
    s.get("seed", c.seed);
    s.get("vocab", c.vocab);
    s.get("window", c.window);
    s.get("d_txt", c.d_txt);
    s.get("d_img", c.d_img);
    s.get("image_grid", c.image_grid);
    s.get("null_prompt", c.null_prompt);
    s.get("null_image", c.null_image);
    if (const json* r = s.child("refine")) {
      Section rs(*r, "conditioning.refine");
      rs.get("mode", c.refine.mode);
      rs.get("d_hidden", c.refine.d_hidden);
      rs.get("leaky_slope", c.refine.leaky_slope);
      rs.finish();
    }
    s.finish();
  }
  if (const json* d = root.child("processor")) {
    Section s(*d, "processor");
    s.get("channels", cfg.processor.channels);
    s.get("feature_channels", cfg.processor.feature_channels);
    s.finish();
  }
  if (const json* d = root.child("control")) {
    Section s(*d, "control");
    s.get("additive_skips", cfg.control.additive_skips);
    s.get("text_conditioned", cfg.control.text_conditioned);
    s.finish();
  }
  if (const json* d = root.child("unet")) {
    Section s(*d, "unet");
    auto& u = cfg.unet;
    s.get("widths", u.widths);
    s.get("res_blocks", u.res_blocks);
    s.get("heads", u.heads);
    s.get("norm_groups", u.norm_groups);
    s.get("d_cross", u.d_cross);
    s.get("sublayer_order", u.sublayer_order);
    s.get("image_attention", u.image_attention);
    s.get("pixel_attention", u.pixel_attention);
    s.finish();
  }
  if (const json* d = root.child("train")) {
    Section s(*d, "train");
    auto& t = cfg.train;
    s.get("steps", t.steps);
    s.get("batch", t.batch);
    s.get("lr", t.lr);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("adam_eps", t.adam_eps);
    s.get("lambda1", t.lambda1);
    s.get("lambda2", t.lambda2);
    s.get("null_prob", t.null_prob);
    s.get("regime", t.regime);
    s.get("seed", t.seed);
    s.get("init_seed", t.init_seed);
    s.get("timesteps", t.timesteps);
    s.get("beta_min", t.beta_min);
    s.get("beta_max", t.beta_max);
    s.get("log_every", t.log_every);
    s.finish();
  }
  if (const json* d = root.child("sampler")) {
    Section s(*d, "sampler");
    auto& sm = cfg.sampler;
    s.get("steps", sm.steps);
    s.get("cfg_scale", sm.cfg_scale);
    s.get("lre", sm.lre);
    s.get("clip_x0", sm.clip_x0);
    s.get("seed", sm.seed);
    s.finish();
  }
  if (const json* d = root.child("eval")) {
    Section s(*d, "eval");
    s.get("seed", cfg.eval.seed);
    s.get("restorer", cfg.eval.restorer);
    s.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

json config_to_json(const Config& cfg) {
  const auto& c = cfg.conditioning;
  const auto& u = cfg.unet;
  const auto& t = cfg.train;
  const auto& sm = cfg.sampler;
  return json{
      {"degrade", degrade_config_to_json(cfg.degrade)},
      {"codec", {{"kind", cfg.codec.kind}, {"factor", cfg.codec.factor}}},
      {"conditioning",
       {{"provider", c.provider},
        {"instruction", c.instruction},
        {"external_command", c.external_command},
        {"seed", c.seed},
        {"vocab", c.vocab},
        {"window", c.window},
        {"d_txt", c.d_txt},
        {"d_img", c.d_img},
        {"image_grid", c.image_grid},
        {"null_prompt", c.null_prompt},
        {"null_image", c.null_image},
        {"refine", {{"mode", c.refine.mode}, {"d_hidden", c.refine.d_hidden}, {"leaky_slope", c.refine.leaky_slope}}}}},
      {"processor", {{"channels", cfg.processor.channels}, {"feature_channels", cfg.processor.feature_channels}}},
      {"control",
       {{"additive_skips", cfg.control.additive_skips}, {"text_conditioned", cfg.control.text_conditioned}}},
      {"unet",
       {{"widths", u.widths},
        {"res_blocks", u.res_blocks},
        {"heads", u.heads},
        {"norm_groups", u.norm_groups},
        {"d_cross", u.d_cross},
        {"sublayer_order", u.sublayer_order},
        {"image_attention", u.image_attention},
        {"pixel_attention", u.pixel_attention}}},
      {"train",
       {{"steps", t.steps},
        {"batch", t.batch},
        {"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"lambda1", t.lambda1},
        {"lambda2", t.lambda2},
        {"null_prob", t.null_prob},
        {"regime", t.regime},
        {"seed", t.seed},
        {"init_seed", t.init_seed},
        {"timesteps", t.timesteps},
        {"beta_min", t.beta_min},
        {"beta_max", t.beta_max},
        {"log_every", t.log_every}}},
      {"sampler",
       {{"steps", sm.steps},
        {"cfg_scale", sm.cfg_scale},
        {"lre", sm.lre},
        {"clip_x0", sm.clip_x0},
        {"seed", sm.seed}}},
      {"eval", {{"seed", cfg.eval.seed}, {"restorer", cfg.eval.restorer}}},
  };
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(doc);
}

std::string config_fingerprint(const Config& cfg) {
  const std::uint64_t h = fnv1a(config_to_json(cfg).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mrir
