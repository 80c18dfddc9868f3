// mrir: synth | train | restore | eval | check
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrir/checkpoint.hpp"
#include "mrir/codec.hpp"
#include "mrir/conditioning.hpp"
#include "mrir/config.hpp"
#include "mrir/degrade.hpp"
#include "mrir/diffusion.hpp"
#include "mrir/eval.hpp"
#include "mrir/image.hpp"
#include "mrir/model.hpp"
#include "support/acceptance.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mrir::InputError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string self_path(const char* argv0) {
  std::error_code ec;
  const auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? std::string(argv0) : p.string();
}

bool parse_switch(const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw mrir::ArgumentError("expected on|off, got '" + v + "'");
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string hq_dir, out_dir, config;
  std::uint64_t seed = 0;
  int scale = 4;
};

int run_synth(const SynthArgs& a) {
  mrir::DegradeConfig dc = mrir::DegradeConfig::defaults();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw mrir::ConfigError("cannot open " + a.config);
    json doc;
    in >> doc;
    dc = mrir::degrade_config_from_json(doc.contains("degrade") ? doc["degrade"] : doc);
  }
  dc.final_scale = a.scale;
  mrir::validate_degrade_config(dc);
  const auto files = list_pngs(a.hq_dir);
  if (files.empty()) throw mrir::InputError("no PNG files in " + a.hq_dir);
  const fs::path out(a.out_dir);
  fs::create_directories(out / "hq");
  fs::create_directories(out / "lq");
  std::ofstream manifest(out / "manifest.jsonl");
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const std::uint64_t seed = mrir::mix_seed(a.seed, mrir::fnv1a(name));
    mrir::Tensor hq = mrir::image::read_png(f.string());
    const int s = a.scale;
    const int h = mrir::image::height(hq) / s * s, w = mrir::image::width(hq) / s * s;
    if (h != mrir::image::height(hq) || w != mrir::image::width(hq)) {
      mrir::Tensor cropped({3, h, w});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) cropped.at(c, y, x) = hq.at(c, y, x);
      hq = cropped;
    }
    const auto params = mrir::degrade::sample_degradation_params(dc, seed);
    const auto pair = mrir::degrade::synthesize_pair(hq, params);
    mrir::image::write_png((out / "hq" / name).string(), pair.hq);
    mrir::image::write_png((out / "lq" / name).string(), pair.lq);
    manifest << json{{"filename", name}, {"seed", seed}, {"params", mrir::degrade::params_to_json(params)}}.dump()
             << "\n";
    std::cout << name << " " << mrir::shape_str(pair.hq.shape()) << " -> " << mrir::shape_str(pair.lq.shape()) << "\n";
  }
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  int steps = -1;
};

int run_train(const TrainArgs& a) {
  mrir::Config cfg = a.config.empty() ? mrir::Config{} : mrir::load_config(a.config);
  if (a.steps >= 0) cfg.train.steps = a.steps;
  cfg.validate();
  std::ifstream manifest(a.data);
  if (!manifest) throw mrir::InputError("cannot open manifest " + a.data);
  const fs::path root = fs::path(a.data).parent_path();
  mrir::conditioning::Conditioner conditioner(cfg);
  std::vector<mrir::diffusion::TrainingItem> items;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json rec = json::parse(line);
    const std::string name = rec.at("filename").get<std::string>();
    const std::string lq_path = (root / "lq" / name).string();
    mrir::diffusion::TrainingItem item;
    item.hq = mrir::image::read_png((root / "hq" / name).string());
    item.lq = mrir::image::read_png(lq_path);
    item.cond = conditioner.bundle(item.lq, lq_path);
    items.push_back(std::move(item));
  }
  if (items.empty()) throw mrir::InputError("manifest lists no images: " + a.data);

  mrir::MrirModel model(cfg);
  model.apply_policy(mrir::FreezePolicy::from_regime(cfg.train.regime));
  auto codec = mrir::codec::make_codec(cfg.codec);
  const auto sched = mrir::diffusion::make_schedule(cfg.train.timesteps, cfg.train.beta_min, cfg.train.beta_max,
                                                    cfg.sampler.steps);
  mrir::diffusion::Adam opt(cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);
  mrir::Rng rng(cfg.train.seed);
  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  const int batch = std::min<int>(cfg.train.batch, static_cast<int>(items.size()));
  for (int step = 0; step < cfg.train.steps; ++step) {
    std::vector<mrir::diffusion::TrainingItem> b;
    for (int i = 0; i < batch; ++i) b.push_back(items[rng.uniform_int(0, static_cast<std::int64_t>(items.size()) - 1)]);
    const auto l = mrir::diffusion::train_step(model, *codec, b, sched, opt, rng);
    const json rec{{"step", step + 1}, {"total", l.total}, {"l_diff", l.l_diff}, {"l_rgb", l.l_rgb}, {"l_fft", l.l_fft}};
    log << rec.dump() << "\n";
    if ((step + 1) % std::max(1, cfg.train.log_every) == 0 || step + 1 == cfg.train.steps) std::cout << rec.dump() << "\n";
  }
  const std::string ckpt = (fs::path(a.out) / "final").string();
  mrir::checkpoint::save(ckpt, model);
  std::cout << "saved " << ckpt << "\n";
  return 0;
}

// ---- restore / eval -------------------------------------------------------------

struct SampleArgs {
  std::string ckpt;
  std::uint64_t seed = 0;
  double cfg_scale = -1;
  int steps = -1;
  std::string lre;
  int scale = -1;
};

mrir::diffusion::SampleOptions sample_options(const mrir::Config& cfg, const SampleArgs& a, int& steps, int& scale) {
  mrir::diffusion::SampleOptions o;
  o.cfg_scale = a.cfg_scale >= 0 ? a.cfg_scale : cfg.sampler.cfg_scale;
  o.lre = a.lre.empty() ? cfg.sampler.lre : parse_switch(a.lre);
  o.clip_x0 = cfg.sampler.clip_x0;
  o.seed = a.seed;
  steps = a.steps > 0 ? a.steps : cfg.sampler.steps;
  scale = a.scale > 0 ? a.scale : cfg.degrade.final_scale;
  return o;
}

int run_restore(const SampleArgs& a, const std::string& lq, std::string out) {
  const auto model = mrir::checkpoint::load(a.ckpt);
  int steps = 0, scale = 0;
  const auto opts = sample_options(model->config(), a, steps, scale);
  const mrir::eval::ModelRestorer restorer(*model, scale, opts, steps);
  if (out.empty()) out = (fs::path(lq).parent_path() / (fs::path(lq).stem().string() + "_restored.png")).string();
  const mrir::Tensor img = mrir::image::read_png(lq);
  const mrir::Tensor restored = restorer.restore(img, lq);
  mrir::image::write_png(out, restored);
  std::cout << out << " " << mrir::shape_str(restored.shape()) << "\n";
  return 0;
}

int run_eval_cmd(const SampleArgs& a, const std::string& lq_dir, const std::string& ref_dir, const std::string& out,
                 const std::string& restorer_name) {
  std::unique_ptr<mrir::MrirModel> model;
  std::unique_ptr<mrir::eval::Restorer> restorer;
  std::string fingerprint;
  if (restorer_name == "upsample") {
    const mrir::Config cfg = a.ckpt.empty() ? mrir::Config{} : mrir::checkpoint::load_config(a.ckpt);
    restorer = std::make_unique<mrir::eval::UpsampleRestorer>(a.scale > 0 ? a.scale : cfg.degrade.final_scale);
    fingerprint = mrir::config_fingerprint(cfg);
  } else if (restorer_name == "model") {
    if (a.ckpt.empty()) throw mrir::ArgumentError("eval: --ckpt is required with the model restorer");
    model = mrir::checkpoint::load(a.ckpt);
    int steps = 0, scale = 0;
    const auto opts = sample_options(model->config(), a, steps, scale);
    restorer = std::make_unique<mrir::eval::ModelRestorer>(*model, scale, opts, steps);
    fingerprint = mrir::config_fingerprint(model->config());
  } else {
    throw mrir::ArgumentError("eval: unknown restorer '" + restorer_name + "'");
  }
  const auto report = mrir::eval::run_eval(lq_dir, ref_dir, *restorer, out, fingerprint, a.seed);
  std::cout << mrir::eval::report_to_json(report).dump(2) << "\n";
  if (report.images.empty()) {
    std::cerr << "error: every pair was skipped\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal-conditioned diffusion image restoration"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Synthesize LQ/HQ pairs from a directory of PNGs");
  s->add_option("--hq-dir", synth.hq_dir, "Directory of HQ PNGs")->required();
  s->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Base seed");
  s->add_option("--scale", synth.scale, "Downscale factor");
  s->add_option("--config", synth.config, "Degradation config JSON");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train on a synthesized manifest");
  t->add_option("--config", train.config, "Config JSON");
  t->add_option("--data", train.data, "manifest.jsonl written by synth")->required();
  t->add_option("--out", train.out, "Checkpoint directory")->required();
  t->add_option("--steps", train.steps, "Override train.steps");

  SampleArgs sample;
  std::string lq, out;
  auto* r = app.add_subcommand("restore", "Restore one LQ image");
  r->add_option("--ckpt", sample.ckpt, "Checkpoint file")->required();
  r->add_option("--lq", lq, "LQ PNG")->required();
  r->add_option("--out", out, "Output PNG");
  r->add_option("--seed", sample.seed, "Sampling seed");
  r->add_option("--cfg-scale", sample.cfg_scale, "Guidance scale");
  r->add_option("--steps", sample.steps, "Inference steps");
  r->add_option("--lre", sample.lre, "LQ latent start: on|off");
  r->add_option("--scale", sample.scale, "Upscale factor");

  SampleArgs esample;
  std::string lq_dir, ref_dir, eval_out, restorer_name = "model";
  auto* e = app.add_subcommand("eval", "Restore a directory and score it against references");
  e->add_option("--lq-dir", lq_dir, "LQ PNG directory")->required();
  e->add_option("--ref-dir", ref_dir, "Reference PNG directory")->required();
  e->add_option("--out", eval_out, "Output directory")->required();
  e->add_option("--ckpt", esample.ckpt, "Checkpoint file");
  e->add_option("--restorer", restorer_name, "model | upsample");
  e->add_option("--seed", esample.seed, "Sampling seed");
  e->add_option("--cfg-scale", esample.cfg_scale, "Guidance scale");
  e->add_option("--steps", esample.steps, "Inference steps");
  e->add_option("--lre", esample.lre, "LQ latent start: on|off");
  e->add_option("--scale", esample.scale, "Upscale factor");

  bool quick = false;
  std::string work_dir = (fs::temp_directory_path() / "mrir_check").string();
  auto* c = app.add_subcommand("check", "Run the invariant and gradient suite");
  c->add_flag("--quick", quick, "Skip the toy overfit run");
  c->add_option("--work-dir", work_dir, "Scratch directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*r) return run_restore(sample, lq, out);
    if (*e) return run_eval_cmd(esample, lq_dir, ref_dir, eval_out, restorer_name);
    if (*c) {
      fs::create_directories(work_dir);
      return mrir::acceptance::run_all({self_path(argv[0]), work_dir, quick}, std::cout) ? 0 : 1;
    }
  } catch (const mrir::ArgumentError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const mrir::ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const mrir::InputError& ex) {
    std::cerr << "input error: " << ex.what() << "\n";
    return 3;
  } catch (const mrir::ProvenanceError& ex) {
    std::cerr << "caption error: " << ex.what() << "\n";
    return 3;
  } catch (const mrir::TrainingError& ex) {
    std::cerr << "training error (" << ex.term << "): " << ex.what() << "\n";
    return 4;
  } catch (const mrir::SamplingError& ex) {
    std::cerr << "sampling error at step " << ex.step << ": " << ex.what() << "\n";
    return 4;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
