#include "mrir/eval.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>

#include "mrir/image.hpp"
#include "mrir/metrics.hpp"

namespace mrir::eval {

namespace fs = std::filesystem;

namespace {

Tensor pad_reflect(const Tensor& img, int h, int w) {
  const int c = img.shape()[0], ih = img.shape()[1], iw = img.shape()[2];
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = img.at(ch, image::reflect_index(y, ih), image::reflect_index(x, iw));
    }
  }
  return out;
}

Tensor crop(const Tensor& img, int h, int w) {
  const int c = img.shape()[0];
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = img.at(ch, y, x);
    }
  }
  return out;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

std::map<std::string, std::string> png_stems(const std::string& dir) {
  std::map<std::string, std::string> stems;
  if (!fs::is_directory(dir)) return stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& p = entry.path();
    if (p.extension() == ".png") stems[p.stem().string()] = p.string();
  }
  return stems;
}

nlohmann::json psnr_json(double v) { return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v); }

}  // namespace

ModelRestorer::ModelRestorer(const MrirModel& model, int scale, diffusion::SampleOptions opts, int steps)
    : model_(model),
      scale_(scale),
      opts_(opts),
      codec_(codec::make_codec(model.config().codec)),
      conditioner_(model.config()),
      sched_(diffusion::make_schedule(model.config().train.timesteps, model.config().train.beta_min,
                                      model.config().train.beta_max, steps)) {
  if (scale < 1) throw ArgumentError("restorer: scale must be >= 1");
}

Tensor ModelRestorer::restore(const Tensor& lq, const std::string& path) const {
  image::require_image(lq, "restore");
  const int h = image::height(lq) * scale_, w = image::width(lq) * scale_;
  const int m = codec_->factor() << (model_.unet().scales() - 1);
  const Tensor lq_up = diffusion::upsample_lq(lq, h, w);
  const auto bundle = conditioner_.bundle(lq, path);
  const int ph = round_up(h, m), pw = round_up(w, m);
  const Tensor padded = ph == h && pw == w ? lq_up : pad_reflect(lq_up, ph, pw);
  const Tensor out = diffusion::ddpm_sample(model_, *codec_, bundle, padded, sched_, opts_);
  return ph == h && pw == w ? out : crop(out, h, w);
}

Tensor UpsampleRestorer::restore(const Tensor& lq, const std::string&) const {
  image::require_image(lq, "restore");
  return image::clip01(diffusion::upsample_lq(lq, image::height(lq) * scale_, image::width(lq) * scale_));
}

void aggregate(MetricReport& report) {
  double psnr = 0.0, ssim = 0.0;
  int finite = 0;
  report.infinite_psnr = 0;
  for (const auto& [_, s] : report.images) {
    if (std::isinf(s.psnr_y)) {
      ++report.infinite_psnr;
    } else {
      psnr += s.psnr_y;
      ++finite;
    }
    ssim += s.ssim_y;
  }
  report.mean_psnr_y = finite > 0 ? psnr / finite : 0.0;
  report.mean_ssim_y = report.images.empty() ? 0.0 : ssim / static_cast<double>(report.images.size());
}

nlohmann::json report_to_json(const MetricReport& report) {
  nlohmann::json images = nlohmann::json::object();
  for (const auto& [stem, s] : report.images) images[stem] = {{"psnr_y", psnr_json(s.psnr_y)}, {"ssim_y", s.ssim_y}};
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : report.skipped) skipped.push_back({{"stem", s.stem}, {"reason", s.reason}});
  return {
      {"schema_version", MetricReport::kSchemaVersion},
      {"config_fingerprint", report.config_fingerprint},
      {"seed", report.seed},
      {"restorer", report.restorer},
      {"images", images},
      {"aggregate",
       {{"count", report.images.size()},
        {"psnr_y", report.mean_psnr_y},
        {"ssim_y", report.mean_ssim_y},
        {"infinite_psnr", report.infinite_psnr}}},
      {"skipped", skipped},
      {"timestamp", report.timestamp},
  };
}

nlohmann::json deterministic_view(const nlohmann::json& report) {
  nlohmann::json copy = report;
  copy.erase("timestamp");
  return copy;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

MetricReport run_eval(const std::string& lq_dir, const std::string& ref_dir, const Restorer& restorer,
                      const std::string& out_dir, const std::string& fingerprint, std::uint64_t seed) {
  const auto lqs = png_stems(lq_dir);
  const auto refs = png_stems(ref_dir);
  if (lqs.empty() && refs.empty()) throw InputError("no pairs found");

  MetricReport report;
  report.config_fingerprint = fingerprint;
  report.seed = seed;
  report.restorer = restorer.name();
  fs::create_directories(out_dir);

  std::set<std::string> stems;
  for (const auto& [s, _] : lqs) stems.insert(s);
  for (const auto& [s, _] : refs) stems.insert(s);
  for (const auto& stem : stems) {
    const auto lq_it = lqs.find(stem);
    const auto ref_it = refs.find(stem);
    if (lq_it == lqs.end()) {
      report.skipped.push_back({stem, "missing LQ image"});
      continue;
    }
    if (ref_it == refs.end()) {
      report.skipped.push_back({stem, "missing reference image"});
      continue;
    }
    const Tensor lq = image::read_png(lq_it->second);
    const Tensor ref = image::read_png(ref_it->second);
    const Tensor restored = restorer.restore(lq, lq_it->second);
    if (!restored.same_shape(ref)) {
      report.skipped.push_back({stem, "restored " + shape_str(restored.shape()) + " vs reference " + shape_str(ref.shape())});
      continue;
    }
    image::write_png((fs::path(out_dir) / (stem + ".png")).string(), restored);
    const Tensor q = image::quantize8(restored);
    report.images[stem] = {metrics::psnr_y(q, ref), metrics::ssim_y(q, ref)};
  }
  aggregate(report);
  report.timestamp = utc_timestamp();
  std::ofstream((fs::path(out_dir) / "report.json").string()) << report_to_json(report).dump(2) << "\n";
  return report;
}

}  // namespace mrir::eval
