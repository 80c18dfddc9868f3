#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrir/codec.hpp"
#include "mrir/conditioning.hpp"
#include "mrir/diffusion.hpp"
#include "mrir/model.hpp"

namespace mrir::eval {

class Restorer {
 public:
  virtual ~Restorer() = default;
  // `path` is the LQ file, used for sidecar captions; may be empty.
  virtual Tensor restore(const Tensor& lq, const std::string& path) const = 0;
  virtual std::string name() const = 0;
};

// Conditioning, processor, control branch and guided DDPM sampling. Output is the LQ
// size times `scale`; sizes that the U-Net cannot halve down to its coarsest level
// are reflect-padded for sampling and cropped afterwards.
class ModelRestorer final : public Restorer {
 public:
  ModelRestorer(const MrirModel& model, int scale, diffusion::SampleOptions opts, int steps);
  Tensor restore(const Tensor& lq, const std::string& path) const override;
  std::string name() const override { return "model"; }
  const conditioning::Conditioner& conditioner() const { return conditioner_; }

 private:
  const MrirModel& model_;
  int scale_;
  diffusion::SampleOptions opts_;
  std::unique_ptr<codec::Codec> codec_;
  conditioning::Conditioner conditioner_;
  diffusion::NoiseSchedule sched_;
};

// Bilinear upsampling by `scale`; the identity-model stand-in.
class UpsampleRestorer final : public Restorer {
 public:
  explicit UpsampleRestorer(int scale) : scale_(scale) {}
  Tensor restore(const Tensor& lq, const std::string& path) const override;
  std::string name() const override { return "upsample"; }

 private:
  int scale_;
};

struct ImageScore {
  double psnr_y = 0.0;  // +inf when identical
  double ssim_y = 0.0;
};

struct Skipped {
  std::string stem;
  std::string reason;
};

struct MetricReport {
  static constexpr int kSchemaVersion = 1;
  std::string config_fingerprint;
  std::uint64_t seed = 0;
  std::string restorer;
  std::map<std::string, ImageScore> images;
  double mean_psnr_y = 0.0;  // over finite values
  double mean_ssim_y = 0.0;
  int infinite_psnr = 0;
  std::vector<Skipped> skipped;
  std::string timestamp;
};

// Means over the per-image entries; infinite PSNR is counted, not averaged.
void aggregate(MetricReport& report);

nlohmann::json report_to_json(const MetricReport& report);
// The report without its timestamp, for run-to-run comparisons.
nlohmann::json deterministic_view(const nlohmann::json& report);

// Pairs <lq_dir>/<stem>.png with <ref_dir>/<stem>.png, restores each LQ image, writes
// <out_dir>/<stem>.png and <out_dir>/report.json. Unpaired files are listed as
// skipped. Throws InputError("no pairs found") when neither directory holds a PNG.
MetricReport run_eval(const std::string& lq_dir, const std::string& ref_dir, const Restorer& restorer,
                      const std::string& out_dir, const std::string& fingerprint, std::uint64_t seed);

std::string utc_timestamp();

}  // namespace mrir::eval
