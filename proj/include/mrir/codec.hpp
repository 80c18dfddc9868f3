#pragma once

#include <memory>

#include "mrir/config.hpp"
#include "mrir/tensor.hpp"

namespace mrir::codec {

struct LatentCode {
  Tensor z;  // [C_z, H/f, W/f]
  int factor = 8;
  int source_h = 0;
  int source_w = 0;
};

// Plug point for the image <-> latent map.
class Codec {
 public:
  virtual ~Codec() = default;
  virtual LatentCode encode(const Tensor& img) const = 0;
  virtual Tensor decode(const LatentCode& code) const = 0;
  virtual int factor() const = 0;
  virtual int latent_channels() const = 0;
};

// Space-to-depth with factor f followed by x -> 2x - 1. Channel c*f*f + dy*f + dx of
// latent cell (i, j) holds pixel (c, i*f + dy, j*f + dx). Parameter-free and lossless
// on any pixel grid where 2x - 1 is exact in double precision (in particular any
// dyadic grid such as k / 2^16).
class SpaceToDepthCodec final : public Codec {
 public:
  explicit SpaceToDepthCodec(int factor = 8);

  LatentCode encode(const Tensor& img) const override;
  // Inverse rearrangement then (z + 1) / 2 clipped to [0, 1].
  Tensor decode(const LatentCode& code) const override;
  int factor() const override { return factor_; }
  int latent_channels() const override { return 3 * factor_ * factor_; }

  // Decode with the source dimensions implied by the latent's shape.
  Tensor decode(const Tensor& z) const;

 private:
  int factor_;
};

std::unique_ptr<Codec> make_codec(const CodecConfig& cfg);

}  // namespace mrir::codec
