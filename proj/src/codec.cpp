#include "mrir/codec.hpp"

#include <algorithm>

namespace mrir::codec {

SpaceToDepthCodec::SpaceToDepthCodec(int factor) : factor_(factor) {
  if (factor < 1) throw ArgumentError("codec: factor must be >= 1");
}

LatentCode SpaceToDepthCodec::encode(const Tensor& img) const {
  if (img.rank() != 3 || img.shape()[0] != 3) {
    throw ArgumentError("encode: expected a [3, H, W] image, got " + shape_str(img.shape()));
  }
  const int h = img.shape()[1], w = img.shape()[2], f = factor_;
  if (h % f != 0 || w % f != 0) {
    throw ArgumentError("encode: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by factor " +
                        std::to_string(f));
  }
  const int lh = h / f, lw = w / f;
  LatentCode code{Tensor({3 * f * f, lh, lw}), f, h, w};
  for (int c = 0; c < 3; ++c) {
    for (int dy = 0; dy < f; ++dy) {
      for (int dx = 0; dx < f; ++dx) {
        const int lc = (c * f + dy) * f + dx;
        for (int i = 0; i < lh; ++i) {
          for (int j = 0; j < lw; ++j) code.z.at(lc, i, j) = 2.0 * img.at(c, i * f + dy, j * f + dx) - 1.0;
        }
      }
    }
  }
  return code;
}

Tensor SpaceToDepthCodec::decode(const LatentCode& code) const {
  const int f = factor_;
  const Tensor& z = code.z;
  if (code.factor != f || z.rank() != 3 || z.shape()[0] != 3 * f * f || z.shape()[1] * f != code.source_h ||
      z.shape()[2] * f != code.source_w) {
    throw ArgumentError("decode: latent " + shape_str(z.shape()) + " inconsistent with factor " +
                        std::to_string(f) + " and source " + std::to_string(code.source_h) + "x" +
                        std::to_string(code.source_w));
  }
  const int lh = z.shape()[1], lw = z.shape()[2];
  Tensor img({3, code.source_h, code.source_w});
  for (int c = 0; c < 3; ++c) {
    for (int dy = 0; dy < f; ++dy) {
      for (int dx = 0; dx < f; ++dx) {
        const int lc = (c * f + dy) * f + dx;
        for (int i = 0; i < lh; ++i) {
          for (int j = 0; j < lw; ++j) {
            img.at(c, i * f + dy, j * f + dx) = std::clamp((z.at(lc, i, j) + 1.0) / 2.0, 0.0, 1.0);
          }
        }
      }
    }
  }
  return img;
}

Tensor SpaceToDepthCodec::decode(const Tensor& z) const {
  if (z.rank() != 3) throw ArgumentError("decode: expected a rank-3 latent, got " + shape_str(z.shape()));
  return decode(LatentCode{z, factor_, z.shape()[1] * factor_, z.shape()[2] * factor_});
}

std::unique_ptr<Codec> make_codec(const CodecConfig& cfg) {
  if (cfg.kind != "s2d") throw ConfigError("codec.kind: unknown codec '" + cfg.kind + "'");
  return std::make_unique<SpaceToDepthCodec>(cfg.factor);
}

}  // namespace mrir::codec
