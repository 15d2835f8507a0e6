#pragma once

// Spectrum-based redundancy elimination and augmentation: orthonormal 2-D
// DCT-II, the piecewise band-pass mask M(r), domain-invariant images (DII) and
// style-perturbation images (SPI).
//
// All functions are pure; a BandPassMask is immutable once built and may be
// shared across threads.

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "mikecoco/image.hpp"

namespace mikecoco::spectral {

using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Orthonormal DCT-II over both axes. Rejects empty or non-finite input.
Grid dct2(const Grid& channel);
// Inverse of dct2 (orthonormal DCT-III). If expected_rows/cols are positive the
// spectrum shape is checked against them.
Grid idct2(const Grid& coeffs, Eigen::Index expected_rows = -1, Eigen::Index expected_cols = -1);

struct Spectrum {
  int height = 0;
  int width = 0;
  std::vector<Grid> channels;
};

Spectrum dct2(const Image& image);
Image idct2(const Spectrum& spectrum);

struct MaskParams {
  double k1 = 0.005;
  double k2 = 0.7;
  double k3 = 1.0;
  double c1 = 0.95;
  double c2 = 0.3;
  double m2 = 0.01;
  double m4 = 0.5;
  // Raise v1 to 1 when round(min(H,W)*k1) is 0 (small images). When off, that case is an error.
  bool floor_v1 = true;
};

class BandPassMask {
 public:
  static BandPassMask build(int height, int width, const MaskParams& params = {});

  int height() const { return height_; }
  int width() const { return width_; }
  int v1() const { return v1_; }
  int v2() const { return v2_; }
  int v3() const { return v3_; }
  const MaskParams& params() const { return params_; }

  // Weights after clamping to [0, 1].
  const Grid& weights() const { return weights_; }
  double operator()(int i, int j) const { return weights_(i, j); }
  // Piecewise formula value before clamping; depends on (i, j) only through r = max(i, j).
  double raw_weight(int i, int j) const;

  // Mask of constant value (all-zero / all-one ablations and identities).
  static BandPassMask constant(int height, int width, double value);

 private:
  int height_ = 0;
  int width_ = 0;
  int v1_ = 0;
  int v2_ = 0;
  int v3_ = 0;
  MaskParams params_;
  Grid weights_;
  bool constant_ = false;
};

// Per-pixel noise draw for R_G; one grid per channel, N(0, 1) i.i.d.
Spectrum draw_noise(int height, int width, int channels, std::uint64_t seed);

// idct2((1 - M) * dct2(X)) per channel, no re-shift.
Image extract_dii(const Image& image, const BandPassMask& mask);
// idct2(M * dct2(X) * (1 + noise) + (1 - M) * dct2(X)).
Image make_spi(const Image& image, const BandPassMask& mask, std::uint64_t seed);
Image make_spi_with_noise(const Image& image, const BandPassMask& mask, const Spectrum& noise);

// How DII pixels are brought back into the display range after DC removal.
enum class DiiShift {
  SourceMean,  // add the source image's per-channel mean, then clip to [0, 1]
  MidGray,     // add 0.5, then clip
  Raw,         // leave signed values untouched
};

Image dii_to_pixels(const Image& dii, const Image& source, DiiShift shift);

struct StreamOutput {
  Image dii;
  Image spi;
  std::uint64_t noise_seed = 0;
};

// Both STREAM products in the pixel domain (DII re-shifted, SPI clipped).
StreamOutput stream(const Image& image, const BandPassMask& mask, std::uint64_t noise_seed,
                    DiiShift shift = DiiShift::SourceMean);

// log(1 + |coeff|) of channel-averaged spectrum, normalised to [0, 1]; for inspection output.
Image log_magnitude(const Spectrum& spectrum);

}  // namespace mikecoco::spectral
