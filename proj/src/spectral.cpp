#include "mikecoco/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <unordered_map>

#include "mikecoco/error.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::spectral {

namespace {

// Row k holds the k-th orthonormal DCT-II basis vector of length n.
const Grid& basis(Eigen::Index n) {
  thread_local std::unordered_map<Eigen::Index, Grid> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Grid c(n, n);
  const double a0 = std::sqrt(1.0 / static_cast<double>(n));
  const double ak = std::sqrt(2.0 / static_cast<double>(n));
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      c(k, i) = (k == 0 ? a0 : ak) * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * n));
  return cache.emplace(n, std::move(c)).first->second;
}

Grid channel_grid(const Image& image, int c) {
  Grid g(image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) g(y, x) = image.at(c, y, x);
  return g;
}

void check_mask(const Image& image, const BandPassMask& mask) {
  if (image.height != mask.height() || image.width != mask.width()) {
    throw ValidationError("mask is " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                          " but image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  require(image.channels > 0, "image has no channels");
}

}  // namespace

Grid dct2(const Grid& channel) {
  require(channel.rows() >= 1 && channel.cols() >= 1, "dct2: empty grid");
  require(channel.allFinite(), "dct2: input contains non-finite values");
  const Grid& ch = basis(channel.rows());
  const Grid& cw = basis(channel.cols());
  Grid tmp(channel.rows(), channel.cols());
  tmp.noalias() = ch * channel;
  Grid out(channel.rows(), channel.cols());
  out.noalias() = tmp * cw.transpose();
  return out;
}

Grid idct2(const Grid& coeffs, Eigen::Index expected_rows, Eigen::Index expected_cols) {
  if ((expected_rows > 0 && coeffs.rows() != expected_rows) || (expected_cols > 0 && coeffs.cols() != expected_cols)) {
    throw ValidationError("idct2: spectrum is " + std::to_string(coeffs.rows()) + "x" + std::to_string(coeffs.cols()) +
                          ", declared " + std::to_string(expected_rows) + "x" + std::to_string(expected_cols));
  }
  require(coeffs.rows() >= 1 && coeffs.cols() >= 1, "idct2: empty spectrum");
  require(coeffs.allFinite(), "idct2: spectrum contains non-finite values");
  const Grid& ch = basis(coeffs.rows());
  const Grid& cw = basis(coeffs.cols());
  Grid tmp(coeffs.rows(), coeffs.cols());
  tmp.noalias() = ch.transpose() * coeffs;
  Grid out(coeffs.rows(), coeffs.cols());
  out.noalias() = tmp * cw;
  return out;
}

Spectrum dct2(const Image& image) {
  require(!image.empty(), "dct2: empty image");
  Spectrum s;
  s.height = image.height;
  s.width = image.width;
  s.channels.reserve(static_cast<std::size_t>(image.channels));
  for (int c = 0; c < image.channels; ++c) s.channels.push_back(dct2(channel_grid(image, c)));
  return s;
}

Image idct2(const Spectrum& spectrum) {
  Image out(spectrum.height, spectrum.width, static_cast<int>(spectrum.channels.size()));
  for (std::size_t c = 0; c < spectrum.channels.size(); ++c) {
    Grid g = idct2(spectrum.channels[c], spectrum.height, spectrum.width);
    for (int y = 0; y < spectrum.height; ++y)
      for (int x = 0; x < spectrum.width; ++x) out.at(static_cast<int>(c), y, x) = g(y, x);
  }
  return out;
}

BandPassMask BandPassMask::build(int height, int width, const MaskParams& p) {
  require(height >= 2 && width >= 2, "band-pass mask needs H, W >= 2");
  require(p.k1 > 0 && p.k1 < p.k2 && p.k2 <= p.k3, "band-pass mask needs 0 < k1 < k2 <= k3");
  const double side = std::min(height, width);
  BandPassMask m;
  m.height_ = height;
  m.width_ = width;
  m.params_ = p;
  m.v1_ = static_cast<int>(std::lround(side * p.k1));
  m.v2_ = static_cast<int>(std::lround(side * p.k2));
  m.v3_ = static_cast<int>(std::lround(side * p.k3));
  if (m.v1_ == 0) {
    if (!p.floor_v1) {
      throw ValidationError("cutoff v1 rounds to 0 for a " + std::to_string(height) + "x" + std::to_string(width) +
                            " image; use a larger image or a larger k1");
    }
    m.v1_ = 1;
  }
  if (m.v1_ >= m.v2_) {
    throw ValidationError("cutoffs v1=" + std::to_string(m.v1_) + " and v2=" + std::to_string(m.v2_) +
                          " overlap; increase k2 or the image size");
  }
  if (m.v3_ == m.v2_) {
    throw ValidationError("cutoffs v2 and v3 coincide (" + std::to_string(m.v2_) + "); the m3 slope is undefined");
  }
  m.weights_.resize(height, width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) m.weights_(i, j) = std::clamp(m.raw_weight(i, j), 0.0, 1.0);
  return m;
}

BandPassMask BandPassMask::constant(int height, int width, double value) {
  require(height >= 1 && width >= 1, "mask size must be positive");
  require(value >= 0.0 && value <= 1.0, "constant mask value must be in [0, 1]");
  BandPassMask m;
  m.height_ = height;
  m.width_ = width;
  m.constant_ = true;
  m.weights_ = Grid::Constant(height, width, value);
  return m;
}

double BandPassMask::raw_weight(int i, int j) const {
  if (constant_) return weights_(i, j);
  const int r = std::max(i, j);
  if (r <= v1_) return 1.0 - params_.c1 / v1_ * r;
  if (r <= v2_) return params_.m2;
  if (r <= v3_) return params_.c2 / static_cast<double>(v3_ - v2_) * r;
  return params_.m4;
}

Spectrum draw_noise(int height, int width, int channels, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Spectrum s;
  s.height = height;
  s.width = width;
  for (int c = 0; c < channels; ++c) {
    Grid g(height, width);
    for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = normal(rng);
    s.channels.push_back(std::move(g));
  }
  return s;
}

Image extract_dii(const Image& image, const BandPassMask& mask) {
  check_mask(image, mask);
  Spectrum s = dct2(image);
  const Grid keep = Grid::Ones(mask.height(), mask.width()) - mask.weights();
  for (auto& ch : s.channels) ch = ch.cwiseProduct(keep);
  return idct2(s);
}

Image make_spi_with_noise(const Image& image, const BandPassMask& mask, const Spectrum& noise) {
  check_mask(image, mask);
  require(noise.height == image.height && noise.width == image.width &&
              noise.channels.size() == static_cast<std::size_t>(image.channels),
          "noise spectrum shape does not match the image");
  Spectrum s = dct2(image);
  for (std::size_t c = 0; c < s.channels.size(); ++c) {
    // R_G(M.S) + (1 - M).S  ==  S + M.S.noise
    const Grid non_causal = mask.weights().cwiseProduct(s.channels[c]);
    s.channels[c] += non_causal.cwiseProduct(noise.channels[c]);
  }
  return idct2(s);
}

Image make_spi(const Image& image, const BandPassMask& mask, std::uint64_t seed) {
  check_mask(image, mask);
  return make_spi_with_noise(image, mask, draw_noise(image.height, image.width, image.channels, seed));
}

Image dii_to_pixels(const Image& dii, const Image& source, DiiShift shift) {
  if (shift == DiiShift::Raw) return dii;
  require(dii.same_shape(source), "dii_to_pixels: DII and source shapes differ");
  Image out = dii;
  const std::size_t plane = static_cast<std::size_t>(dii.height) * dii.width;
  for (int c = 0; c < dii.channels; ++c) {
    double offset = 0.5;
    if (shift == DiiShift::SourceMean) {
      double total = 0.0;
      for (std::size_t k = 0; k < plane; ++k) total += source.data[c * plane + k];
      offset = total / static_cast<double>(plane);
    }
    for (std::size_t k = 0; k < plane; ++k) out.data[c * plane + k] += offset;
  }
  clamp01(out);
  return out;
}

StreamOutput stream(const Image& image, const BandPassMask& mask, std::uint64_t noise_seed, DiiShift shift) {
  StreamOutput out;
  out.noise_seed = noise_seed;
  out.dii = dii_to_pixels(extract_dii(image, mask), image, shift);
  out.spi = make_spi(image, mask, noise_seed);
  clamp01(out.spi);
  return out;
}

Image log_magnitude(const Spectrum& spectrum) {
  Image out(spectrum.height, spectrum.width, 1);
  double peak = 0.0;
  for (int y = 0; y < spectrum.height; ++y)
    for (int x = 0; x < spectrum.width; ++x) {
      double acc = 0.0;
      for (const auto& ch : spectrum.channels) acc += std::abs(ch(y, x));
      const double v = std::log1p(acc / static_cast<double>(spectrum.channels.size()));
      out.at(0, y, x) = v;
      peak = std::max(peak, v);
    }
  if (peak > 0)
    for (auto& v : out.data) v /= peak;
  return out;
}

}  // namespace mikecoco::spectral
