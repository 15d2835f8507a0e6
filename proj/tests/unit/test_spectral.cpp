#include <cmath>
#include <random>

#include "doctest.h"
#include "mikecoco/error.hpp"
#include "mikecoco/spectral.hpp"
#include "oracles.hpp"

using namespace mikecoco;
using spectral::Grid;

namespace {

Grid random_grid(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Grid g(h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = u(rng);
  return g;
}

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, 3);
  for (double& v : img.data) v = u(rng);
  return img;
}

double max_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("dct2 of a constant grid is pure DC") {
  const Grid g = Grid::Constant(6, 10, 0.3);
  const Grid c = spectral::dct2(g);
  CHECK(c(0, 0) == doctest::Approx(0.3 * std::sqrt(60.0)).epsilon(1e-12));
  c(0, 0);
  Grid rest = c;
  rest(0, 0) = 0.0;
  CHECK(rest.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dct2 matches the naive double sum on an 8x8 grid") {
  const Grid g = random_grid(8, 8, 1);
  const auto ref = oracle::naive_dct2(oracle::to_mat(g));
  const Grid c = spectral::dct2(g);
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) CHECK(std::abs(c(u, v) - ref[u][v]) < 1e-8);
}

TEST_CASE("idct2 inverts dct2 in both directions") {
  const Grid g = random_grid(7, 12, 2);
  CHECK((spectral::idct2(spectral::dct2(g)) - g).cwiseAbs().maxCoeff() < 1e-6);
  const Grid s = random_grid(9, 5, 3);
  CHECK((spectral::dct2(spectral::idct2(s)) - s).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(spectral::idct2(Grid::Zero(4, 4)).cwiseAbs().maxCoeff() == 0.0);
  Grid dc = Grid::Zero(4, 6);
  dc(0, 0) = 0.7 * std::sqrt(24.0);
  CHECK((spectral::idct2(dc).array() - 0.7).abs().maxCoeff() < 1e-12);
}

TEST_CASE("transform input validation") {
  CHECK_THROWS_AS(spectral::dct2(Grid(0, 0)), ValidationError);
  Grid bad = Grid::Zero(3, 3);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(spectral::dct2(bad), ValidationError);
  CHECK_THROWS_AS(spectral::idct2(Grid::Zero(4, 4), 4, 5), ValidationError);
}

TEST_CASE("band-pass mask follows the piecewise definition") {
  const auto m = spectral::BandPassMask::build(224, 224);
  CHECK(m.v1() == 1);
  CHECK(m.v2() == 157);
  CHECK(m.v3() == 224);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(1, 0) == doctest::Approx(0.05));
  CHECK(m(3, 100) == 0.01);
  CHECK(m(157, 2) == 0.01);
  CHECK(m.raw_weight(158, 0) == doctest::Approx(0.3 / 67 * 158));
  // Last index is 223, inside the ramp; the formula at r = v3 itself exceeds 1.
  CHECK(0.3 * 224 / 67 == doctest::Approx(1.0030).epsilon(1e-4));
  CHECK(m(223, 223) <= 1.0);
  for (int i = 0; i < 224; i += 7)
    for (int j = 0; j < 224; j += 5) {
      CHECK(m(i, j) == m(j, i));
      CHECK(m.raw_weight(i, j) == oracle::mask_weight(i, j, 1, 157, 224, 0.95, 0.3, 0.01, 0.5));
    }
}

TEST_CASE("mask clamps a ramp that overshoots 1") {
  spectral::MaskParams p;
  p.k3 = 0.9;  // v3 < size so r > v3 uses m4, and the ramp tops out above 1 with a large c2
  p.c2 = 2.0;
  const auto m = spectral::BandPassMask::build(100, 100, p);
  CHECK(m.raw_weight(90, 0) > 1.0);
  CHECK(m(90, 0) == 1.0);
  CHECK(m(95, 95) == 0.5);
}

TEST_CASE("mask construction errors") {
  spectral::MaskParams p;
  p.floor_v1 = false;
  CHECK_THROWS_AS(spectral::BandPassMask::build(32, 32, p), ValidationError);
  spectral::MaskParams q;
  q.k2 = 1.0;  // v2 == v3
  CHECK_THROWS_AS(spectral::BandPassMask::build(64, 64, q), ValidationError);
  const auto small = spectral::BandPassMask::build(32, 32);
  CHECK(small.v1() == 1);
  CHECK(small.v2() == 22);
  CHECK(small.v3() == 32);
}

TEST_CASE("DII identities") {
  const Image img = random_image(16, 16, 4);
  CHECK(max_diff(spectral::extract_dii(img, spectral::BandPassMask::constant(16, 16, 0.0)), img) < 1e-6);
  const Image zero = spectral::extract_dii(img, spectral::BandPassMask::constant(16, 16, 1.0));
  for (double v : zero.data) CHECK(std::abs(v) < 1e-12);
  const auto mask = spectral::BandPassMask::build(16, 16);
  const auto sx = spectral::dct2(img);
  const auto sd = spectral::dct2(spectral::extract_dii(img, mask));
  for (int c = 0; c < 3; ++c)
    CHECK((sd.channels[c] + mask.weights().cwiseProduct(sx.channels[c]) - sx.channels[c]).cwiseAbs().maxCoeff() <
          1e-6);
}

TEST_CASE("SPI perturbs only coefficients with nonzero mask weight, in proportion to it") {
  const Image img = random_image(32, 32, 5);
  const auto mask = spectral::BandPassMask::build(32, 32);
  const auto noise = spectral::draw_noise(32, 32, 3, 77);
  const auto sx = spectral::dct2(img);
  const auto ss = spectral::dct2(spectral::make_spi_with_noise(img, mask, noise));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) {
        const double delta = ss.channels[c](i, j) - sx.channels[c](i, j);
        const double expected = mask(i, j) * sx.channels[c](i, j) * noise.channels[c](i, j);
        CHECK(std::abs(delta - expected) < 1e-9);
        if (mask(i, j) == 0.01)
          CHECK(std::abs(delta) <= 0.01 * std::abs(sx.channels[c](i, j) * noise.channels[c](i, j)) + 1e-9);
      }
  CHECK(max_diff(spectral::make_spi(img, spectral::BandPassMask::constant(32, 32, 0.0), 3), img) < 1e-6);
}

TEST_CASE("SPI is deterministic in the seed") {
  const Image img = random_image(16, 16, 6);
  const auto mask = spectral::BandPassMask::build(16, 16);
  CHECK(spectral::make_spi(img, mask, 9).data == spectral::make_spi(img, mask, 9).data);
  CHECK(spectral::make_spi(img, mask, 9).data != spectral::make_spi(img, mask, 10).data);
}

TEST_CASE("DII pixel shifts") {
  const Image img = random_image(16, 16, 7);
  const auto mask = spectral::BandPassMask::build(16, 16);
  const Image dii = spectral::extract_dii(img, mask);
  const Image raw = spectral::dii_to_pixels(dii, img, spectral::DiiShift::Raw);
  CHECK(raw.data == dii.data);
  const Image shifted = spectral::dii_to_pixels(dii, img, spectral::DiiShift::SourceMean);
  for (double v : shifted.data) CHECK((v >= 0.0 && v <= 1.0));
  const auto out = spectral::stream(img, mask, 5);
  CHECK(out.noise_seed == 5);
  CHECK(out.dii.same_shape(img));
  CHECK(out.spi.same_shape(img));
}

TEST_CASE("mask and image shapes must agree") {
  const Image img = random_image(16, 16, 8);
  CHECK_THROWS_AS(spectral::extract_dii(img, spectral::BandPassMask::build(32, 32)), ValidationError);
}
