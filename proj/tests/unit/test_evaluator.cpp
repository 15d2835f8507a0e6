#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mikecoco/error.hpp"
#include "mikecoco/evaluator.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mikecoco;
using ag::Matrix;
using testing_support::random_matrix;

namespace {

// Gallery rows e_1 scaled so the cosine to query e_0 follows `sims`.
Matrix gallery_with_similarities(const std::vector<double>& sims) {
  Matrix g(static_cast<ag::Index>(sims.size()), 2);
  for (std::size_t i = 0; i < sims.size(); ++i) {
    g(static_cast<ag::Index>(i), 0) = sims[i];
    g(static_cast<ag::Index>(i), 1) = std::sqrt(1.0 - sims[i] * sims[i]);
  }
  return g;
}

Eigen::VectorXd e0() {
  Eigen::VectorXd q(2);
  q << 1.0, 0.0;
  return q;
}

eval::FeatureSet random_set(int n, int d, int ids, int cams, std::mt19937_64& rng) {
  eval::FeatureSet s;
  s.features = random_matrix(n, d, rng);
  for (int i = 0; i < n; ++i) {
    s.features.row(i).normalize();
    s.identities.push_back(std::uniform_int_distribution<int>(0, ids - 1)(rng));
    s.cameras.push_back(std::uniform_int_distribution<int>(0, cams - 1)(rng));
  }
  return s;
}

}  // namespace

TEST_CASE("AP: single positive first, worst rank, two positives") {
  const auto first = eval::rank_query(e0(), 1, 0, gallery_with_similarities({0.9, 0.5, 0.1}), {1, 2, 3}, {1, 1, 1});
  CHECK(first.ap == 1.0);
  CHECK(first.first_match_rank == 1);

  const auto last = eval::rank_query(e0(), 1, 0, gallery_with_similarities({0.9, 0.7, 0.5, 0.1}), {2, 3, 4, 1},
                                     {1, 1, 1, 1});
  CHECK(last.ap == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(last.first_match_rank == 4);

  const auto two = eval::rank_query(e0(), 1, 0, gallery_with_similarities({0.9, 0.8, 0.7, 0.6, 0.5}), {1, 2, 1, 3, 4},
                                    {1, 1, 1, 1, 1});
  CHECK(two.ap == 5.0 / 6.0);
  CHECK(two.ordered_gallery == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("junk rule and missing positives") {
  // Same id and camera as the query: excluded. Unknown cameras keep everything.
  const Matrix g = gallery_with_similarities({0.9, 0.5});
  const auto r = eval::rank_query(e0(), 1, 0, g, {1, 1}, {0, 2});
  CHECK(r.ordered_gallery == std::vector<std::size_t>{1});
  CHECK(r.ap == 1.0);
  const auto camfree = eval::rank_query(e0(), 1, -1, g, {1, 1}, {-1, -1});
  CHECK(camfree.ordered_gallery.size() == 2);
  const auto none = eval::rank_query(e0(), 7, 0, g, {1, 1}, {0, 2});
  CHECK_FALSE(none.valid());
}

TEST_CASE("compute_report") {
  eval::RankingResult a, b, dropped;
  a.ap = 1.0;
  a.first_match_rank = 1;
  b.ap = 0.5;
  b.first_match_rank = 2;
  const auto one = eval::compute_report({a}, 5);
  CHECK(one.map == 1.0);
  CHECK(one.cmc[0] == 1.0);
  const auto two = eval::compute_report({a, b, dropped}, 5);
  CHECK(two.map == 0.75);
  CHECK(two.cmc[0] == 0.5);
  CHECK(two.cmc[1] == 1.0);
  CHECK(two.num_queries == 2);
  CHECK(two.dropped_queries == 1);
  CHECK_THROWS_AS(eval::compute_report({dropped}, 5), ValidationError);
}

TEST_CASE("evaluate matches the brute-force oracle; invariances") {
  std::mt19937_64 rng(21);
  const auto q = random_set(20, 6, 5, 3, rng);
  const auto g = random_set(100, 6, 5, 3, rng);
  const auto rep = eval::evaluate(q, g, 20);
  const auto bf = oracle::brute_force_eval(oracle::to_mat(q.features), q.identities, q.cameras,
                                           oracle::to_mat(g.features), g.identities, g.cameras, 20);
  CHECK(std::abs(rep.map - bf.map) < 1e-9);
  for (int r = 0; r < 20; ++r) CHECK(std::abs(rep.cmc[r] - bf.cmc[r]) < 1e-9);
  for (int r = 1; r < 20; ++r) CHECK(rep.cmc[r] >= rep.cmc[r - 1]);
  CHECK((rep.map >= 0.0 && rep.map <= 1.0));

  // Gallery permutation.
  std::vector<int> perm(100);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  eval::FeatureSet shuffled = g;
  for (int i = 0; i < 100; ++i) {
    shuffled.features.row(i) = g.features.row(perm[i]);
    shuffled.identities[i] = g.identities[perm[i]];
    shuffled.cameras[i] = g.cameras[perm[i]];
  }
  const auto rp = eval::evaluate(q, shuffled, 20);
  CHECK(rp.map == doctest::Approx(rep.map).epsilon(1e-12));
  CHECK(rp.cmc == rep.cmc);

  // Positive query scaling is a monotone transform of every cosine score.
  eval::FeatureSet scaled = q;
  scaled.features *= 3.0;
  const auto rs = eval::evaluate(scaled, g, 20);
  CHECK(rs.map == doctest::Approx(rep.map).epsilon(1e-12));
  CHECK(rs.cmc == rep.cmc);
}

TEST_CASE("perfect retrieval gives map = cmc[1] = 1") {
  eval::FeatureSet q, g;
  q.features = Matrix::Identity(3, 3);
  q.identities = {0, 1, 2};
  q.cameras = {0, 0, 0};
  g.features = Matrix(6, 3);
  g.features << 1, 0, 0, 0.9, 0.1, 0, 0, 1, 0, 0, 0.95, 0.05, 0, 0, 1, 0.1, 0, 0.9;
  for (int i = 0; i < 6; ++i) g.features.row(i).normalize();
  g.identities = {0, 0, 1, 1, 2, 2};
  g.cameras = {1, 1, 1, 1, 1, 1};
  const auto rep = eval::evaluate(q, g, 5);
  CHECK(rep.map == 1.0);
  CHECK(rep.cmc[0] == 1.0);
}

TEST_CASE("feature file round trip is lossless") {
  std::mt19937_64 rng(22);
  auto s = random_set(7, 5, 3, 2, rng);
  s.cameras[2] = -1;
  const auto dir = testing_support::scratch_dir("features");
  eval::save_features(dir / "f.feat", s);
  const auto back = eval::load_features(dir / "f.feat");
  CHECK(back.features == s.features);
  CHECK(back.identities == s.identities);
  CHECK(back.cameras == s.cameras);
  CHECK_THROWS(eval::load_features(dir / "missing.feat"));
}

TEST_CASE("vehicleid preset") {
  std::mt19937_64 rng(23);
  auto t = random_set(30, 4, 6, 1, rng);
  const auto a = eval::evaluate_vehicleid(t, 4, 3, 9, 5);
  const auto b = eval::evaluate_vehicleid(t, 4, 3, 9, 5);
  CHECK(a.map == b.map);
  CHECK(a.trials == 3);
  CHECK(a.protocol == "vehicleid-4");
  CHECK((a.map >= 0.0 && a.map <= 1.0));
}
