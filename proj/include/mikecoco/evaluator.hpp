#pragma once

// Single-query retrieval evaluation: feature extraction on original images,
// cosine ranking with the same-identity same-camera junk rule, AP and CMC.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mikecoco/dataset.hpp"
#include "mikecoco/encoders.hpp"

namespace mikecoco::eval {

struct FeatureSet {
  ag::Matrix features;  // n x d, unit rows
  std::vector<int> identities;
  std::vector<int> cameras;  // -1 when absent
  std::size_t skipped = 0;   // unreadable images left out
};

// Encodes every record (resized to the encoder resolution, no STREAM) and
// unit-normalises the rows. Raw identity labels are kept so query and gallery
// manifests loaded separately stay comparable.
FeatureSet extract_features(const model::DualEncoder& encoder, const data::Dataset& dataset, int batch_size = 64);

void save_features(const std::filesystem::path& path, const FeatureSet& set);
FeatureSet load_features(const std::filesystem::path& path);

struct RankingResult {
  std::size_t query_index = 0;
  std::vector<std::size_t> ordered_gallery;  // admissible gallery indices, best first
  double ap = 0.0;
  std::optional<int> first_match_rank;  // 1-based; empty when the query has no positive
  bool valid() const { return first_match_rank.has_value(); }
};

// Gallery entries sharing identity and camera with the query are dropped when
// both camera labels are known (>= 0).
RankingResult rank_query(const Eigen::VectorXd& query, int query_id, int query_cam, const ag::Matrix& gallery,
                         const std::vector<int>& gallery_ids, const std::vector<int>& gallery_cams);

struct EvalReport {
  double map = 0.0;
  std::vector<double> cmc;  // cmc[r-1] = fraction with first match at rank <= r
  int num_queries = 0;      // queries that entered the averages
  int dropped_queries = 0;  // no admissible positive
  std::size_t skipped_images = 0;
  std::string protocol = "single-query";
  int trials = 1;

  double rank1() const { return cmc.empty() ? 0.0 : cmc[0]; }
  nlohmann::json to_json() const;
};

EvalReport compute_report(const std::vector<RankingResult>& rankings, int max_rank = 20);

EvalReport evaluate(const FeatureSet& query, const FeatureSet& gallery, int max_rank = 20);

// VehicleID-style preset: per trial, `gallery_ids` identities (0 = all) are drawn,
// one image of each goes into the gallery and the rest become queries. Metrics
// are averaged over trials; no junk rule is applied.
EvalReport evaluate_vehicleid(const FeatureSet& test, int gallery_ids, int trials, std::uint64_t seed,
                              int max_rank = 20);

}  // namespace mikecoco::eval
