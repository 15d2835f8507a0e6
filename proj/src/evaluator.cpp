#include "mikecoco/evaluator.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "mikecoco/error.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::eval {

FeatureSet extract_features(const model::DualEncoder& encoder, const data::Dataset& dataset, int batch_size) {
  require(batch_size > 0, "batch size must be positive");
  const int size = encoder.config().image_size;
  FeatureSet out;
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<Image> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    ag::Matrix f = encoder.encode_image(pending).value();
    for (ag::Index r = 0; r < f.rows(); ++r) {
      const double n = f.row(r).norm();
      if (n <= 0.0) throw RuntimeFailure("image feature has zero norm");
      rows.push_back(f.row(r) / n);
    }
    pending.clear();
  };
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::shared_ptr<const Image> img;
    try {
      img = dataset.pixels(i);
    } catch (const std::exception&) {
      ++out.skipped;
      continue;
    }
    Image x = (img->height == size && img->width == size) ? *img : resize_bilinear(*img, size, size);
    pending.push_back(std::move(x));
    const auto& rec = dataset.records[i];
    out.identities.push_back(rec.raw_identity.value_or(-1));
    out.cameras.push_back(rec.raw_camera.value_or(-1));
    if (static_cast<int>(pending.size()) == batch_size) flush();
  }
  flush();
  out.features.resize(static_cast<ag::Index>(rows.size()), encoder.config().embed_dim);
  for (std::size_t r = 0; r < rows.size(); ++r) out.features.row(static_cast<ag::Index>(r)) = rows[r];
  return out;
}

namespace {

constexpr char kFeatureMagic[8] = {'M', 'K', 'C', 'O', 'F', 'E', 'A', 'T'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ValidationError("truncated feature file " + path.string());
  return v;
}

}  // namespace

void save_features(const std::filesystem::path& path, const FeatureSet& set) {
  const auto n = static_cast<std::uint64_t>(set.features.rows());
  require(set.identities.size() == n && set.cameras.size() == n, "feature set label arrays do not match row count");
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + tmp);
    os.write(kFeatureMagic, sizeof(kFeatureMagic));
    put(os, n);
    put(os, static_cast<std::uint64_t>(set.features.cols()));
    put(os, static_cast<std::uint64_t>(set.skipped));
    os.write(reinterpret_cast<const char*>(set.features.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(set.features.size())));
    for (int id : set.identities) put(os, static_cast<std::int32_t>(id));
    for (int cam : set.cameras) put(os, static_cast<std::int32_t>(cam));
    if (!os) throw RuntimeFailure("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

FeatureSet load_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open feature file " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kFeatureMagic, sizeof(magic)) != 0) {
    throw ValidationError(path.string() + " is not a feature file");
  }
  FeatureSet set;
  const auto n = get<std::uint64_t>(is, path);
  const auto d = get<std::uint64_t>(is, path);
  set.skipped = get<std::uint64_t>(is, path);
  set.features.resize(static_cast<ag::Index>(n), static_cast<ag::Index>(d));
  if (!is.read(reinterpret_cast<char*>(set.features.data()), static_cast<std::streamsize>(sizeof(double) * n * d))) {
    throw ValidationError("truncated feature file " + path.string());
  }
  for (std::uint64_t i = 0; i < n; ++i) set.identities.push_back(get<std::int32_t>(is, path));
  for (std::uint64_t i = 0; i < n; ++i) set.cameras.push_back(get<std::int32_t>(is, path));
  return set;
}

RankingResult rank_query(const Eigen::VectorXd& query, int query_id, int query_cam, const ag::Matrix& gallery,
                         const std::vector<int>& gallery_ids, const std::vector<int>& gallery_cams) {
  require(gallery.cols() == query.size(), "query and gallery feature widths differ");
  require(static_cast<std::size_t>(gallery.rows()) == gallery_ids.size() && gallery_ids.size() == gallery_cams.size(),
          "gallery label arrays do not match gallery size");
  const double qn = query.norm();
  require(qn > 0.0, "query feature has zero norm");

  std::vector<double> score(gallery_ids.size());
  std::vector<std::size_t> admissible;
  for (std::size_t g = 0; g < gallery_ids.size(); ++g) {
    const bool junk = query_cam >= 0 && gallery_cams[g] >= 0 && gallery_ids[g] == query_id && gallery_cams[g] == query_cam;
    if (junk) continue;
    const auto row = gallery.row(static_cast<ag::Index>(g));
    const double gn = row.norm();
    score[g] = gn > 0.0 ? row.dot(query.transpose()) / (gn * qn) : -2.0;
    admissible.push_back(g);
  }
  require(!admissible.empty(), "no admissible gallery entries after junk filtering");
  std::stable_sort(admissible.begin(), admissible.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

  RankingResult r;
  r.ordered_gallery = admissible;
  int hits = 0;
  long double precision_sum = 0.0L;  // extended precision so AP rounds once
  for (std::size_t pos = 0; pos < admissible.size(); ++pos) {
    if (gallery_ids[admissible[pos]] != query_id) continue;
    ++hits;
    precision_sum += static_cast<long double>(hits) / static_cast<long double>(pos + 1);
    if (!r.first_match_rank) r.first_match_rank = static_cast<int>(pos + 1);
  }
  r.ap = hits ? static_cast<double>(precision_sum / hits) : 0.0;
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return {{"map", map},
          {"rank1", rank1()},
          {"cmc", cmc},
          {"num_queries", num_queries},
          {"dropped_queries", dropped_queries},
          {"skipped_images", skipped_images},
          {"protocol", protocol},
          {"trials", trials}};
}

EvalReport compute_report(const std::vector<RankingResult>& rankings, int max_rank) {
  require(max_rank >= 1, "max rank must be at least 1");
  EvalReport rep;
  rep.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  double ap_sum = 0.0;
  for (const auto& r : rankings) {
    if (!r.valid()) {
      ++rep.dropped_queries;
      continue;
    }
    ++rep.num_queries;
    ap_sum += r.ap;
    for (int k = *r.first_match_rank; k <= max_rank; ++k) rep.cmc[static_cast<std::size_t>(k - 1)] += 1.0;
  }
  if (rep.num_queries == 0) throw ValidationError("no valid queries: every query lacks a positive in the gallery");
  rep.map = ap_sum / rep.num_queries;
  for (auto& c : rep.cmc) c /= rep.num_queries;
  return rep;
}

EvalReport evaluate(const FeatureSet& query, const FeatureSet& gallery, int max_rank) {
  require(query.features.rows() > 0, "empty query set");
  require(gallery.features.rows() > 0, "empty gallery set");
  std::vector<RankingResult> rankings;
  rankings.reserve(static_cast<std::size_t>(query.features.rows()));
  for (ag::Index q = 0; q < query.features.rows(); ++q) {
    auto r = rank_query(query.features.row(q).transpose(), query.identities[static_cast<std::size_t>(q)],
                        query.cameras[static_cast<std::size_t>(q)], gallery.features, gallery.identities,
                        gallery.cameras);
    r.query_index = static_cast<std::size_t>(q);
    rankings.push_back(std::move(r));
  }
  EvalReport rep = compute_report(rankings, max_rank);
  rep.skipped_images = query.skipped + gallery.skipped;
  return rep;
}

EvalReport evaluate_vehicleid(const FeatureSet& test, int gallery_ids, int trials, std::uint64_t seed, int max_rank) {
  require(trials >= 1, "need at least one trial");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < test.identities.size(); ++i) groups[test.identities[i]].push_back(i);
  std::vector<int> ids;
  for (const auto& [id, members] : groups) ids.push_back(id);
  const int take = gallery_ids <= 0 ? static_cast<int>(ids.size()) : gallery_ids;
  require(take <= static_cast<int>(ids.size()), "gallery size exceeds the identity count");

  EvalReport total;
  total.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    std::vector<int> chosen = ids;
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(static_cast<std::size_t>(take));
    FeatureSet q, g;
    std::vector<std::size_t> qi, gi;
    for (int id : chosen) {
      const auto& members = groups[id];
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      const std::size_t keep = pick(rng);
      for (std::size_t m = 0; m < members.size(); ++m) (m == keep ? gi : qi).push_back(members[m]);
    }
    auto fill = [&test](FeatureSet& s, const std::vector<std::size_t>& idx) {
      s.features.resize(static_cast<ag::Index>(idx.size()), test.features.cols());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        s.features.row(static_cast<ag::Index>(r)) = test.features.row(static_cast<ag::Index>(idx[r]));
        s.identities.push_back(test.identities[idx[r]]);
        s.cameras.push_back(-1);
      }
    };
    fill(q, qi);
    fill(g, gi);
    if (q.features.rows() == 0) throw ValidationError("VehicleID preset: every chosen identity has a single image");
    EvalReport rep = evaluate(q, g, max_rank);
    total.map += rep.map / trials;
    for (std::size_t r = 0; r < total.cmc.size(); ++r) total.cmc[r] += rep.cmc[r] / trials;
    total.num_queries += rep.num_queries;
    total.dropped_queries += rep.dropped_queries;
  }
  total.skipped_images = test.skipped;
  total.protocol = "vehicleid-" + std::to_string(take);
  total.trials = trials;
  return total;
}

}  // namespace mikecoco::eval
