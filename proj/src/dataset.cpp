#include "mikecoco/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <regex>
#include <set>

#include "json.hpp"
#include "mikecoco/error.hpp"

namespace mikecoco::data {

namespace fs = std::filesystem;
using nlohmann::json;

bool Dataset::has_cameras() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.camera >= 0; });
}

std::shared_ptr<const Image> Dataset::pixels(std::size_t index) const {
  require(index < records.size(), "record index out of range");
  {
    std::lock_guard lock(cache_mutex_);
    auto it = cache_.find(index);
    if (it != cache_.end()) return it->second;
  }
  auto img = std::make_shared<const Image>(read_image(records[index].path));
  std::lock_guard lock(cache_mutex_);
  return cache_.emplace(index, std::move(img)).first->second;
}

std::vector<std::vector<std::size_t>> Dataset::by_identity() const {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(num_ids()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].identity >= 0) groups[static_cast<std::size_t>(records[i].identity)].push_back(i);
  }
  return groups;
}

std::unique_ptr<Dataset> load_manifest(const fs::path& path, Domain domain) {
  std::ifstream in(path);
  if (!in) throw ValidationError("manifest not found: " + path.string());
  auto ds = std::make_unique<Dataset>();
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::set<std::string> seen_paths;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed manifest line (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("path") || !j["path"].is_string()) {
      throw ValidationError(where + ": manifest line needs a string 'path'");
    }
    ImageRecord r;
    r.domain = domain;
    fs::path p = j["path"].get<std::string>();
    r.path = p.is_absolute() ? p : base / p;
    if (!seen_paths.insert(r.path.lexically_normal().string()).second) {
      throw ValidationError(where + ": duplicate path entry " + p.string());
    }
    auto read_int = [&](const char* key) -> std::optional<int> {
      if (!j.contains(key) || j[key].is_null()) return std::nullopt;
      if (!j[key].is_number_integer()) throw ValidationError(where + ": field '" + key + "' must be an integer");
      return j[key].get<int>();
    };
    r.raw_identity = read_int("id");
    r.raw_camera = read_int("camera");
    if (j.contains("split") && j["split"].is_string()) r.split = j["split"].get<std::string>();
    if (domain == Domain::Source) {
      if (!r.raw_identity) throw ValidationError(where + ": source record is missing the 'id' field");
      if (!r.raw_camera) throw ValidationError(where + ": source record is missing the 'camera' field");
    }
    ds->records.push_back(std::move(r));
  }
  if (ds->records.empty()) throw ValidationError(path.string() + ": no records");

  std::set<int> ids;
  std::set<int> cams;
  for (const auto& r : ds->records) {
    if (r.raw_identity) ids.insert(*r.raw_identity);
    if (r.raw_camera) cams.insert(*r.raw_camera);
  }
  ds->identity_raw.assign(ids.begin(), ids.end());
  ds->camera_raw.assign(cams.begin(), cams.end());
  std::map<int, int> id_map;
  std::map<int, int> cam_map;
  for (std::size_t i = 0; i < ds->identity_raw.size(); ++i) id_map[ds->identity_raw[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < ds->camera_raw.size(); ++i) cam_map[ds->camera_raw[i]] = static_cast<int>(i);
  for (auto& r : ds->records) {
    if (r.raw_identity) r.identity = id_map.at(*r.raw_identity);
    if (r.raw_camera) r.camera = cam_map.at(*r.raw_camera);
  }
  return ds;
}

void write_manifest(const fs::path& path, const std::vector<ImageRecord>& records, const fs::path& relative_to) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write manifest " + path.string());
  for (const auto& r : records) {
    json j;
    j["path"] = relative_to.empty() ? r.path.string() : fs::relative(r.path, relative_to).generic_string();
    j["id"] = r.raw_identity ? json(*r.raw_identity) : json(nullptr);
    j["camera"] = r.raw_camera ? json(*r.raw_camera) : json(nullptr);
    j["split"] = r.split;
    out << j.dump() << '\n';
  }
}

MakeManifestResult scan_directory(const fs::path& root, const std::string& split) {
  require(fs::is_directory(root), "not a directory: " + root.string());
  static const std::regex name_re(R"(^[A-Za-z]*(\d+)_(\d+)\.(png|ppm|pgm|pnm)$)", std::regex::icase);
  static const std::regex id_re(R"(^\d+$)");
  MakeManifestResult result;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto rel = fs::relative(f, root);
    std::smatch m;
    const std::string name = f.filename().string();
    const std::string parent = rel.has_parent_path() ? rel.parent_path().string() : "";
    if (std::distance(rel.begin(), rel.end()) != 2 || !std::regex_match(parent, id_re) ||
        !std::regex_match(name, m, name_re)) {
      result.skipped.push_back(f);
      continue;
    }
    ImageRecord r;
    r.path = f;
    r.raw_identity = std::stoi(parent);
    r.raw_camera = std::stoi(m[1].str());
    r.split = split;
    result.records.push_back(std::move(r));
  }
  return result;
}

PkSampler::PkSampler(std::vector<std::vector<std::size_t>> groups, int p, int m, std::uint64_t seed)
    : groups_(std::move(groups)), p_(p), m_(m), rng_(seed) {
  require(p >= 1 && m >= 1, "sampler needs P >= 1 and M >= 1");
  require(static_cast<std::size_t>(p) <= groups_.size(),
          "sampler needs P <= number of identities (P=" + std::to_string(p) + ", identities=" +
              std::to_string(groups_.size()) + ")");
  std::size_t total = 0;
  for (const auto& g : groups_) {
    require(!g.empty(), "sampler: identity without images");
    total += g.size();
  }
  queues_.resize(groups_.size());
  batches_per_epoch_ = std::max<int>(1, static_cast<int>(total / static_cast<std::size_t>(p * m)));
}

int PkSampler::next_identity() {
  if (stream_pos_ == id_stream_.size()) {
    id_stream_.erase(id_stream_.begin(), id_stream_.begin() + static_cast<std::ptrdiff_t>(stream_pos_));
    stream_pos_ = 0;
    std::vector<int> perm(groups_.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::shuffle(perm.begin(), perm.end(), rng_);
    id_stream_.insert(id_stream_.end(), perm.begin(), perm.end());
  }
  return id_stream_[stream_pos_++];
}

std::vector<std::size_t> PkSampler::draw_images(int identity) {
  const auto& group = groups_[static_cast<std::size_t>(identity)];
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(m_));
  if (group.size() < static_cast<std::size_t>(m_)) {
    std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
    for (int i = 0; i < m_; ++i) out.push_back(group[pick(rng_)]);
    return out;
  }
  auto& queue = queues_[static_cast<std::size_t>(identity)];
  if (queue.size() < static_cast<std::size_t>(m_)) {
    queue = group;
    std::shuffle(queue.begin(), queue.end(), rng_);
  }
  for (int i = 0; i < m_; ++i) {
    out.push_back(queue.back());
    queue.pop_back();
  }
  return out;
}

std::vector<std::size_t> PkSampler::next() {
  std::vector<int> chosen;
  std::vector<int> deferred;
  while (static_cast<int>(chosen.size()) < p_) {
    const int id = next_identity();
    if (std::find(chosen.begin(), chosen.end(), id) != chosen.end()) {
      deferred.push_back(id);
    } else {
      chosen.push_back(id);
    }
  }
  id_stream_.insert(id_stream_.begin() + static_cast<std::ptrdiff_t>(stream_pos_), deferred.begin(), deferred.end());
  std::vector<std::size_t> batch;
  batch.reserve(static_cast<std::size_t>(p_ * m_));
  for (int id : chosen) {
    auto imgs = draw_images(id);
    batch.insert(batch.end(), imgs.begin(), imgs.end());
  }
  return batch;
}

Batch pk_sample(const Dataset& dataset, int p, int m, std::uint64_t seed) {
  PkSampler sampler(dataset.by_identity(), p, m, seed);
  Batch b;
  b.indices = sampler.next();
  for (auto i : b.indices) {
    b.images.push_back(*dataset.pixels(i));
    b.identities.push_back(dataset.records[i].identity);
    b.cameras.push_back(dataset.records[i].camera);
  }
  return b;
}

AugmentDraw sample_augment(const AugmentConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  AugmentDraw d;
  std::uniform_int_distribution<int> offset(-config.crop_padding, config.crop_padding);
  d.crop_dy = offset(rng);
  d.crop_dx = offset(rng);
  d.flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.flip_probability;
  d.angle = std::uniform_real_distribution<double>(-config.max_rotation_degrees, config.max_rotation_degrees)(rng);
  return d;
}

Image apply_augment(const Image& image, const AugmentConfig& config, const AugmentDraw& draw) {
  require(std::abs(draw.crop_dy) <= config.crop_padding && std::abs(draw.crop_dx) <= config.crop_padding,
          "crop offset exceeds padding");
  Image out = resize_bilinear(image, config.height, config.width);
  if (draw.crop_dy != 0 || draw.crop_dx != 0) {
    out = pad_crop(out, config.crop_padding, config.crop_padding + draw.crop_dy, config.crop_padding + draw.crop_dx);
  }
  if (draw.flip) out = hflip(out);
  out = rotate(out, draw.angle);
  clamp01(out);
  return out;
}

Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed) {
  return apply_augment(image, config, sample_augment(config, seed));
}

}  // namespace mikecoco::data
