#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mikecoco/image.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::data {

enum class Domain { Source, Target };

struct ImageRecord {
  std::filesystem::path path;
  std::optional<int> raw_identity;
  std::optional<int> raw_camera;
  int identity = -1;  // dense, in [0, num_ids)
  int camera = -1;    // dense, in [0, num_cameras); -1 when absent
  std::string split;
  Domain domain = Domain::Source;
};

class Dataset {
 public:
  std::vector<ImageRecord> records;
  std::vector<int> identity_raw;  // dense id -> raw id
  std::vector<int> camera_raw;    // dense camera -> raw camera

  int num_ids() const { return static_cast<int>(identity_raw.size()); }
  int num_cameras() const { return static_cast<int>(camera_raw.size()); }
  std::size_t size() const { return records.size(); }
  bool has_cameras() const;

  // Loads the image on first use and keeps it; safe to call from several threads.
  std::shared_ptr<const Image> pixels(std::size_t index) const;
  // record indices grouped by dense identity
  std::vector<std::vector<std::size_t>> by_identity() const;

 private:
  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::size_t, std::shared_ptr<const Image>> cache_;
};

// JSON-lines manifest: {"path": str, "id": int, "camera": int, "split": str} per line.
// Relative paths resolve against the manifest's directory. Source-domain manifests
// must carry id and camera on every line.
std::unique_ptr<Dataset> load_manifest(const std::filesystem::path& path, Domain domain);

void write_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& records,
                    const std::filesystem::path& relative_to);

struct MakeManifestResult {
  std::vector<ImageRecord> records;
  std::vector<std::filesystem::path> skipped;
};
// Walks <root>/<id>/<camera>_<seq>.<ext>; camera may carry a letter prefix ("c003").
MakeManifestResult scan_directory(const std::filesystem::path& root, const std::string& split);

struct Batch {
  std::vector<Image> images;
  std::vector<int> identities;
  std::vector<int> cameras;
  std::vector<std::size_t> indices;
  int epoch = 0;
};

// Identity-balanced P x M sampler.
//
// Identities are drawn from a stream of concatenated random permutations, so every
// identity appears once before any repeats; a batch takes the next P distinct
// identities from the stream. Per identity, images come from a shuffled queue
// without replacement (reshuffled when exhausted); identities with fewer than M
// images draw their M slots with replacement.
class PkSampler {
 public:
  PkSampler(std::vector<std::vector<std::size_t>> groups, int p, int m, std::uint64_t seed);

  // Record indices of the next batch, identity-major (P blocks of M).
  std::vector<std::size_t> next();
  // Batches per epoch: max(1, floor(total images / (P*M))).
  int batches_per_epoch() const { return batches_per_epoch_; }
  int p() const { return p_; }
  int m() const { return m_; }

 private:
  int next_identity();
  std::vector<std::size_t> draw_images(int identity);

  std::vector<std::vector<std::size_t>> groups_;
  std::vector<std::vector<std::size_t>> queues_;
  std::vector<int> id_stream_;
  std::size_t stream_pos_ = 0;
  int p_;
  int m_;
  int batches_per_epoch_ = 1;
  Rng rng_;
};

// First batch of a fresh sampler over `dataset`.
Batch pk_sample(const Dataset& dataset, int p, int m, std::uint64_t seed);

struct AugmentConfig {
  int height = 32;
  int width = 32;
  int crop_padding = 10;
  double flip_probability = 0.5;
  double max_rotation_degrees = 10.0;
};

struct AugmentDraw {
  int crop_dy = 0;  // crop offset relative to the centred window, in [-padding, padding]
  int crop_dx = 0;
  bool flip = false;
  double angle = 0.0;
};

AugmentDraw sample_augment(const AugmentConfig& config, std::uint64_t seed);
// resize -> pad/crop -> optional flip -> rotation, with explicit parameters.
Image apply_augment(const Image& image, const AugmentConfig& config, const AugmentDraw& draw);
Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed);

}  // namespace mikecoco::data
