#pragma once

// Synthetic two-style re-identification set for desk-scale experiments.
//
// Identity content is a luminance glyph (coarse block pattern plus a few small
// marks) placed with a per-camera offset. Style is added on top in the DCT
// domain and lives only in the bands the band-pass mask treats as non-causal:
// a per-channel colour cast at DC and a high-frequency texture above v2.
// Content never depends on the style, so a same-identity cross-style pair
// differs only in those bands. An r = 1 background gradient is available but
// off by default; at 32 px the mask weight there is 0.05, so it is content as
// far as STREAM is concerned.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mikecoco/dataset.hpp"
#include "mikecoco/image.hpp"
#include "mikecoco/spectral.hpp"

namespace mikecoco::synth {

struct DomainStyle {
  double cast[3] = {0.0, 0.0, 0.0};  // per-channel offset
  double gradient = 0.0;             // amplitude of the optional r = 1 background terms
  double texture = 0.0;              // rms pixel amplitude of the high-band texture
  double variation = 0.5;            // per-image amplitude factor drawn from [1 - v, 1 + v]
  std::uint64_t texture_seed = 0;    // fixes the domain's gradient and texture patterns
};

struct SynthSpec {
  int num_ids = 8;
  int num_cameras = 4;
  int images_per_id_per_camera = 4;
  int image_size = 32;
  std::vector<DomainStyle> styles;  // empty: two default styles
  int source_style = 0;
  int target_style = 1;
  std::uint64_t seed = 0;
};

std::vector<DomainStyle> default_styles(std::uint64_t seed);

// Style-free content for (identity, camera, sequence).
Image render_content(const SynthSpec& spec, int identity, int camera, int sequence);
// The domain's additive style pattern at one per-image amplitude (`variant` picks
// the draw); its spectrum is zero for 1 < r <= v2 of the paper mask.
Image render_style(const DomainStyle& style, int image_size, std::uint64_t variant);
Image render(const SynthSpec& spec, int identity, int camera, int sequence, int style);

struct SynthManifests {
  std::filesystem::path source;
  std::filesystem::path target_query;
  std::filesystem::path target_gallery;
  std::size_t source_images = 0;
  std::size_t query_images = 0;
  std::size_t gallery_images = 0;
};

// Writes <out>/images/{source,target}/<id>/c<cam>_<seq>.png and the three
// manifests. Query is sequence 0 of every (identity, camera); gallery the rest.
SynthManifests synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace mikecoco::synth
