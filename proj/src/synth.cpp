#include "mikecoco/synth.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "mikecoco/error.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::synth {

namespace {

constexpr int kCells = 5;
constexpr int kCell = 4;

std::uniform_int_distribution<int> offset_dist(int radius) { return std::uniform_int_distribution<int>(-radius, radius); }

}  // namespace

std::vector<DomainStyle> default_styles(std::uint64_t seed) {
  DomainStyle a;
  a.cast[0] = 0.12;
  a.cast[1] = 0.0;
  a.cast[2] = -0.12;
  a.gradient = 0.0;
  a.texture = 0.15;
  a.texture_seed = derive_seed(seed, {11});
  DomainStyle b;
  b.cast[0] = -0.12;
  b.cast[1] = 0.08;
  b.cast[2] = 0.12;
  b.gradient = 0.0;
  b.texture = 0.15;
  b.texture_seed = derive_seed(seed, {12});
  return {a, b};
}

Image render_content(const SynthSpec& spec, int identity, int camera, int sequence) {
  const int size = spec.image_size;
  require(size >= kCells * kCell + 8, "synthetic image size must be at least 28 px");
  Image img(size, size, 3, 0.5);

  Rng glyph_rng(derive_seed(spec.seed, {1, static_cast<std::uint64_t>(identity)}));
  std::bernoulli_distribution bit(0.5);
  double cells[kCells][kCells];
  for (auto& row : cells)
    for (double& v : row) v = bit(glyph_rng) ? 0.65 : 0.35;
  std::uniform_int_distribution<int> mark_pos(0, kCells * kCell - 2);
  int marks[3][2];
  double mark_val[3];
  for (int m = 0; m < 3; ++m) {
    marks[m][0] = mark_pos(glyph_rng);
    marks[m][1] = mark_pos(glyph_rng);
    mark_val[m] = bit(glyph_rng) ? 0.8 : 0.2;
  }

  Rng cam_rng(derive_seed(spec.seed, {2, static_cast<std::uint64_t>(camera)}));
  auto cam_offset = offset_dist(2);
  const int cam_dy = cam_offset(cam_rng);
  const int cam_dx = cam_offset(cam_rng);
  Rng seq_rng(derive_seed(spec.seed, {3, static_cast<std::uint64_t>(identity), static_cast<std::uint64_t>(camera),
                                      static_cast<std::uint64_t>(sequence)}));
  auto jitter = offset_dist(1);
  const int top = (size - kCells * kCell) / 2 + cam_dy + jitter(seq_rng);
  const int left = (size - kCells * kCell) / 2 + cam_dx + jitter(seq_rng);

  std::normal_distribution<double> noise(0.0, 0.01);
  for (int y = 0; y < kCells * kCell; ++y)
    for (int x = 0; x < kCells * kCell; ++x) {
      double v = cells[y / kCell][x / kCell];
      for (int m = 0; m < 3; ++m) {
        if (y >= marks[m][0] && y < marks[m][0] + 2 && x >= marks[m][1] && x < marks[m][1] + 2) v = mark_val[m];
      }
      for (int c = 0; c < 3; ++c) img.at(c, top + y, left + x) = v;
    }
  for (double& v : img.data) v += noise(seq_rng);
  return img;
}

Image render_style(const DomainStyle& style, int image_size, std::uint64_t variant) {
  const auto mask = spectral::BandPassMask::build(image_size, image_size);
  const int v2 = mask.v2();
  const double n = static_cast<double>(image_size);
  int high = 0;
  for (int i = 0; i < image_size; ++i)
    for (int j = 0; j < image_size; ++j) high += std::max(i, j) > v2;
  const double coef_std = high ? style.texture * n / std::sqrt(static_cast<double>(high)) : 0.0;

  // The domain fixes the patterns; each image only rescales them.
  Rng pattern(style.texture_seed);
  Rng amp_rng(derive_seed(style.texture_seed, {variant}));
  std::uniform_real_distribution<double> amp(1.0 - style.variation, 1.0 + style.variation);
  const double grad_amp = amp(amp_rng);
  const double tex_amp = amp(amp_rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  spectral::Spectrum s;
  s.height = s.width = image_size;
  for (int c = 0; c < 3; ++c) {
    spectral::Grid g = spectral::Grid::Zero(image_size, image_size);
    g(0, 0) = style.cast[c] * n;
    g(0, 1) = grad_amp * style.gradient * n * gauss(pattern);
    g(1, 0) = grad_amp * style.gradient * n * gauss(pattern);
    g(1, 1) = grad_amp * style.gradient * n * gauss(pattern);
    for (int i = 0; i < image_size; ++i)
      for (int j = 0; j < image_size; ++j)
        if (std::max(i, j) > v2) g(i, j) = tex_amp * coef_std * gauss(pattern);
    s.channels.push_back(std::move(g));
  }
  return spectral::idct2(s);
}

Image render(const SynthSpec& spec, int identity, int camera, int sequence, int style) {
  const auto styles = spec.styles.empty() ? default_styles(spec.seed) : spec.styles;
  require(style >= 0 && style < static_cast<int>(styles.size()), "style index out of range");
  Image img = render_content(spec, identity, camera, sequence);
  const auto variant = derive_seed(spec.seed, {4, static_cast<std::uint64_t>(identity), static_cast<std::uint64_t>(camera),
                                               static_cast<std::uint64_t>(sequence)});
  const Image st = render_style(styles[static_cast<std::size_t>(style)], spec.image_size, variant);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] += st.data[i];
  clamp01(img);
  return img;
}

SynthManifests synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  require(spec.num_ids >= 2, "synthetic dataset needs at least 2 identities");
  require(spec.num_cameras >= 1 && spec.images_per_id_per_camera >= 1, "need positive camera and image counts");
  const auto styles = spec.styles.empty() ? default_styles(spec.seed) : spec.styles;
  require(spec.source_style != spec.target_style, "source and target styles must differ");
  require(spec.source_style >= 0 && spec.source_style < static_cast<int>(styles.size()) && spec.target_style >= 0 &&
              spec.target_style < static_cast<int>(styles.size()),
          "style index out of range");
  SynthSpec resolved = spec;
  resolved.styles = styles;

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  SynthManifests out;
  out.source = out_dir / "source.jsonl";
  out.target_query = out_dir / "target_query.jsonl";
  out.target_gallery = out_dir / "target_gallery.jsonl";
  std::ofstream src(out.source), query(out.target_query), gallery(out.target_gallery);
  if (!src || !query || !gallery) throw RuntimeFailure("cannot write manifests under " + out_dir.string());

  for (int id = 0; id < spec.num_ids; ++id) {
    const int raw_id = id + 1;
    for (const char* domain : {"source", "target"}) {
      const bool is_source = std::string(domain) == "source";
      const fs::path dir = out_dir / "images" / domain / std::to_string(raw_id);
      fs::create_directories(dir);
      for (int cam = 0; cam < spec.num_cameras; ++cam)
        for (int seq = 0; seq < spec.images_per_id_per_camera; ++seq) {
          const std::string name = "c" + std::to_string(cam + 1) + "_" + std::to_string(seq) + ".png";
          const fs::path file = dir / name;
          write_png(file, render(resolved, id, cam, seq, is_source ? spec.source_style : spec.target_style));
          nlohmann::json rec = {{"path", fs::relative(file, out_dir).generic_string()},
                                {"id", raw_id},
                                {"camera", cam + 1}};
          if (is_source) {
            rec["split"] = "train";
            src << rec.dump() << '\n';
            ++out.source_images;
          } else if (seq == 0) {
            rec["split"] = "query";
            query << rec.dump() << '\n';
            ++out.query_images;
          } else {
            rec["split"] = "gallery";
            gallery << rec.dump() << '\n';
            ++out.gallery_images;
          }
        }
    }
  }
  return out;
}

}  // namespace mikecoco::synth
