#include "mikecoco/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "mikecoco/dataset.hpp"
#include "mikecoco/error.hpp"
#include "mikecoco/evaluator.hpp"
#include "mikecoco/rng.hpp"
#include "mikecoco/spectral.hpp"
#include "mikecoco/synth.hpp"
#include "mikecoco/trainer.hpp"

namespace mikecoco::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { Quiet, Normal, Verbose };

// JSON-lines logger: events go to stdout by level and, unfiltered, to --log.
class Logger {
 public:
  Logger(std::ostream& out, Level level, const std::string& file) : out_(out), level_(level) {
    if (!file.empty()) {
      file_.open(file);
      if (!file_) throw ValidationError("cannot open log file " + file);
    }
  }
  void emit(const json& event, Level needed = Level::Normal) {
    if (file_.is_open()) file_ << event.dump() << '\n' << std::flush;
    if (level_ >= needed) out_ << event.dump() << '\n' << std::flush;
  }

 private:
  std::ostream& out_;
  Level level_;
  std::ofstream file_;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  bool deterministic = false;
  std::string log;
  bool quiet = false;
  bool verbose = false;
};

struct MaskFlags {
  spectral::MaskParams p;
  void attach(CLI::App* app) {
    app->add_option("--k1", p.k1, "lowest cutoff ratio")->capture_default_str();
    app->add_option("--k2", p.k2, "middle cutoff ratio")->capture_default_str();
    app->add_option("--k3", p.k3, "highest cutoff ratio")->capture_default_str();
    app->add_option("--c1", p.c1, "slope coefficient of the lowest band")->capture_default_str();
    app->add_option("--c2", p.c2, "slope coefficient of the high band")->capture_default_str();
    app->add_option("--m2", p.m2, "constant weight of the middle band")->capture_default_str();
    app->add_option("--m4", p.m4, "constant weight above the top cutoff")->capture_default_str();
  }
};

spectral::DiiShift parse_shift(const std::string& s) {
  if (s == "source_mean") return spectral::DiiShift::SourceMean;
  if (s == "mid_gray") return spectral::DiiShift::MidGray;
  if (s == "raw") return spectral::DiiShift::Raw;
  throw ValidationError("--dii-shift must be source_mean, mid_gray or raw");
}

// ------------------------------------------------------------ make-manifest

struct MakeManifestArgs {
  std::string root;
  std::string out;
  std::string split = "train";
};

int cmd_make_manifest(const MakeManifestArgs& a, Logger& log, std::ostream& err) {
  auto res = data::scan_directory(a.root, a.split);
  for (const auto& s : res.skipped) err << "skipped: " << s.string() << '\n';
  if (res.records.empty()) throw ValidationError("no images matching <id>/<camera>_<seq>.<ext> under " + a.root);
  const fs::path out(a.out);
  data::write_manifest(out, res.records, out.has_parent_path() ? out.parent_path() : fs::path("."));
  log.emit({{"event", "make-manifest"}, {"records", res.records.size()}, {"skipped", res.skipped.size()},
            {"manifest", a.out}});
  return kOk;
}

// ------------------------------------------------------------ preprocess

struct PreprocessArgs {
  std::string manifest;
  std::string out_dir;
  std::string mode = "both";
  std::string shift = "source_mean";
  MaskFlags mask;
};

int cmd_preprocess(const PreprocessArgs& a, const Globals& g, Logger& log) {
  const std::uint64_t seed = g.seed.value_or(0);
  auto ds = data::load_manifest(a.manifest, data::Domain::Target);
  const bool want_dii = a.mode == "dii" || a.mode == "both";
  const bool want_spi = a.mode == "spi" || a.mode == "both";
  const auto shift = parse_shift(a.shift);
  const fs::path out(a.out_dir);
  if (want_dii) fs::create_directories(out / "dii");
  if (want_spi) fs::create_directories(out / "spi");
  std::ofstream sidecar(out / "preprocess.jsonl");
  if (!sidecar) throw RuntimeFailure("cannot write " + (out / "preprocess.jsonl").string());
  std::size_t written = 0;
  for (std::size_t i = 0; i < ds->size(); ++i) {
    const auto& rec = ds->records[i];
    const Image& x = *ds->pixels(i);
    const auto mask = spectral::BandPassMask::build(x.height, x.width, a.mask.p);
    const std::string stem = std::to_string(i) + "_" + rec.path.stem().string() + ".png";
    auto emit = [&](const std::string& kind, const Image& img, std::optional<std::uint64_t> noise_seed) {
      const fs::path file = out / kind / stem;
      write_png(file, img);
      json j = {{"path", fs::relative(file, out).generic_string()},
                {"source", rec.path.string()},
                {"mode", kind},
                {"id", rec.raw_identity ? json(*rec.raw_identity) : json(nullptr)},
                {"camera", rec.raw_camera ? json(*rec.raw_camera) : json(nullptr)},
                {"split", rec.split}};
      if (noise_seed) j["noise_seed"] = std::to_string(*noise_seed);
      sidecar << j.dump() << '\n';
      ++written;
    };
    if (want_dii) emit("dii", spectral::dii_to_pixels(spectral::extract_dii(x, mask), x, shift), std::nullopt);
    if (want_spi) {
      const std::uint64_t s = derive_seed(seed, {i});
      Image spi = spectral::make_spi(x, mask, s);
      clamp01(spi);
      emit("spi", spi, s);
    }
  }
  log.emit({{"event", "preprocess"}, {"records", ds->size()}, {"written", written}, {"mode", a.mode},
            {"sidecar", (out / "preprocess.jsonl").string()}});
  return kOk;
}

// ------------------------------------------------------------ inspect-spectrum

struct InspectArgs {
  std::string image;
  std::string out_dir;
  MaskFlags mask;
};

int cmd_inspect(const InspectArgs& a, Logger& log) {
  const Image x = read_image(a.image);
  const auto mask = spectral::BandPassMask::build(x.height, x.width, a.mask.p);
  const fs::path out(a.out_dir);
  fs::create_directories(out);
  Image heat(x.height, x.width, 1);
  for (int i = 0; i < x.height; ++i)
    for (int j = 0; j < x.width; ++j) heat.at(0, i, j) = mask(i, j);
  write_png(out / "mask.png", heat);
  write_png(out / "log_magnitude.png", spectral::log_magnitude(spectral::dct2(x)));
  log.emit({{"event", "inspect-spectrum"},
            {"height", x.height},
            {"width", x.width},
            {"v", {mask.v1(), mask.v2(), mask.v3()}},
            {"mask", (out / "mask.png").string()},
            {"log_magnitude", (out / "log_magnitude.png").string()}});
  return kOk;
}

// ------------------------------------------------------------ train

struct TrainArgs {
  int stage = 1;
  std::string manifest;
  std::string resume;
  std::string out = "runs";
  std::string backbone;
  std::string preset = "paper";
  std::vector<std::string> overrides;
};

int cmd_train(const TrainArgs& a, const Globals& g, Logger& log) {
  if (a.stage != 1 && a.stage != 2) throw ValidationError("--stage must be 1 or 2, got " + std::to_string(a.stage));
  train::TrainConfig cfg;
  if (a.preset == "desk") {
    cfg = train::TrainConfig::desk();
  } else if (a.preset != "paper") {
    throw ValidationError("--preset must be paper or desk");
  }
  if (!g.config.empty()) cfg = train::TrainConfig::parse_file(g.config, cfg);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.deterministic) {
    cfg.deterministic = true;
    cfg.workers = 1;
  }
  if (!a.backbone.empty()) cfg.backbone = a.backbone;
  cfg.validate();

  auto ds = data::load_manifest(a.manifest, data::Domain::Source);
  train::RunOptions opts;
  opts.out_dir = a.out;
  opts.on_event = [&log](const json& e) {
    const std::string kind = e.value("event", "");
    log.emit(e, kind == "step" ? Level::Verbose : Level::Normal);
  };
  if (a.stage == 1) {
    if (!a.resume.empty()) throw ValidationError("--resume takes a stage-1 checkpoint and only applies to --stage 2");
    train::train_stage1(cfg, *ds, opts);
  } else {
    if (a.resume.empty()) throw ValidationError("--stage 2 needs --resume <stage-1 checkpoint>");
    if (!fs::exists(a.resume)) throw ValidationError("checkpoint not found: " + a.resume);
    train::train_stage2(a.resume, *ds, opts, cfg);
  }
  return kOk;
}

// ------------------------------------------------------------ eval

struct EvalArgs {
  std::string checkpoint;
  std::string query;
  std::string gallery;
  std::string test;
  std::string out;
  std::string features_dir;
  std::string protocol = "single-query";
  int gallery_ids = 0;
  int trials = 10;
  int max_rank = 20;
};

int cmd_eval(const EvalArgs& a, const Globals& g, Logger& log, std::ostream& err) {
  if (!fs::exists(a.checkpoint)) throw ValidationError("checkpoint not found: " + a.checkpoint);
  const train::Model model = train::load_checkpoint(a.checkpoint);
  if (model.stage == "stage1") {
    err << "warning: evaluating a stage-1 checkpoint (image encoder not fine-tuned)\n";
  } else if (model.stage != "stage2") {
    throw ValidationError("checkpoint stage tag '" + model.stage + "' cannot be evaluated");
  }
  eval::EvalReport report;
  if (a.protocol == "single-query") {
    if (a.query.empty() || a.gallery.empty()) {
      throw ValidationError("single-query evaluation needs --query-manifest and --gallery-manifest");
    }
    auto q = data::load_manifest(a.query, data::Domain::Target);
    auto gal = data::load_manifest(a.gallery, data::Domain::Target);
    const auto qf = eval::extract_features(*model.encoder, *q);
    const auto gf = eval::extract_features(*model.encoder, *gal);
    if (!a.features_dir.empty()) {
      fs::create_directories(a.features_dir);
      eval::save_features(fs::path(a.features_dir) / "query.feat", qf);
      eval::save_features(fs::path(a.features_dir) / "gallery.feat", gf);
    }
    report = eval::evaluate(qf, gf, a.max_rank);
  } else if (a.protocol == "vehicleid") {
    const std::string test = a.test.empty() ? a.query : a.test;
    if (test.empty()) throw ValidationError("vehicleid evaluation needs --test-manifest");
    auto t = data::load_manifest(test, data::Domain::Target);
    const auto tf = eval::extract_features(*model.encoder, *t);
    if (!a.features_dir.empty()) {
      fs::create_directories(a.features_dir);
      eval::save_features(fs::path(a.features_dir) / "test.feat", tf);
    }
    report = eval::evaluate_vehicleid(tf, a.gallery_ids, a.trials, g.seed.value_or(0), a.max_rank);
  } else {
    throw ValidationError("--protocol must be single-query or vehicleid");
  }
  json j = report.to_json();
  j["checkpoint"] = a.checkpoint;
  j["checkpoint_stage"] = model.stage;
  j["config_hash"] = std::to_string(model.config.hash());
  if (!a.out.empty()) {
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream os(out);
    if (!os) throw RuntimeFailure("cannot write report " + a.out);
    os << j.dump(2) << '\n';
  }
  j["event"] = "eval";
  log.emit(j);
  return kOk;
}

// ------------------------------------------------------------ synth-dataset

struct SynthArgs {
  std::string out;
  int ids = 8;
  int cameras = 4;
  int images = 4;
  int size = 32;
};

int cmd_synth(const SynthArgs& a, const Globals& g, Logger& log) {
  synth::SynthSpec spec;
  spec.num_ids = a.ids;
  spec.num_cameras = a.cameras;
  spec.images_per_id_per_camera = a.images;
  spec.image_size = a.size;
  spec.seed = g.seed.value_or(0);
  const auto m = synth::synth_dataset(spec, a.out);
  log.emit({{"event", "synth-dataset"},
            {"source", m.source.string()},
            {"target_query", m.target_query.string()},
            {"target_gallery", m.target_gallery.string()},
            {"source_images", m.source_images},
            {"query_images", m.query_images},
            {"gallery_images", m.gallery_images}});
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage domain-generalizable re-identification training (MiKeCoCo)", "mikecoco"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "master seed");
  app.add_option("--config", g.config, "flat key=value training config");
  app.add_flag("--deterministic", g.deterministic, "single producer, fixed seeds");
  app.add_option("--log", g.log, "also write every JSON-lines event to this file");
  app.add_flag("--quiet", g.quiet, "errors only");
  app.add_flag("--verbose", g.verbose, "per-step events");

  MakeManifestArgs mm;
  auto* c_mm = app.add_subcommand("make-manifest", "scan <root>/<id>/<camera>_<seq>.<ext> into a manifest");
  c_mm->add_option("--root", mm.root, "image root")->required();
  c_mm->add_option("--out", mm.out, "manifest to write")->required();
  c_mm->add_option("--split", mm.split, "split tag")->capture_default_str();

  PreprocessArgs pp;
  auto* c_pp = app.add_subcommand("preprocess", "write DII / SPI images for a manifest");
  c_pp->add_option("--input-manifest", pp.manifest, "manifest")->required();
  c_pp->add_option("--output-dir", pp.out_dir, "output directory")->required();
  c_pp->add_option("--mode", pp.mode, "dii, spi or both")
      ->check(CLI::IsMember({"dii", "spi", "both"}))
      ->capture_default_str();
  c_pp->add_option("--dii-shift", pp.shift, "source_mean, mid_gray or raw")->capture_default_str();
  pp.mask.attach(c_pp);

  InspectArgs ins;
  auto* c_ins = app.add_subcommand("inspect-spectrum", "write the mask heatmap and log-magnitude spectrum");
  c_ins->add_option("--image", ins.image, "input image")->required();
  c_ins->add_option("--out-dir", ins.out_dir, "output directory")->required();
  ins.mask.attach(c_ins);

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "run training stage 1 or 2");
  c_tr->add_option("--stage", tr.stage, "1 or 2")->required();
  c_tr->add_option("--manifest", tr.manifest, "source manifest")->required();
  c_tr->add_option("--resume", tr.resume, "stage-1 checkpoint (stage 2)");
  c_tr->add_option("--out", tr.out, "output directory")->capture_default_str();
  c_tr->add_option("--backbone", tr.backbone, "toy or external:<weights-path>");
  c_tr->add_option("--preset", tr.preset, "paper or desk")->capture_default_str();
  c_tr->add_option("--set", tr.overrides, "config override key=value (repeatable)");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "retrieval evaluation of a checkpoint");
  c_ev->add_option("--checkpoint", ev.checkpoint, "stage-2 checkpoint")->required();
  c_ev->add_option("--query-manifest", ev.query, "query manifest");
  c_ev->add_option("--gallery-manifest", ev.gallery, "gallery manifest");
  c_ev->add_option("--test-manifest", ev.test, "test manifest (vehicleid protocol)");
  c_ev->add_option("--out", ev.out, "report JSON path");
  c_ev->add_option("--features-dir", ev.features_dir, "save extracted features here");
  c_ev->add_option("--protocol", ev.protocol, "single-query or vehicleid")->capture_default_str();
  c_ev->add_option("--gallery-ids", ev.gallery_ids, "vehicleid gallery identities (0 = all)")->capture_default_str();
  c_ev->add_option("--trials", ev.trials, "vehicleid trials")->capture_default_str();
  c_ev->add_option("--max-rank", ev.max_rank, "CMC length")->capture_default_str();

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth-dataset", "render the synthetic two-style dataset");
  c_sy->add_option("--out", sy.out, "output directory")->required();
  c_sy->add_option("--ids", sy.ids, "identities")->capture_default_str();
  c_sy->add_option("--cameras", sy.cameras, "cameras")->capture_default_str();
  c_sy->add_option("--images", sy.images, "images per identity per camera")->capture_default_str();
  c_sy->add_option("--size", sy.size, "image size in pixels")->capture_default_str();

  std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error[validation]: " << e.what() << '\n';
    err << app.help();
    return kValidation;
  }
  if (seed_opt->count()) g.seed = seed_value;

  try {
    Logger log(out, g.quiet ? Level::Quiet : (g.verbose ? Level::Verbose : Level::Normal), g.log);
    if (c_mm->parsed()) return cmd_make_manifest(mm, log, err);
    if (c_pp->parsed()) return cmd_preprocess(pp, g, log);
    if (c_ins->parsed()) return cmd_inspect(ins, log);
    if (c_tr->parsed()) return cmd_train(tr, g, log);
    if (c_ev->parsed()) return cmd_eval(ev, g, log, err);
    if (c_sy->parsed()) return cmd_synth(sy, g, log);
  } catch (const ValidationError& e) {
    err << "error[validation]: " << e.what() << '\n';
    return kValidation;
  } catch (const RuntimeFailure& e) {
    err << "error[runtime]: " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error[runtime]: " << e.what() << '\n';
    return kRuntime;
  }
  err << "error[validation]: no subcommand\n" << app.help();
  return kValidation;
}

}  // namespace mikecoco::cli
