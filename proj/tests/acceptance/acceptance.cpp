// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mikecoco/dataset.hpp"
#include "mikecoco/error.hpp"
#include "mikecoco/evaluator.hpp"
#include "mikecoco/meka.hpp"
#include "mikecoco/moe.hpp"
#include "mikecoco/objectives.hpp"
#include "mikecoco/spectral.hpp"
#include "mikecoco/synth.hpp"
#include "mikecoco/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mikecoco;
using ag::Index;
using ag::Matrix;
using ag::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

using Check = std::function<void(Outcome&)>;

Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  return testing_support::random_matrix(rows, cols, rng, scale);
}

void randomize(nn::ParameterSet& set, std::mt19937_64& rng, double scale = 0.5) {
  for (const auto& [name, t] : set.entries()) {
    Tensor handle = t;
    handle.mutable_value() = random_matrix(t.rows(), t.cols(), rng, scale);
  }
}

oracle::Mat rows_of(const Tensor& t) { return oracle::to_mat(t.value()); }

std::vector<oracle::Mat> blocks_of(const std::vector<Tensor>& ts) {
  std::vector<oracle::Mat> out;
  for (const auto& t : ts) out.push_back(rows_of(t));
  return out;
}

// text[a][k] from a row-major (N*K) x d table.
std::vector<oracle::Mat> text_of(const Matrix& table, int K) {
  const int N = static_cast<int>(table.rows()) / K;
  std::vector<oracle::Mat> out(static_cast<std::size_t>(N));
  for (int a = 0; a < N; ++a)
    for (int k = 0; k < K; ++k) {
      oracle::Vec row(static_cast<std::size_t>(table.cols()));
      for (Index j = 0; j < table.cols(); ++j) row[static_cast<std::size_t>(j)] = table(a * K + k, j);
      out[static_cast<std::size_t>(a)].push_back(row);
    }
  return out;
}

oracle::LinearW linear_of(const nn::ParameterSet& set, const std::string& name) {
  oracle::LinearW l;
  l.w = oracle::to_mat(set.at(name + ".weight").value());
  if (set.contains(name + ".bias")) l.b = oracle::to_mat(set.at(name + ".bias").value())[0];
  return l;
}

oracle::AttnW attn_of(const nn::ParameterSet& set, const std::string& name, int heads) {
  oracle::AttnW a;
  a.q = linear_of(set, name + ".q");
  a.k = linear_of(set, name + ".k");
  a.v = linear_of(set, name + ".v");
  a.o = linear_of(set, name + ".out");
  a.heads = heads;
  return a;
}

// ---- 1 ------------------------------------------------------------------------

void spectral_oracle(Outcome& o) {
  std::mt19937_64 rng(1);
  double worst_dct = 0.0, worst_round = 0.0, worst_parseval = 0.0;
  for (int h = 1; h <= 16; ++h)
    for (int w = 1; w <= 16; ++w) {
      spectral::Grid x(h, w);
      for (Index i = 0; i < x.size(); ++i) x.data()[i] = std::uniform_real_distribution<double>(-1, 1)(rng);
      const spectral::Grid c = spectral::dct2(x);
      const oracle::Mat ref = oracle::naive_dct2(oracle::to_mat(x));
      for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) worst_dct = std::max(worst_dct, std::abs(c(u, v) - ref[u][v]));
      worst_round = std::max(worst_round, (spectral::idct2(c) - x).cwiseAbs().maxCoeff());
      const double ex = x.squaredNorm(), ec = c.squaredNorm();
      worst_parseval = std::max(worst_parseval, std::abs(ex - ec) / ex);
    }
  o.detail << "max |dct - naive| " << worst_dct << ", round trip " << worst_round << ", Parseval rel "
           << worst_parseval;
  o.require(worst_dct <= 1e-8, "dct2 differs from the naive oracle");
  o.require(worst_round < 1e-6, "round trip error too large");
  o.require(worst_parseval <= 1e-5, "Parseval violated");
}

// ---- 2 ------------------------------------------------------------------------

void mask_table(Outcome& o) {
  spectral::MaskParams p;  // paper constants are the defaults
  const auto mask = spectral::BandPassMask::build(224, 224, p);
  o.require(mask.v1() == 1 && mask.v2() == 157 && mask.v3() == 224, "cutoffs differ from (1, 157, 224)");
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> idx(0, 223);
  int mismatches = 0, out_of_range = 0;
  for (int t = 0; t < 50; ++t) {
    // Spread draws over every band: a third of them inside r <= 2.
    const int i = t % 3 == 0 ? idx(rng) % 3 : idx(rng);
    const int j = t % 3 == 0 ? idx(rng) % 3 : idx(rng);
    const double expected = oracle::mask_weight(i, j, 1, 157, 224, 0.95, 0.3, 0.01, 0.5);
    if (mask.raw_weight(i, j) != expected) ++mismatches;
    const double w = mask(i, j);
    if (!(w >= 0.0 && w <= 1.0) || w != std::clamp(expected, 0.0, 1.0)) ++out_of_range;
  }
  o.detail << "50 positions, " << mismatches << " raw mismatches, " << out_of_range << " clamp violations";
  o.require(mismatches == 0, "pre-clamp values differ from the formula");
  o.require(out_of_range == 0, "post-clamp values wrong");
}

// ---- 3 ------------------------------------------------------------------------

void stream_identities(Outcome& o) {
  std::mt19937_64 rng(3);
  Image img(32, 32, 3);
  for (double& v : img.data) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto mask = spectral::BandPassMask::build(32, 32);

  spectral::Spectrum zero;
  zero.height = zero.width = 32;
  zero.channels.assign(3, spectral::Grid::Zero(32, 32));
  double spi_err = 0.0;
  const Image spi = spectral::make_spi_with_noise(img, mask, zero);
  for (std::size_t i = 0; i < img.data.size(); ++i) spi_err = std::max(spi_err, std::abs(spi.data[i] - img.data[i]));

  // DII spectrum plus M * spectrum recomposes the source spectrum.
  const Image dii = spectral::extract_dii(img, mask);
  const auto s_src = spectral::dct2(img);
  const auto s_dii = spectral::dct2(dii);
  double recompose = 0.0;
  for (int c = 0; c < 3; ++c) {
    const spectral::Grid sum = s_dii.channels[c] + mask.weights().cwiseProduct(s_src.channels[c]);
    recompose = std::max(recompose, (sum - s_src.channels[c]).cwiseAbs().maxCoeff());
  }

  const auto none = spectral::BandPassMask::constant(32, 32, 0.0);
  const Image dii0 = spectral::extract_dii(img, none);
  const Image spi0 = spectral::make_spi(img, none, 99);
  double ident = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    ident = std::max({ident, std::abs(dii0.data[i] - img.data[i]), std::abs(spi0.data[i] - img.data[i])});

  o.detail << "zero-noise SPI " << spi_err << ", recomposition " << recompose << ", zero-mask identity " << ident;
  o.require(spi_err <= 1e-6, "zero-noise SPI is not the identity");
  o.require(recompose <= 1e-6, "DII and masked part do not recompose the spectrum");
  o.require(ident <= 1e-6, "all-zero mask does not give the identity");
}

// ---- 4 ------------------------------------------------------------------------

struct LossInstance {
  int b, K, N, d, cams;
  std::vector<int> ids, cameras;
};

LossInstance draw_instance(std::mt19937_64& rng) {
  LossInstance in;
  in.b = std::uniform_int_distribution<int>(1, 4)(rng);
  in.K = std::uniform_int_distribution<int>(2, 3)(rng);
  in.N = std::uniform_int_distribution<int>(2, 5)(rng);
  in.d = 2 * std::uniform_int_distribution<int>(1, 4)(rng);
  in.cams = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int n = 0; n < in.b; ++n) {
    in.ids.push_back(std::uniform_int_distribution<int>(0, in.N - 1)(rng));
    in.cameras.push_back(std::uniform_int_distribution<int>(0, in.cams - 1)(rng));
  }
  return in;
}

void loss_oracles(Outcome& o) {
  std::mt19937_64 rng(4);
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double a, double b) {
    worst[name] = std::max(worst[name], std::abs(a - b));
  };
  for (int trial = 0; trial < 100; ++trial) {
    const LossInstance in = draw_instance(rng);
    meka::Meka m({in.K, in.d, in.cams, 0.01}, rng());
    randomize(m.params(), rng);
    const Tensor f = Tensor::constant(random_matrix(in.b, in.d, rng));
    const auto bundle = m.forward(f);

    // Independent forward pass for the MEKA pieces.
    const oracle::Mat fm = rows_of(f);
    std::vector<oracle::Mat> lat(in.K), rec(in.K), dis(in.K);
    const auto& P = m.params();
    const auto dlin = linear_of(P, "meka.discriminator");
    for (int k = 0; k < in.K; ++k) {
      const auto e = linear_of(P, "meka.encoder" + std::to_string(k));
      const auto h = linear_of(P, "meka.decoder" + std::to_string(k));
      for (const auto& row : fm) {
        lat[k].push_back(e(row));
        rec[k].push_back(h(lat[k].back()));
        dis[k].push_back(dlin(lat[k].back()));
      }
    }
    oracle::Mat cam;
    const auto cmap = linear_of(P, "meka.camera_map");
    const auto ccls = linear_of(P, "meka.camera_classifier");
    for (const auto& row : fm) cam.push_back(ccls(cmap(row)));

    note("L_RC", meka::loss_rc(bundle, f).item(), oracle::l_rc(rec, fm));
    note("L_EC", meka::loss_ec(bundle).item(), oracle::l_ec(dis));
    note("L_AL", meka::loss_al(bundle).item(), oracle::l_al(lat));
    note("L_CC", meka::loss_cc(bundle, in.cameras).item(), oracle::mean_ce(cam, in.cameras, 0.0));

    std::vector<Tensor> latents;
    for (int k = 0; k < in.K; ++k) latents.push_back(Tensor::constant(random_matrix(in.b, in.d, rng)));
    const Matrix table = random_matrix(in.N * in.K, in.d, rng);
    const double s = std::uniform_real_distribution<double>(1.0, 20.0)(rng);
    const double eps = std::uniform_real_distribution<double>(0.0, 0.3)(rng);
    const auto lat_o = blocks_of(latents);
    const auto text_o = text_of(table, in.K);
    const Tensor text = Tensor::constant(table);
    note("L_v2t", objectives::loss_v2t(latents, text, in.ids, s).item(), oracle::l_v2t(lat_o, text_o, in.ids, s));
    note("L_t2v", objectives::loss_t2v(latents, text, in.ids, s).item(), oracle::l_t2v(lat_o, text_o, in.ids, s));
    note("L_v2tce", objectives::loss_v2tce(latents, text, in.ids, s, eps).item(),
         oracle::l_v2tce(lat_o, text_o, in.ids, s, eps));

    const Tensor logits = Tensor::constant(random_matrix(in.b, in.N, rng, 3.0));
    note("L_ID", objectives::loss_id(logits, in.ids, eps).item(), oracle::mean_ce(rows_of(logits), in.ids, eps));
    const Tensor z_t = Tensor::constant(random_matrix(in.b, in.N, rng, 3.0));
    note("L_dis", moe::distill_loss(logits, z_t).item(), oracle::kl(rows_of(logits), rows_of(z_t)));
    note("L_dis reverse", moe::distill_loss(logits, z_t, true).item(), oracle::kl(rows_of(z_t), rows_of(logits)));

    moe::MoeTeacher teacher({in.K, in.d, in.N, 2}, rng());
    randomize(teacher.params(), rng);
    const Matrix vis = random_matrix(in.b * in.K, in.d, rng);
    const Matrix txt = random_matrix(in.b * in.K, in.d, rng);
    const auto out = teacher.forward(Tensor::constant(vis), Tensor::constant(txt), in.b);
    oracle::MoeW mw;
    mw.self_attn = attn_of(teacher.params(), "moe.self_attn", 2);
    mw.cross_attn = attn_of(teacher.params(), "moe.cross_attn", 2);
    mw.gate = linear_of(teacher.params(), "moe.gate");
    for (int k = 0; k < in.K; ++k) mw.heads.push_back(linear_of(teacher.params(), "moe.head" + std::to_string(k)));
    std::vector<oracle::Mat> vis_o(in.b), txt_o(in.b);
    const auto vrows = oracle::to_mat(vis), trows = oracle::to_mat(txt);
    for (int n = 0; n < in.b; ++n)
      for (int k = 0; k < in.K; ++k) {
        vis_o[n].push_back(vrows[n * in.K + k]);
        txt_o[n].push_back(trows[n * in.K + k]);
      }
    const auto zt_ref = oracle::teacher_logits(mw, vis_o, txt_o);
    double zt_err = 0.0;
    for (int n = 0; n < in.b; ++n)
      for (int c = 0; c < in.N; ++c) zt_err = std::max(zt_err, std::abs(out.z_t.value()(n, c) - zt_ref[n][c]));
    worst["Z_t"] = std::max(worst["Z_t"], zt_err);
  }
  double overall = 0.0;
  for (const auto& [name, err] : worst) {
    overall = std::max(overall, err);
    o.require(err <= 1e-6, name + " differs from its oracle by " + std::to_string(err));
  }
  o.detail << worst.size() << " quantities x 100 trials, max abs error " << overall;
}

// ---- 5 ------------------------------------------------------------------------

struct GradReport {
  double worst = 0.0;
  double worst_abs = 0.0;
  int nonzero = 0;  // tensors with a numeric gradient entry above 1e-4
  int tensors = 0;
  bool ok = true;
  std::vector<std::string> failures;
};

void grad_check(GradReport& r, const std::string& label, const std::function<Tensor()>& loss,
                const std::vector<nn::ParameterSet*>& groups) {
  for (auto* g : groups) {
    g->set_trainable(true);
    g->zero_grad();
  }
  ag::backward(loss());
  for (auto* g : groups)
    for (const auto& [name, t] : g->entries()) {
      auto res = testing_support::finite_difference([&] { return loss().item(); }, t, 1e-3, 1e-5, 1e-6, 6);
      ++r.tensors;
      r.nonzero += res.largest_numeric > 1e-4;
      r.worst = std::max(r.worst, res.worst_error);
      r.worst_abs = std::max(r.worst_abs, res.worst_abs);
      if (!res.ok) {
        r.ok = false;
        r.failures.push_back(label + ":" + name);
      }
    }
}

void gradient_suite(Outcome& o) {
  std::mt19937_64 rng(5);
  const int b = 4, K = 2, N = 3, cams = 2;
  const std::vector<int> ids = {0, 1, 2, 1};
  const std::vector<int> cameras = {0, 1, 1, 0};
  model::EncoderConfig ec;
  ec.image_size = 16;
  ec.patch = 8;
  ec.width = 8;
  ec.layers = 1;
  ec.heads = 2;
  ec.embed_dim = 8;
  ec.text_width = 8;
  ec.text_layers = 1;
  ec.text_heads = 2;
  ec.context_length = 16;
  const int d = ec.embed_dim;
  model::DualEncoder enc(ec, 7);
  Rng prng(8);
  model::PromptSet prompts(N, K, 2, ec.text_width, prng, 0.5);
  meka::Meka m({K, d, cams, 0.01}, 9);
  randomize(m.params(), rng);
  moe::MoeTeacher teacher({K, d, N, 2}, 10);
  randomize(teacher.params(), rng);
  nn::ParameterSet student;
  student.add("student.classifier.weight", random_matrix(d, N, rng));
  const nn::Linear cls{student.at("student.classifier.weight"), Tensor()};

  std::vector<Image> images;
  for (int n = 0; n < b; ++n) {
    Image img(16, 16, 3);
    for (double& v : img.data) v = std::uniform_real_distribution<double>(0, 1)(rng);
    images.push_back(img);
  }
  const Tensor feats = Tensor::constant(random_matrix(b, d, rng));
  const double s = 5.0;

  GradReport r;
  const meka::MekaWeights w;
  grad_check(r, "L_RC", [&] { return meka::loss_rc(m.forward(feats), feats); }, {&m.params()});
  grad_check(r, "L_EC", [&] { return meka::loss_ec(m.forward(feats)); }, {&m.params()});
  grad_check(r, "L_AL", [&] { return meka::loss_al(m.forward(feats)); }, {&m.params()});
  grad_check(r, "L_CC", [&] { return meka::loss_cc(m.forward(feats), cameras); }, {&m.params()});
  auto text_table = [&] { return enc.encode_prompt_table(prompts); };
  grad_check(
      r, "L_v2t", [&] { return objectives::loss_v2t(m.forward(feats).unit_latents, text_table(), ids, s); },
      {&m.params(), &prompts.params()});
  grad_check(
      r, "L_t2v", [&] { return objectives::loss_t2v(m.forward(feats).unit_latents, text_table(), ids, s); },
      {&m.params(), &prompts.params()});
  grad_check(
      r, "L_stage1",
      [&] {
        const auto bundle = m.forward(feats);
        const Tensor table = text_table();
        const auto total = meka::loss_meka({meka::loss_ec(bundle), meka::loss_cc(bundle, cameras),
                                            meka::loss_rc(bundle, feats), meka::loss_al(bundle)},
                                           w);
        return objectives::stage1_total(total, objectives::loss_v2t(bundle.unit_latents, table, ids, s),
                                        objectives::loss_t2v(bundle.unit_latents, table, ids, s))
            .total;
      },
      {&m.params(), &prompts.params()});

  // Stage 2: image encoder, student and teacher train; text side is constant.
  m.params().set_trainable(false);
  prompts.params().set_trainable(false);
  const Tensor fixed_text = Tensor::constant(text_table().value());
  auto image_feats = [&] { return enc.encode_image(images); };
  grad_check(
      r, "L_v2tce",
      [&] { return objectives::loss_v2tce(m.forward(image_feats()).unit_latents, fixed_text, ids, s, 0.1); },
      {&enc.image().params()});
  grad_check(r, "L_ID", [&] { return objectives::loss_id(cls(image_feats()), ids, 0.1); },
             {&enc.image().params(), &student});
  auto teacher_out = [&](const Tensor& f) {
    const auto bundle = m.forward(f);
    std::vector<Index> order;
    for (int n = 0; n < b; ++n)
      for (int k = 0; k < K; ++k) order.push_back(static_cast<Index>(k) * b + n);
    const Tensor visual = ag::gather_rows(ag::concat_rows(bundle.latents), order);
    std::vector<Index> text_rows;
    for (int n = 0; n < b; ++n)
      for (int k = 0; k < K; ++k) text_rows.push_back(static_cast<Index>(ids[n]) * K + k);
    return teacher.forward(visual, ag::gather_rows(fixed_text, text_rows), b).z_t;
  };
  grad_check(
      r, "L_dis",
      [&] {
        const Tensor f = image_feats();
        return moe::distill_loss(cls(f), teacher_out(f));
      },
      {&enc.image().params(), &student, &teacher.params()});
  grad_check(
      r, "L_stage2",
      [&] {
        const Tensor f = image_feats();
        const Tensor z_s = cls(f);
        return objectives::stage2_total(objectives::loss_id(z_s, ids, 0.1),
                                        objectives::loss_v2tce(m.forward(f).unit_latents, fixed_text, ids, s, 0.1),
                                        moe::distill_loss(z_s, teacher_out(f)), 0.25, 1.8)
            .total;
      },
      {&enc.image().params(), &student, &teacher.params()});

  o.detail << r.tensors << " parameter tensors checked (" << r.nonzero
           << " with a non-negligible gradient), worst abs difference " << r.worst_abs
           << ", worst relative error above the floor " << r.worst;
  o.require(r.nonzero * 2 > r.tensors, "most gradients are negligible; the check is vacuous");
  for (const auto& f : r.failures) o.require(false, "gradient mismatch at " + f);
}

// ---- 6 ------------------------------------------------------------------------

void analytic_values(Outcome& o) {
  const int K = 3, cams = 4, N = 5, b = 3, d = 6;
  meka::Meka m({K, d, cams, 0.01}, 1);
  for (const char* name : {"meka.discriminator", "meka.camera_classifier"}) {
    for (const char* part : {".weight", ".bias"}) {
      Tensor t = m.params().at(std::string(name) + part);
      t.mutable_value().setZero();
    }
  }
  std::mt19937_64 rng(6);
  const Tensor f = Tensor::constant(random_matrix(b, d, rng));
  const auto bundle = m.forward(f);
  const double ec = meka::loss_ec(bundle).item();
  const std::vector<int> cameras = {0, 3, 1};
  const double cc = meka::loss_cc(bundle, cameras).item();
  const std::vector<int> ids = {4, 0, 2};
  const double id = objectives::loss_id(Tensor::constant(Matrix::Zero(b, N)), ids, 0.1).item();
  o.require(std::abs(ec - std::log(K)) <= 1e-6, "uniform L_EC != ln K");
  o.require(std::abs(cc - std::log(cams)) <= 1e-6, "uniform L_CC != ln N_cam");
  o.require(std::abs(id - std::log(N)) <= 1e-6, "uniform L_ID != ln N_id");

  meka::ExpertBundle anti;
  anti.experts = 2;
  anti.batch = 2;
  const Matrix u = random_matrix(2, 4, rng);
  anti.unit_latents = {ag::l2_normalize_rows(Tensor::constant(u)), ag::l2_normalize_rows(Tensor::constant(-u))};
  anti.latents = anti.unit_latents;
  const double al = meka::loss_al(anti).item();
  o.require(std::abs(al + 4.0) <= 1e-12, "antipodal L_AL != -4");

  const Tensor z = Tensor::constant(random_matrix(b, N, rng, 3.0));
  const double kl = moe::distill_loss(z, z).item();
  o.require(std::abs(kl) <= 1e-12, "KL(p, p) != 0");

  const Tensor one = Tensor::constant(Matrix::Ones(1, 1));
  const Tensor zero = Tensor::constant(Matrix::Zero(1, 1));
  const double meka_total = meka::loss_meka({one, one, one, one}, meka::MekaWeights{}).report.weighted_total;
  const double stage2 = objectives::stage2_total(one, one, zero, 0.25, 1.8).report.weighted_total;
  o.require(meka_total == 11.3, "MEKA unit total is not 11.3");
  o.require(stage2 == 2.05, "stage-2 unit total is not 2.05");
  char buf[256];
  std::snprintf(buf, sizeof buf, "ln K %.9f, ln N_cam %.9f, ln N_id %.9f, L_AL %.12f, KL %.1e, totals %.17g / %.17g",
                ec, cc, id, al, kl, meka_total, stage2);
  o.detail << buf;
}

// ---- shared synthetic setup for 7, 9, 10 ----------------------------------------

struct SynthSet {
  fs::path dir;
  synth::SynthManifests manifests;
};

SynthSet make_synth(const fs::path& root, std::uint64_t seed) {
  SynthSet s;
  s.dir = root / ("synth_" + std::to_string(seed));
  fs::remove_all(s.dir);
  synth::SynthSpec spec;
  spec.seed = seed;
  s.manifests = synth::synth_dataset(spec, s.dir);
  return s;
}

fs::path scratch_root() {
  const fs::path p = fs::temp_directory_path() / "mikecoco_acceptance";
  fs::create_directories(p);
  return p;
}

// ---- 7 ------------------------------------------------------------------------

void freeze_contracts(Outcome& o) {
  const auto set = make_synth(scratch_root(), 70);
  const auto source = data::load_manifest(set.manifests.source, data::Domain::Source);
  auto config = train::TrainConfig::desk();
  config.epochs_stage1 = 2;
  config.epochs_stage2 = 2;
  config.seed = 7;
  const fs::path out = scratch_root() / "freeze";
  fs::remove_all(out);
  train::RunOptions options{out, {}};

  const auto fresh = train::make_encoder(config);
  const auto s1 = train::train_stage1(config, *source, options);
  const auto m1 = train::load_checkpoint(s1.checkpoint);
  const bool image_same = m1.encoder->image().params().hash() == fresh->image().params().hash();
  const bool text_same = m1.encoder->text().params().hash() == fresh->text().params().hash();
  o.require(image_same && text_same, "stage 1 changed encoder parameters");
  o.require(m1.meka->params().hash() != meka::Meka({config.experts, 64, 4, 0.01}, 0).params().hash(),
            "stage 1 did not produce MEKA parameters");

  const auto s2 = train::train_stage2(s1.checkpoint, *source, options);
  const auto m2 = train::load_checkpoint(s2.checkpoint);
  const bool text2 = m2.encoder->text().params().hash() == m1.encoder->text().params().hash();
  const bool prompts2 = m2.prompts->params().hash() == m1.prompts->params().hash();
  const bool meka2 = m2.meka->params().hash() == m1.meka->params().hash();
  const bool image_moved = m2.encoder->image().params().hash() != m1.encoder->image().params().hash();
  o.require(text2, "stage 2 changed the text encoder");
  o.require(prompts2, "stage 2 changed the prompts");
  o.require(meka2, "stage 2 changed MEKA");
  o.require(image_moved, "stage 2 did not update the image encoder");
  o.detail << "stage 1 encoder bit-identical " << (image_same && text_same) << ", stage 2 text/prompts/MEKA "
           << (text2 && prompts2 && meka2) << ", image encoder updated " << image_moved;
}

// ---- 9 ------------------------------------------------------------------------

constexpr int kDirectionalStage1Epochs = 10;
constexpr int kDirectionalStage2Epochs = 200;

double random_rank1(const data::Dataset& query, const data::Dataset& gallery) {
  double total = 0.0;
  int valid = 0;
  for (const auto& q : query.records) {
    int positives = 0, admissible = 0;
    for (const auto& g : gallery.records) {
      const bool junk = q.raw_camera && g.raw_camera && *q.raw_camera == *g.raw_camera &&
                        *q.raw_identity == *g.raw_identity;
      if (junk) continue;
      ++admissible;
      positives += *g.raw_identity == *q.raw_identity;
    }
    if (positives == 0) continue;
    total += static_cast<double>(positives) / admissible;
    ++valid;
  }
  return total / valid;
}

double run_pipeline(const SynthSet& set, std::uint64_t seed, bool stream, int experts, const std::string& tag,
                    double* distance_initial = nullptr, double* distance_final = nullptr) {
  const auto source = data::load_manifest(set.manifests.source, data::Domain::Source);
  auto config = train::TrainConfig::desk();
  config.seed = seed;
  config.stream = stream;
  config.experts = experts;
  config.epochs_stage1 = kDirectionalStage1Epochs;
  config.epochs_stage2 = kDirectionalStage2Epochs;
  config.eval_query = set.manifests.target_query.string();
  config.eval_gallery = set.manifests.target_gallery.string();
  const fs::path out = scratch_root() / tag;
  fs::remove_all(out);
  train::RunOptions options{out, {}};
  const auto s1 = train::train_stage1(config, *source, options);
  if (distance_initial) *distance_initial = s1.latent_distance_initial;
  if (distance_final) *distance_final = s1.latent_distance_final;
  const auto s2 = train::train_stage2(s1.checkpoint, *source, options);
  if (!s2.report) throw RuntimeFailure("stage 2 produced no evaluation report");
  return s2.report->rank1();
}

void directional(Outcome& o) {
  const auto set = make_synth(scratch_root(), 0);
  const auto q = data::load_manifest(set.manifests.target_query, data::Domain::Target);
  const auto g = data::load_manifest(set.manifests.target_gallery, data::Domain::Target);
  const double chance = random_rank1(*q, *g);
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double with = run_pipeline(set, seed, true, 2, "dir_stream_" + std::to_string(seed));
    const double without = run_pipeline(set, seed, false, 2, "dir_raw_" + std::to_string(seed));
    const bool win = with > without && with > chance;
    wins += win;
    char buf[128];
    std::snprintf(buf, sizeof buf, "seed %d: STREAM %.3f raw %.3f; ", static_cast<int>(seed), with, without);
    o.detail << buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "chance %.3f; %d/3 seeds won", chance, wins);
  o.detail << buf;
  o.require(wins >= 2, "STREAM did not beat raw/raw and chance in a majority of seeds");
}

// ---- 10 -----------------------------------------------------------------------

void expert_count(Outcome& o) {
  const auto set = make_synth(scratch_root(), 0);
  for (int K : {2, 3}) {
    double d0 = 0.0, d1 = 0.0;
    const double r1 = run_pipeline(set, 0, true, K, "experts_" + std::to_string(K), &d0, &d1);
    char buf[128];
    std::snprintf(buf, sizeof buf, "K=%d rank1 %.3f distance %.4f -> %.4f; ", K, r1, d0, d1);
    o.detail << buf;
    o.require(std::isfinite(r1) && r1 >= 0.0 && r1 <= 1.0, "K=" + std::to_string(K) + " report invalid");
    o.require(d1 > d0, "K=" + std::to_string(K) + " latent distance did not increase");
  }
}

// ---- 8 ------------------------------------------------------------------------

void metric_oracle(Outcome& o) {
  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int nq = std::uniform_int_distribution<int>(1, 6)(rng);
    const int ng = std::uniform_int_distribution<int>(3, 15)(rng);
    const int d = 4, ids = 4, cams = 3;
    eval::FeatureSet q, g;
    // Coarse values make exact score ties common, exercising the tie order.
    auto coarse = [&](int n) {
      Matrix m(n, d);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::uniform_int_distribution<int>(-2, 2)(rng);
      for (Index i = 0; i < n; ++i)
        if (m.row(i).norm() == 0) m(i, 0) = 1;
      return m;
    };
    q.features = coarse(nq);
    g.features = coarse(ng);
    for (int i = 0; i < nq; ++i) {
      q.identities.push_back(std::uniform_int_distribution<int>(0, ids - 1)(rng));
      q.cameras.push_back(std::uniform_int_distribution<int>(0, cams - 1)(rng));
    }
    for (int i = 0; i < ng; ++i) {
      g.identities.push_back(std::uniform_int_distribution<int>(0, ids - 1)(rng));
      g.cameras.push_back(std::uniform_int_distribution<int>(0, cams - 1)(rng));
    }
    const auto ref = oracle::brute_force_eval(oracle::to_mat(q.features), q.identities, q.cameras,
                                              oracle::to_mat(g.features), g.identities, g.cameras, 5);
    if (ref.valid == 0) {
      bool threw = false;
      try {
        eval::evaluate(q, g, 5);
      } catch (const ValidationError&) {
        threw = true;
      }
      o.require(threw, "no valid query should be a validation error");
      continue;
    }
    const auto rep = eval::evaluate(q, g, 5);
    worst = std::max(worst, std::abs(rep.map - ref.map));
    for (int r = 0; r < 5; ++r) worst = std::max(worst, std::abs(rep.cmc[r] - ref.cmc[r]));
    o.require(rep.num_queries == ref.valid, "valid query count differs");
  }
  o.require(worst <= 1e-9, "mAP/CMC differ from brute force");

  // Five gallery items, positives at ranks 1 and 3: AP = (1/1 + 2/3) / 2 = 5/6.
  Eigen::VectorXd query(2);
  query << 1, 0;
  Matrix gallery(5, 2);
  gallery << 0.0, 1.0, 0.6, 0.8, 1.0, 0.0, 0.8, 0.6, 0.28, 0.96;
  const auto res = eval::rank_query(query, 1, -1, gallery, {4, 1, 1, 2, 3}, {-1, -1, -1, -1, -1});
  o.require(res.ordered_gallery == std::vector<std::size_t>{2, 3, 1, 4, 0}, "hand case ranked in the wrong order");
  o.require(res.ap == 5.0 / 6.0, "hand-computed AP = 5/6 case failed");
  char buf[128];
  std::snprintf(buf, sizeof buf, "50 instances, max abs error %.2e; AP case %.17g", worst, res.ap);
  o.detail << buf;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, Check>> criteria = {
      {1, spectral_oracle},  {2, mask_table},      {3, stream_identities}, {4, loss_oracles}, {5, gradient_suite},
      {6, analytic_values},  {7, freeze_contracts}, {8, metric_oracle},     {9, directional},  {10, expert_count},
  };
  const std::map<int, double> budget_s = {{1, 10}, {2, 1}, {3, 5}, {4, 60}, {5, 120}, {7, 300}, {9, 900}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));

  int failed = 0;
  for (const auto& [id, check] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      check(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget_s.count(id) && secs > budget_s.at(id)) {
      o.require(false, "runtime " + std::to_string(secs) + " s over the " + std::to_string(budget_s.at(id)) + " s budget");
    }
    failed += !o.pass;
    std::printf("criterion %2d: %s (%.1f s) %s\n", id, o.pass ? "PASS" : "FAIL", secs, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
