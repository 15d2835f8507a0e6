#include "mikecoco/meka.hpp"

#include <cmath>

#include "mikecoco/error.hpp"

namespace mikecoco::meka {

Meka::Meka(const MekaConfig& config, std::uint64_t seed) : config_(config) {
  require(config.experts >= 2, "MEKA needs K >= 2 experts (the diversity loss divides by K^2 - K)");
  require(config.dim >= 1 && config.cameras >= 1, "MEKA needs positive feature width and camera count");
  Rng rng(seed);
  for (int k = 0; k < config.experts; ++k) {
    encoders_.push_back(
        nn::Linear::near_identity(params_, "meka.encoder" + std::to_string(k), config.dim, config.init_noise, rng));
    decoders_.push_back(
        nn::Linear::near_identity(params_, "meka.decoder" + std::to_string(k), config.dim, config.init_noise, rng));
  }
  discriminator_ = nn::Linear::create(params_, "meka.discriminator", config.dim, config.experts, rng);
  camera_map_ = nn::Linear::near_identity(params_, "meka.camera_map", config.dim, config.init_noise, rng);
  camera_classifier_ = nn::Linear::create(params_, "meka.camera_classifier", config.dim, config.cameras, rng);
}

ExpertBundle Meka::forward(const Tensor& features) const {
  require(features.cols() == config_.dim, "MEKA input width " + std::to_string(features.cols()) +
                                              " != configured " + std::to_string(config_.dim));
  require(features.value().allFinite(), "MEKA input contains non-finite values");
  ExpertBundle b;
  b.experts = config_.experts;
  b.batch = features.rows();
  for (int k = 0; k < config_.experts; ++k) {
    Tensor z = encoders_[static_cast<std::size_t>(k)](features);
    b.latents.push_back(z);
    b.unit_latents.push_back(ag::l2_normalize_rows(z));
    b.reconstructions.push_back(decoders_[static_cast<std::size_t>(k)](z));
    b.expert_logits.push_back(discriminator_(z));
  }
  b.camera_logits = camera_classifier_(camera_map_(features));
  return b;
}

Tensor loss_rc(const ExpertBundle& bundle, const Tensor& features) {
  Tensor total;
  for (const auto& rec : bundle.reconstructions) {
    Tensor mse = ag::mean(ag::square(ag::sub(features, rec)));
    total = total.defined() ? ag::add(total, mse) : mse;
  }
  return ag::scale(total, 1.0 / bundle.experts);
}

Tensor loss_ec(const ExpertBundle& bundle) {
  Tensor total;
  for (int k = 0; k < bundle.experts; ++k) {
    std::vector<int> labels(static_cast<std::size_t>(bundle.batch), k);
    Tensor ce = objectives::cross_entropy(bundle.expert_logits[static_cast<std::size_t>(k)],
                                          objectives::smoothed_targets(labels, bundle.experts, 0.0));
    total = total.defined() ? ag::add(total, ce) : ce;
  }
  return ag::scale(total, 1.0 / bundle.experts);
}

Tensor loss_al(const ExpertBundle& bundle) {
  const int K = bundle.experts;
  require(K >= 2, "adversarial diversity loss needs K >= 2");
  Tensor total;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      if (i == j) continue;
      Tensor d = ag::sum(ag::square(ag::sub(bundle.unit_latents[static_cast<std::size_t>(i)],
                                            bundle.unit_latents[static_cast<std::size_t>(j)])));
      total = total.defined() ? ag::add(total, d) : d;
    }
  return ag::scale(total, -1.0 / (static_cast<double>(K * K - K) * static_cast<double>(bundle.batch)));
}

Tensor loss_cc(const ExpertBundle& bundle, std::span<const int> cameras) {
  require(static_cast<ag::Index>(cameras.size()) == bundle.batch, "camera label count differs from batch size");
  for (int c : cameras) {
    if (c < 0) {
      throw ValidationError("camera label absent; disable L_CC (lambda1 = 0) for camera-free manifests");
    }
  }
  return objectives::cross_entropy(bundle.camera_logits,
                                   objectives::smoothed_targets(cameras, static_cast<int>(bundle.camera_logits.cols()), 0.0));
}

objectives::WeightedLoss loss_meka(const MekaLosses& parts, const MekaWeights& w) {
  objectives::WeightedLoss out;
  out.total = ag::add(ag::add(ag::add(parts.ec, ag::scale(parts.cc, w.lambda1)), ag::scale(parts.rc, w.lambda2)),
                      ag::scale(parts.al, w.lambda3));
  out.report.components = {
      {"L_EC", parts.ec.item()}, {"L_CC", parts.cc.item()}, {"L_RC", parts.rc.item()}, {"L_AL", parts.al.item()}};
  out.report.weighted_total = objectives::weighted_sum(
      {{1.0, parts.ec.item()}, {w.lambda1, parts.cc.item()}, {w.lambda2, parts.rc.item()}, {w.lambda3, parts.al.item()}});
  return out;
}

double mean_pairwise_distance(const ExpertBundle& bundle) {
  const int K = bundle.experts;
  double total = 0.0;
  int pairs = 0;
  for (int i = 0; i < K; ++i)
    for (int j = i + 1; j < K; ++j) {
      const auto& a = bundle.unit_latents[static_cast<std::size_t>(i)].value();
      const auto& b = bundle.unit_latents[static_cast<std::size_t>(j)].value();
      total += (a - b).rowwise().norm().mean();
      ++pairs;
    }
  return pairs ? total / pairs : 0.0;
}

}  // namespace mikecoco::meka
