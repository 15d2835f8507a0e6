#pragma once

// Multi-expert knowledge adversarial learning.
//
// K single-layer autoencoders (e_k, h_k) map the global image feature into K
// latent perspectives; a shared K-way discriminator D scores which encoder
// produced a latent (perspective label = encoder index); a camera branch
// D_g(e_g(f)) is trained on camera labels. Latents are unit-normalised before
// the diversity loss so it stays within [-4, 0].

#include <optional>
#include <span>
#include <vector>

#include "mikecoco/nn.hpp"
#include "mikecoco/objectives.hpp"

namespace mikecoco::meka {

using ag::Index;
using ag::Tensor;

struct MekaConfig {
  int experts = 2;
  int dim = 64;
  int cameras = 1;
  double init_noise = 0.01;
};

struct ExpertBundle {
  int experts = 0;
  Index batch = 0;
  std::vector<Tensor> latents;          // K entries, each b x d: e_k(f)
  std::vector<Tensor> unit_latents;     // row-normalised latents
  std::vector<Tensor> reconstructions;  // h_k(e_k(f))
  std::vector<Tensor> expert_logits;    // D(e_k(f)), each b x K
  Tensor camera_logits;                 // D_g(e_g(f)), b x cameras
};

class Meka {
 public:
  Meka(const MekaConfig& config, std::uint64_t seed);

  const MekaConfig& config() const { return config_; }
  ExpertBundle forward(const Tensor& features) const;

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  // Direct layer access for tests that need hand-set weights.
  std::vector<nn::Linear>& encoders() { return encoders_; }
  std::vector<nn::Linear>& decoders() { return decoders_; }

 private:
  MekaConfig config_;
  nn::ParameterSet params_;
  std::vector<nn::Linear> encoders_;
  std::vector<nn::Linear> decoders_;
  nn::Linear discriminator_;
  nn::Linear camera_map_;
  nn::Linear camera_classifier_;
};

// (1/K) sum_k MSE(f, h_k(e_k(f))), MSE averaged over batch and feature dims.
Tensor loss_rc(const ExpertBundle& bundle, const Tensor& features);
// Cross-entropy of D(e_k(f)) against label k, averaged over batch and experts.
Tensor loss_ec(const ExpertBundle& bundle);
// -sum_{i != j} ||u_i - u_j||^2 / (K^2 - K) over unit latents, averaged over the batch.
Tensor loss_al(const ExpertBundle& bundle);
// Cross-entropy of D_g(e_g(f)) against camera labels, averaged over the batch.
// A missing label (negative) is a validation error.
Tensor loss_cc(const ExpertBundle& bundle, std::span<const int> cameras);

struct MekaWeights {
  double lambda1 = 0.1;   // camera classification
  double lambda2 = 10.0;  // reconstruction
  double lambda3 = 0.2;   // adversarial diversity
};

struct MekaLosses {
  Tensor ec;
  Tensor cc;
  Tensor rc;
  Tensor al;
};

// L_EC + lambda1 L_CC + lambda2 L_RC + lambda3 L_AL.
objectives::WeightedLoss loss_meka(const MekaLosses& parts, const MekaWeights& weights);

// Mean over the batch of the mean pairwise Euclidean distance between unit latents.
double mean_pairwise_distance(const ExpertBundle& bundle);

}  // namespace mikecoco::meka
