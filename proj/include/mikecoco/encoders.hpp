#pragma once

// Dual (image, text) encoder with a swappable backbone, the learnable
// per-identity per-expert prompt set, and the scaled cosine similarity.
//
// The built-in backbone is a small CLIP-shaped pair: a patch-embedding vision
// transformer and a causal text transformer over a fixed word vocabulary.
// External weights are loaded through the same parameter names (see
// load_external_backbone).

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mikecoco/image.hpp"
#include "mikecoco/nn.hpp"

namespace mikecoco::model {

using ag::Index;
using ag::Tensor;

struct EncoderConfig {
  int image_size = 32;
  int channels = 3;
  int patch = 8;
  int width = 64;
  int layers = 4;
  int heads = 4;
  int embed_dim = 64;
  int text_width = 64;
  int text_layers = 2;
  int text_heads = 4;
  int context_length = 77;
  // Subtract each image's per-channel mean before patch embedding.
  bool center_input = true;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Word-level vocabulary for the prompt scaffold "a photo of a X X ... X vehicle."
struct PromptTemplate {
  static constexpr int kPad = 0;
  static constexpr int kSot = 1;
  static constexpr int kEot = 2;
  static constexpr int kSlot = 3;
  static const std::vector<std::string>& vocabulary();

  // Token ids with kSlot at each learnable position; length = 8 + slots.
  static std::vector<int> tokens(int slots);
  static int first_slot() { return 5; }
  static int eot_position(int slots) { return 7 + slots; }
};

class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& config, Rng& rng);

  // b x embed_dim global features (class-token output, projected).
  Tensor encode(std::span<const Image> images) const;
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  EncoderConfig config_;
  nn::ParameterSet params_;
  nn::Linear patch_embed_;
  Tensor class_embedding_;
  Tensor positional_;
  nn::LayerNorm ln_pre_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_post_;
  Tensor proj_;
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& config, Rng& rng);

  // `embeddings` holds `sequences` stacked token sequences of equal length n;
  // returns sequences x embed_dim features read at position `eot`.
  Tensor encode(const Tensor& embeddings, Index sequences, Index eot) const;
  const Tensor& token_embedding() const { return token_embedding_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  EncoderConfig config_;
  nn::ParameterSet params_;
  Tensor token_embedding_;
  Tensor positional_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_final_;
  Tensor proj_;
};

// Learnable context tokens, one block of `length` slots per (identity, expert).
class PromptSet {
 public:
  PromptSet(int num_ids, int experts, int length, int token_width, Rng& rng, double init_std = 0.02);

  int num_ids() const { return num_ids_; }
  int experts() const { return experts_; }
  int length() const { return length_; }
  Index row(int identity, int expert, int slot) const;
  const Tensor& tokens() const { return tokens_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  int num_ids_;
  int experts_;
  int length_;
  nn::ParameterSet params_;
  Tensor tokens_;
};

class DualEncoder {
 public:
  DualEncoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  ImageEncoder& image() { return image_; }
  const ImageEncoder& image() const { return image_; }
  TextEncoder& text() { return text_; }
  const TextEncoder& text() const { return text_; }
  nn::ParameterSet& scale_params() { return scale_params_; }
  const nn::ParameterSet& scale_params() const { return scale_params_; }

  // exp of the stored log-temperature; 1/0.07 at initialisation.
  double logit_scale() const;

  // Validates resolution and channel count, then runs the image tower.
  Tensor encode_image(std::span<const Image> images) const;
  // Features T_{id}^{k} for each requested (identity, expert) pair, in order.
  Tensor encode_prompts(const PromptSet& prompts, std::span<const std::pair<int, int>> pairs) const;
  // All identities x experts, row identity * K + expert.
  Tensor encode_prompt_table(const PromptSet& prompts) const;
  Eigen::VectorXd encode_prompt(const PromptSet& prompts, int identity, int expert) const;

  // name -> tensor over image, text and scale parameters, for checkpoints.
  std::vector<nn::ParameterSet*> parameter_sets();

 private:
  EncoderConfig config_;
  Rng rng_;
  ImageEncoder image_;
  TextEncoder text_;
  nn::ParameterSet scale_params_;
};

// Builds a DualEncoder whose shape comes from the archive's "encoder" metadata and
// whose weights are copied by name ("image.*", "text.*", optional "logit_scale.log").
DualEncoder load_external_backbone(const std::filesystem::path& path);

// logit_scale * cos(v, t); zero-norm input is a validation error.
double similarity(const Eigen::VectorXd& v, const Eigen::VectorXd& t, double logit_scale);
// logit_scale * normalize(a) normalize(b)^T, differentiable.
Tensor similarity_matrix(const Tensor& a, const Tensor& b, double logit_scale);

}  // namespace mikecoco::model
