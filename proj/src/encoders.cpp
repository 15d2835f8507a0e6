#include "mikecoco/encoders.hpp"

#include <cmath>

#include "mikecoco/archive.hpp"
#include "mikecoco/error.hpp"

namespace mikecoco::model {

nlohmann::json EncoderConfig::to_json() const {
  return {{"image_size", image_size}, {"channels", channels},       {"patch", patch},
          {"width", width},           {"layers", layers},           {"heads", heads},
          {"embed_dim", embed_dim},   {"text_width", text_width},   {"text_layers", text_layers},
          {"text_heads", text_heads}, {"context_length", context_length}, {"center_input", center_input}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  auto take = [&j](const char* key, int& field) {
    if (j.contains(key)) field = j.at(key).get<int>();
  };
  take("image_size", c.image_size);
  take("channels", c.channels);
  take("patch", c.patch);
  take("width", c.width);
  take("layers", c.layers);
  take("heads", c.heads);
  take("embed_dim", c.embed_dim);
  take("text_width", c.text_width);
  take("text_layers", c.text_layers);
  take("text_heads", c.text_heads);
  take("context_length", c.context_length);
  if (j.contains("center_input")) c.center_input = j.at("center_input").get<bool>();
  return c;
}

const std::vector<std::string>& PromptTemplate::vocabulary() {
  static const std::vector<std::string> vocab = {"<pad>", "<sot>", "<eot>", "X", "a", "photo", "of", "vehicle", "."};
  return vocab;
}

std::vector<int> PromptTemplate::tokens(int slots) {
  // <sot> a photo of a X*slots vehicle . <eot>
  std::vector<int> t = {kSot, 4, 5, 6, 4};
  t.insert(t.end(), static_cast<std::size_t>(slots), kSlot);
  t.insert(t.end(), {7, 8, kEot});
  return t;
}

ImageEncoder::ImageEncoder(const EncoderConfig& c, Rng& rng) : config_(c) {
  require(c.image_size % c.patch == 0, "image size must be a multiple of the patch size");
  const Index patch_dim = static_cast<Index>(c.channels) * c.patch * c.patch;
  const Index grid = c.image_size / c.patch;
  const Index tokens = grid * grid + 1;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(c.width));
  patch_embed_ = nn::Linear::create(params_, "image.patch_embed", patch_dim, c.width, rng, false);
  class_embedding_ = params_.add("image.class_embedding", nn::gaussian(1, c.width, emb_std, rng));
  positional_ = params_.add("image.positional", nn::gaussian(tokens, c.width, emb_std, rng));
  ln_pre_ = nn::LayerNorm::create(params_, "image.ln_pre", c.width);
  for (int l = 0; l < c.layers; ++l) {
    blocks_.push_back(nn::TransformerBlock::create(params_, "image.block" + std::to_string(l), c.width, c.heads, rng));
  }
  ln_post_ = nn::LayerNorm::create(params_, "image.ln_post", c.width);
  proj_ = params_.add("image.proj", nn::gaussian(c.width, c.embed_dim, emb_std, rng));
}

Tensor ImageEncoder::encode(std::span<const Image> images) const {
  const auto& c = config_;
  const Index b = static_cast<Index>(images.size());
  require(b > 0, "encode_image: empty batch");
  const int grid = c.image_size / c.patch;
  const Index np = static_cast<Index>(grid) * grid;
  const Index patch_dim = static_cast<Index>(c.channels) * c.patch * c.patch;

  // CLIP-style input normalisation to roughly zero mean, unit spread. With
  // center_input the per-image channel mean replaces the fixed 0.5.
  ag::Matrix patches(b * np, patch_dim);
  std::vector<double> offset(static_cast<std::size_t>(c.channels), 0.5);
  for (Index n = 0; n < b; ++n) {
    const Image& img = images[static_cast<std::size_t>(n)];
    if (c.center_input) {
      const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
      for (int ch = 0; ch < c.channels; ++ch) {
        double total = 0.0;
        for (std::size_t k = 0; k < plane; ++k) total += img.data[ch * plane + k];
        offset[static_cast<std::size_t>(ch)] = total / static_cast<double>(plane);
      }
    }
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const Index row = n * np + gy * grid + gx;
        Index col = 0;
        for (int ch = 0; ch < c.channels; ++ch)
          for (int py = 0; py < c.patch; ++py)
            for (int px = 0; px < c.patch; ++px)
              patches(row, col++) = (img.at(ch, gy * c.patch + py, gx * c.patch + px) - offset[static_cast<std::size_t>(ch)]) / 0.25;
      }
  }
  Tensor embedded = patch_embed_(Tensor::constant(std::move(patches)));

  // Prepend the class token per image: rows [class, patches...] of the stacked table.
  const Tensor pieces[] = {class_embedding_, embedded};
  Tensor table = ag::concat_rows(pieces);
  std::vector<Index> order;
  std::vector<Index> pos_order;
  order.reserve(static_cast<std::size_t>(b * (np + 1)));
  for (Index n = 0; n < b; ++n) {
    order.push_back(0);
    pos_order.push_back(0);
    for (Index p = 0; p < np; ++p) {
      order.push_back(1 + n * np + p);
      pos_order.push_back(1 + p);
    }
  }
  Tensor x = ag::add(ag::gather_rows(table, order), ag::gather_rows(positional_, pos_order));
  x = ln_pre_(x);
  for (const auto& block : blocks_) x = block(x, b, false);

  std::vector<Index> cls_rows;
  for (Index n = 0; n < b; ++n) cls_rows.push_back(n * (np + 1));
  return ag::matmul(ln_post_(ag::gather_rows(x, cls_rows)), proj_);
}

TextEncoder::TextEncoder(const EncoderConfig& c, Rng& rng) : config_(c) {
  const auto vocab = static_cast<Index>(PromptTemplate::vocabulary().size());
  token_embedding_ = params_.add("text.token_embedding", nn::gaussian(vocab, c.text_width, 0.02, rng));
  positional_ = params_.add("text.positional", nn::gaussian(c.context_length, c.text_width, 0.01, rng));
  for (int l = 0; l < c.text_layers; ++l) {
    blocks_.push_back(
        nn::TransformerBlock::create(params_, "text.block" + std::to_string(l), c.text_width, c.text_heads, rng));
  }
  ln_final_ = nn::LayerNorm::create(params_, "text.ln_final", c.text_width);
  proj_ = params_.add("text.proj",
                      nn::gaussian(c.text_width, c.embed_dim, 1.0 / std::sqrt(static_cast<double>(c.text_width)), rng));
}

Tensor TextEncoder::encode(const Tensor& embeddings, Index sequences, Index eot) const {
  require(sequences > 0 && embeddings.rows() % sequences == 0, "text encoder: ragged sequence batch");
  const Index n = embeddings.rows() / sequences;
  require(n <= config_.context_length, "text encoder: sequence longer than the context length");
  require(eot >= 0 && eot < n, "text encoder: end-of-text position out of range");
  // Causal attention makes the end-of-text feature independent of anything after it,
  // so sequences are run at their natural length instead of padded to the context.
  std::vector<Index> pos_order;
  pos_order.reserve(static_cast<std::size_t>(embeddings.rows()));
  for (Index s = 0; s < sequences; ++s)
    for (Index t = 0; t < n; ++t) pos_order.push_back(t);
  Tensor x = ag::add(embeddings, ag::gather_rows(positional_, pos_order));
  for (const auto& block : blocks_) x = block(x, sequences, true);
  std::vector<Index> eot_rows;
  for (Index s = 0; s < sequences; ++s) eot_rows.push_back(s * n + eot);
  return ag::matmul(ln_final_(ag::gather_rows(x, eot_rows)), proj_);
}

PromptSet::PromptSet(int num_ids, int experts, int length, int token_width, Rng& rng, double init_std)
    : num_ids_(num_ids), experts_(experts), length_(length) {
  require(num_ids >= 1 && experts >= 1 && length >= 1, "prompt set needs positive ids, experts and length");
  tokens_ = params_.add("prompt.tokens",
                        nn::gaussian(static_cast<Index>(num_ids) * experts * length, token_width, init_std, rng));
}

Index PromptSet::row(int identity, int expert, int slot) const {
  return (static_cast<Index>(identity) * experts_ + expert) * length_ + slot;
}

DualEncoder::DualEncoder(const EncoderConfig& config, std::uint64_t seed)
    : config_(config), rng_(seed), image_(config, rng_), text_(config, rng_) {
  ag::Matrix s(1, 1);
  s(0, 0) = std::log(1.0 / 0.07);
  scale_params_.add("logit_scale.log", std::move(s));
  scale_params_.set_trainable(false);
}

double DualEncoder::logit_scale() const { return std::exp(scale_params_.at("logit_scale.log").value()(0, 0)); }

Tensor DualEncoder::encode_image(std::span<const Image> images) const {
  for (const auto& img : images) {
    if (img.height != config_.image_size || img.width != config_.image_size || img.channels != config_.channels) {
      throw ValidationError("encode_image: expected " + std::to_string(config_.image_size) + "x" +
                            std::to_string(config_.image_size) + "x" + std::to_string(config_.channels) + ", got " +
                            std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                            std::to_string(img.channels));
    }
  }
  return image_.encode(images);
}

Tensor DualEncoder::encode_prompts(const PromptSet& prompts, std::span<const std::pair<int, int>> pairs) const {
  require(!pairs.empty(), "encode_prompts: no (identity, expert) pairs");
  const auto scaffold = PromptTemplate::tokens(prompts.length());
  const auto n = static_cast<Index>(scaffold.size());
  require(n <= config_.context_length, "prompt longer than the text context length");
  const Index vocab = text_.token_embedding().rows();
  std::vector<Index> rows;
  rows.reserve(pairs.size() * scaffold.size());
  for (const auto& [id, k] : pairs) {
    if (id < 0 || id >= prompts.num_ids() || k < 0 || k >= prompts.experts()) {
      throw ValidationError("encode_prompts: (identity " + std::to_string(id) + ", expert " + std::to_string(k) +
                            ") outside the prompt table");
    }
    int slot = 0;
    for (int tok : scaffold) {
      rows.push_back(tok == PromptTemplate::kSlot ? vocab + prompts.row(id, k, slot++) : tok);
    }
  }
  const Tensor pieces[] = {text_.token_embedding(), prompts.tokens()};
  Tensor embeddings = ag::gather_rows(ag::concat_rows(pieces), rows);
  return text_.encode(embeddings, static_cast<Index>(pairs.size()), PromptTemplate::eot_position(prompts.length()));
}

Tensor DualEncoder::encode_prompt_table(const PromptSet& prompts) const {
  std::vector<std::pair<int, int>> pairs;
  for (int id = 0; id < prompts.num_ids(); ++id)
    for (int k = 0; k < prompts.experts(); ++k) pairs.emplace_back(id, k);
  return encode_prompts(prompts, pairs);
}

Eigen::VectorXd DualEncoder::encode_prompt(const PromptSet& prompts, int identity, int expert) const {
  const std::pair<int, int> pair{identity, expert};
  return encode_prompts(prompts, std::span(&pair, 1)).value().row(0).transpose();
}

std::vector<nn::ParameterSet*> DualEncoder::parameter_sets() {
  return {&image_.params(), &text_.params(), &scale_params_};
}

DualEncoder load_external_backbone(const std::filesystem::path& path) {
  Archive a = read_archive(path);
  if (!a.meta.contains("encoder")) {
    throw ValidationError("external backbone " + path.string() + " has no 'encoder' shape metadata");
  }
  // Exported weights expect the fixed normalisation unless they say otherwise.
  nlohmann::json shape = a.meta.at("encoder");
  if (!shape.contains("center_input")) shape["center_input"] = false;
  DualEncoder enc(EncoderConfig::from_json(shape), 0);
  enc.image().params().load_from(a.tensors, true);
  enc.text().params().load_from(a.tensors, true);
  enc.scale_params().load_from(a.tensors, false);
  return enc;
}

double similarity(const Eigen::VectorXd& v, const Eigen::VectorXd& t, double logit_scale) {
  require(v.size() == t.size(), "similarity: dimension mismatch");
  require(v.allFinite() && t.allFinite(), "similarity: non-finite input");
  const double nv = v.norm();
  const double nt = t.norm();
  require(nv > 0 && nt > 0, "similarity: zero-norm vector");
  return logit_scale * v.dot(t) / (nv * nt);
}

Tensor similarity_matrix(const Tensor& a, const Tensor& b, double logit_scale) {
  return ag::scale(ag::matmul_nt(ag::l2_normalize_rows(a), ag::l2_normalize_rows(b)), logit_scale);
}

}  // namespace mikecoco::model
