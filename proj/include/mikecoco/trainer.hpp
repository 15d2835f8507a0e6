#pragma once

// Two-stage training.
//
// Stage 1 runs on domain-invariant images with both encoders frozen and fits
// the MEKA autoencoders, discriminators and the prompt set. Stage 2 runs on
// augmented style-perturbation images with text encoder, prompts and MEKA
// frozen and fits the image encoder, the student ID classifier and the MoE
// teacher.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mikecoco/dataset.hpp"
#include "mikecoco/encoders.hpp"
#include "mikecoco/evaluator.hpp"
#include "mikecoco/meka.hpp"
#include "mikecoco/moe.hpp"
#include "mikecoco/nn.hpp"
#include "mikecoco/spectral.hpp"

namespace mikecoco::train {

struct TrainConfig {
  int experts = 2;
  int prompt_length = 4;
  int p = 16;
  int m = 4;
  double lambda1 = 0.1;
  double lambda2 = 10.0;
  double lambda3 = 0.2;
  double alpha1 = 0.25;
  double alpha2 = 1.8;
  double base_lr = 3.5e-4;
  double warmup_lr_start = 5.0e-7;
  double warmup_lr_end = 5.0e-6;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs_stage1 = 30;
  int epochs_stage2 = 60;
  int steps_per_epoch = 0;  // 0: one pass over the data, floor(N / (P*M))
  std::uint64_t seed = 0;
  double label_smoothing = 0.1;
  spectral::MaskParams mask;
  std::string dii_shift = "source_mean";  // source_mean | mid_gray | raw
  bool stream = true;                     // false: raw images in both stages
  bool reverse_kl = false;
  std::string backbone = "toy";  // toy | external:<path>
  bool center_input = true;      // toy backbone: subtract each image's channel means
  int image_size = 32;
  int crop_padding = 10;
  double flip_probability = 0.5;
  double max_rotation = 10.0;
  int workers = 1;
  bool deterministic = true;
  std::string eval_query;    // optional manifests evaluated after stage 2
  std::string eval_gallery;

  // Paper hyperparameters, desk-scale epochs and a batch fitting the synthetic set.
  static TrainConfig desk();

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Applies one `key = value` assignment; unknown keys and malformed values are validation errors.
  void set(const std::string& key, const std::string& value);
  // Flat key=value text, '#' comments.
  static TrainConfig parse_file(const std::filesystem::path& path, TrainConfig base);
  void validate() const;
  std::uint64_t hash() const;
};

// Linear warmup from warmup_lr_start to warmup_lr_end over the first
// warmup_fraction of steps, then cosine decay from base_lr to 0 at total_steps.
double lr_schedule(int step, int total_steps, const TrainConfig& config);

// Decoupled weight decay Adam over a fixed list of leaves.
class AdamW {
 public:
  AdamW(std::vector<ag::Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  void zero_grad();
  int steps() const { return t_; }

 private:
  std::vector<ag::Tensor> params_;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
  double beta1_, beta2_, eps_, wd_;
  int t_ = 0;
};

// Everything a checkpoint can hold. Stage-1 checkpoints carry no student or teacher.
struct Model {
  TrainConfig config;
  std::string stage;  // "init", "stage1", "stage2"
  int num_ids = 0;
  int num_cameras = 0;
  std::vector<int> identity_raw;
  std::unique_ptr<model::DualEncoder> encoder;
  std::unique_ptr<model::PromptSet> prompts;
  std::unique_ptr<meka::Meka> meka;
  std::unique_ptr<nn::ParameterSet> student;  // "student.classifier.weight", d x N_id
  std::unique_ptr<moe::MoeTeacher> teacher;

  nn::Linear classifier() const;
};

std::unique_ptr<model::DualEncoder> make_encoder(const TrainConfig& config);
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

using EventSink = std::function<void(const nlohmann::json&)>;

struct StageResult {
  std::filesystem::path checkpoint;
  std::vector<double> step_totals;
  std::vector<double> epoch_totals;  // mean total per epoch
  std::map<std::string, std::uint64_t> hash_before;
  std::map<std::string, std::uint64_t> hash_after;
  double latent_distance_initial = 0.0;  // stage 1 only
  double latent_distance_final = 0.0;
  double held_in_id_initial = 0.0;  // stage 2 only: L_ID on a fixed clean batch
  double held_in_id_final = 0.0;
  std::optional<eval::EvalReport> report;  // stage 2 with eval manifests
};

struct RunOptions {
  std::filesystem::path out_dir;
  EventSink on_event;  // every log record, in order
};

StageResult train_stage1(const TrainConfig& config, const data::Dataset& dataset, const RunOptions& options);
StageResult train_stage2(const std::filesystem::path& stage1_checkpoint, const data::Dataset& dataset,
                         const RunOptions& options, const std::optional<TrainConfig>& override_config = {});

// Extracts features with the checkpoint's image encoder and evaluates query vs gallery.
eval::EvalReport evaluate_checkpoint(const Model& model, const data::Dataset& query, const data::Dataset& gallery,
                                     int max_rank = 20);

}  // namespace mikecoco::train
