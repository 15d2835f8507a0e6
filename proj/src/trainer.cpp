#include "mikecoco/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "mikecoco/archive.hpp"
#include "mikecoco/error.hpp"
#include "mikecoco/objectives.hpp"
#include "mikecoco/rng.hpp"

namespace mikecoco::train {

using nlohmann::json;
using ag::Matrix;
using ag::Tensor;

// ---------------------------------------------------------------- config

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) {
    throw ValidationError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  const char* name;
  std::function<json(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define MK_INT(key, member)                                                                     \
  Field {                                                                                       \
    key, [](const TrainConfig& c) { return json(c.member); },                                   \
        [](TrainConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(parse_int(key, v)); } \
  }
#define MK_DOUBLE(key, member)                                                   \
  Field {                                                                        \
    key, [](const TrainConfig& c) { return json(c.member); },                    \
        [](TrainConfig& c, const std::string& v) { c.member = parse_double(key, v); } \
  }
#define MK_BOOL(key, member)                                                   \
  Field {                                                                      \
    key, [](const TrainConfig& c) { return json(c.member); },                  \
        [](TrainConfig& c, const std::string& v) { c.member = parse_bool(key, v); } \
  }
#define MK_STRING(key, member)                                   \
  Field {                                                        \
    key, [](const TrainConfig& c) { return json(c.member); },    \
        [](TrainConfig& c, const std::string& v) { c.member = v; } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      MK_INT("experts", experts),
      MK_INT("prompt_length", prompt_length),
      MK_INT("p", p),
      MK_INT("m", m),
      MK_DOUBLE("lambda1", lambda1),
      MK_DOUBLE("lambda2", lambda2),
      MK_DOUBLE("lambda3", lambda3),
      MK_DOUBLE("alpha1", alpha1),
      MK_DOUBLE("alpha2", alpha2),
      MK_DOUBLE("base_lr", base_lr),
      MK_DOUBLE("warmup_lr_start", warmup_lr_start),
      MK_DOUBLE("warmup_lr_end", warmup_lr_end),
      MK_DOUBLE("warmup_fraction", warmup_fraction),
      MK_DOUBLE("weight_decay", weight_decay),
      MK_DOUBLE("adam_beta1", adam_beta1),
      MK_DOUBLE("adam_beta2", adam_beta2),
      MK_DOUBLE("adam_eps", adam_eps),
      MK_INT("epochs_stage1", epochs_stage1),
      MK_INT("epochs_stage2", epochs_stage2),
      MK_INT("steps_per_epoch", steps_per_epoch),
      MK_INT("seed", seed),
      MK_DOUBLE("label_smoothing", label_smoothing),
      MK_DOUBLE("k1", mask.k1),
      MK_DOUBLE("k2", mask.k2),
      MK_DOUBLE("k3", mask.k3),
      MK_DOUBLE("c1", mask.c1),
      MK_DOUBLE("c2", mask.c2),
      MK_DOUBLE("m2", mask.m2),
      MK_DOUBLE("m4", mask.m4),
      MK_BOOL("floor_v1", mask.floor_v1),
      MK_STRING("dii_shift", dii_shift),
      MK_BOOL("stream", stream),
      MK_BOOL("reverse_kl", reverse_kl),
      MK_STRING("backbone", backbone),
      MK_BOOL("center_input", center_input),
      MK_INT("image_size", image_size),
      MK_INT("crop_padding", crop_padding),
      MK_DOUBLE("flip_probability", flip_probability),
      MK_DOUBLE("max_rotation", max_rotation),
      MK_INT("workers", workers),
      MK_BOOL("deterministic", deterministic),
      MK_STRING("eval_query", eval_query),
      MK_STRING("eval_gallery", eval_gallery),
  };
  return f;
}

#undef MK_INT
#undef MK_DOUBLE
#undef MK_BOOL
#undef MK_STRING

spectral::DiiShift shift_of(const std::string& s) {
  if (s == "source_mean") return spectral::DiiShift::SourceMean;
  if (s == "mid_gray") return spectral::DiiShift::MidGray;
  if (s == "raw") return spectral::DiiShift::Raw;
  throw ValidationError("dii_shift must be source_mean, mid_gray or raw, got '" + s + "'");
}

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.p = 8;
  c.m = 4;
  c.epochs_stage1 = 3;
  c.epochs_stage2 = 5;
  c.crop_padding = 2;
  return c;
}

json TrainConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.name] = f.get(*this);
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) c.set(key, value.is_string() ? value.get<std::string>() : value.dump());
  return c;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.name) {
      f.set(*this, value);
      return;
    }
  }
  throw ValidationError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::parse_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file not found: " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

void TrainConfig::validate() const {
  require(experts >= 2, "experts must be >= 2");
  require(prompt_length >= 1, "prompt_length must be >= 1");
  require(p >= 1 && m >= 1, "p and m must be >= 1");
  require(epochs_stage1 >= 0 && epochs_stage2 >= 0, "epoch counts must be >= 0");
  require(steps_per_epoch >= 0, "steps_per_epoch must be >= 0");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction must lie in [0, 1)");
  require(base_lr > 0.0 && warmup_lr_start >= 0.0 && warmup_lr_end >= 0.0, "learning rates must be positive");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing must lie in [0, 1)");
  require(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0, "MEKA weights must be >= 0");
  require(image_size >= 8, "image_size must be >= 8");
  require(workers >= 1, "workers must be >= 1");
  require(crop_padding >= 0, "crop_padding must be >= 0");
  require(flip_probability >= 0.0 && flip_probability <= 1.0, "flip_probability must lie in [0, 1]");
  shift_of(dii_shift);
  require(backbone == "toy" || backbone.rfind("external:", 0) == 0,
          "backbone must be 'toy' or 'external:<weights-path>', got '" + backbone + "'");
}

std::uint64_t TrainConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// ---------------------------------------------------------------- schedule, optimizer

double lr_schedule(int step, int total_steps, const TrainConfig& c) {
  require(total_steps >= 1, "lr_schedule: total_steps must be >= 1");
  require(step >= 0 && step <= total_steps, "lr_schedule: step outside [0, total_steps]");
  const int warmup = static_cast<int>(std::lround(c.warmup_fraction * total_steps));
  if (step < warmup) {
    if (warmup == 1) return c.warmup_lr_start;
    return c.warmup_lr_start + (c.warmup_lr_end - c.warmup_lr_start) * step / static_cast<double>(warmup - 1);
  }
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return 0.5 * c.base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    require(p.requires_grad(), "AdamW: parameter is frozen");
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const Matrix& g = p.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    Matrix& w = p.mutable_value();
    w *= 1.0 - lr * wd_;
    w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------- checkpoints

nn::Linear Model::classifier() const {
  require(student != nullptr, "model has no student classifier");
  nn::Linear l;
  l.weight = student->at("student.classifier.weight");
  return l;
}

std::unique_ptr<model::DualEncoder> make_encoder(const TrainConfig& config) {
  if (config.backbone == "toy") {
    model::EncoderConfig ec;
    ec.image_size = config.image_size;
    ec.center_input = config.center_input;
    return std::make_unique<model::DualEncoder>(ec, derive_seed(config.seed, {100}));
  }
  const std::string path = config.backbone.substr(std::string("external:").size());
  auto enc = std::make_unique<model::DualEncoder>(model::load_external_backbone(path));
  if (enc->config().image_size != config.image_size) {
    throw ValidationError("external backbone expects " + std::to_string(enc->config().image_size) +
                          " px input but image_size is " + std::to_string(config.image_size));
  }
  return enc;
}

namespace {

void collect(Archive& a, const nn::ParameterSet& set) {
  for (const auto& [name, t] : set.entries()) a.tensors[name] = t.value();
}

std::map<std::string, Matrix> as_map(const Archive& a) { return a.tensors; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  Archive a;
  a.meta["format"] = "mikecoco-checkpoint";
  a.meta["stage"] = model.stage;
  a.meta["config"] = model.config.to_json();
  a.meta["encoder"] = model.encoder->config().to_json();
  a.meta["num_ids"] = model.num_ids;
  a.meta["num_cameras"] = model.num_cameras;
  a.meta["identity_raw"] = model.identity_raw;
  for (const auto* set : const_cast<model::DualEncoder&>(*model.encoder).parameter_sets()) collect(a, *set);
  if (model.prompts) collect(a, model.prompts->params());
  if (model.meka) collect(a, model.meka->params());
  if (model.student) collect(a, *model.student);
  if (model.teacher) collect(a, model.teacher->params());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_archive(path, a);
}

Model load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  Archive a = read_archive(path);
  if (!a.meta.contains("stage") || !a.meta.contains("config") || !a.meta.contains("encoder")) {
    throw ValidationError(path.string() + " is not a training checkpoint (missing stage/config/encoder metadata)");
  }
  Model m;
  m.stage = a.meta.at("stage").get<std::string>();
  m.config = TrainConfig::from_json(a.meta.at("config"));
  m.num_ids = a.meta.value("num_ids", 0);
  m.num_cameras = a.meta.value("num_cameras", 0);
  m.identity_raw = a.meta.value("identity_raw", std::vector<int>{});
  const auto tensors = as_map(a);

  m.encoder = std::make_unique<model::DualEncoder>(model::EncoderConfig::from_json(a.meta.at("encoder")), 0);
  m.encoder->image().params().load_from(tensors, true);
  m.encoder->text().params().load_from(tensors, true);
  m.encoder->scale_params().load_from(tensors, false);
  if (m.stage == "init") return m;

  Rng rng(0);
  const int K = m.config.experts;
  const int d = m.encoder->config().embed_dim;
  m.prompts = std::make_unique<model::PromptSet>(m.num_ids, K, m.config.prompt_length, m.encoder->config().text_width,
                                                 rng);
  m.prompts->params().load_from(tensors, true);
  m.meka = std::make_unique<meka::Meka>(meka::MekaConfig{K, d, std::max(1, m.num_cameras), 0.01}, 0);
  m.meka->params().load_from(tensors, true);
  if (m.stage == "stage2") {
    m.student = std::make_unique<nn::ParameterSet>();
    m.student->add("student.classifier.weight", Matrix::Zero(d, m.num_ids));
    m.student->load_from(tensors, true);
    m.teacher = std::make_unique<moe::MoeTeacher>(moe::MoeConfig{K, d, m.num_ids, 2}, 0);
    m.teacher->params().load_from(tensors, true);
  }
  return m;
}

// ---------------------------------------------------------------- pipeline

namespace {

using Clock = std::chrono::steady_clock;

// Prepares batches on worker threads, at most `capacity` ahead of the consumer,
// and hands them out strictly in job order. Results depend only on the job
// index, so the worker count never changes what the trainer sees.
class Prefetcher {
 public:
  using Produce = std::function<std::vector<Image>(int)>;

  Prefetcher(Produce produce, int jobs, int workers, int capacity)
      : produce_(std::move(produce)), jobs_(jobs), capacity_(capacity) {
    for (int w = 0; w < workers; ++w) threads_.emplace_back([this] { run(); });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::vector<Image> get(int job) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return ready_.count(job) || error_; });
    if (error_) std::rethrow_exception(error_);
    auto out = std::move(ready_.at(job));
    ready_.erase(job);
    consumed_ = job + 1;
    cv_.notify_all();
    return out;
  }

 private:
  void run() {
    for (;;) {
      int job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || error_ || (next_ < jobs_ && next_ < consumed_ + capacity_); });
        if (stop_ || error_ || next_ >= jobs_) return;
        job = next_++;
      }
      try {
        auto batch = produce_(job);
        std::lock_guard lock(mu_);
        ready_.emplace(job, std::move(batch));
      } catch (...) {
        std::lock_guard lock(mu_);
        if (!error_) error_ = std::current_exception();
      }
      cv_.notify_all();
    }
  }

  Produce produce_;
  int jobs_;
  int capacity_;
  int next_ = 0;
  int consumed_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::map<int, std::vector<Image>> ready_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
};

class Log {
 public:
  Log(const std::filesystem::path& file, EventSink sink) : sink_(std::move(sink)) {
    if (!file.empty()) {
      if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
      out_.open(file);
      if (!out_) throw RuntimeFailure("cannot open training log " + file.string());
    }
  }
  void write(const json& j) {
    if (out_.is_open()) out_ << j.dump() << '\n' << std::flush;
    if (sink_) sink_(j);
  }

 private:
  std::ofstream out_;
  EventSink sink_;
};

Image at_resolution(const Image& img, int size) {
  return (img.height == size && img.width == size) ? img : resize_bilinear(img, size, size);
}

Tensor encode_chunked(const model::DualEncoder& enc, const std::vector<Image>& images) {
  Matrix out(static_cast<ag::Index>(images.size()), enc.config().embed_dim);
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < images.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - s);
    out.middleRows(static_cast<ag::Index>(s), static_cast<ag::Index>(n)) =
        enc.encode_image(std::span(images).subspan(s, n)).value();
  }
  return Tensor::constant(std::move(out));
}

void check_finite(const objectives::LossReport& r, const std::vector<std::size_t>& indices, int stage, int step) {
  bool ok = std::isfinite(r.weighted_total);
  for (const auto& [_, v] : r.components) ok = ok && std::isfinite(v);
  if (ok) return;
  std::ostringstream os;
  os << "non-finite loss at stage " << stage << " step " << step << ": " << r.to_json().dump() << "; batch indices [";
  for (std::size_t i = 0; i < indices.size(); ++i) os << (i ? "," : "") << indices[i];
  os << "]";
  throw RuntimeFailure(os.str());
}

std::vector<Tensor> trainable(std::initializer_list<const nn::ParameterSet*> sets) {
  std::vector<Tensor> out;
  for (const auto* s : sets) {
    for (const auto& t : s->tensors()) out.push_back(t);
  }
  return out;
}

double elapsed(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

int steps_for(const TrainConfig& c, const data::PkSampler& sampler) {
  return c.steps_per_epoch > 0 ? c.steps_per_epoch : sampler.batches_per_epoch();
}

json hashes_json(const std::map<std::string, std::uint64_t>& h) {
  json j = json::object();
  for (const auto& [k, v] : h) j[k] = std::to_string(v);
  return j;
}

void check_frozen(const std::map<std::string, const nn::ParameterSet*>& frozen,
                  const std::map<std::string, std::uint64_t>& reference, int stage, int epoch) {
  for (const auto& [name, set] : frozen) {
    if (set->hash() != reference.at(name)) {
      throw RuntimeFailure("freeze contract violated at stage " + std::to_string(stage) + " epoch " +
                           std::to_string(epoch) + ": '" + name + "' changed");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- stage 1

StageResult train_stage1(const TrainConfig& config, const data::Dataset& dataset, const RunOptions& options) {
  config.validate();
  require(dataset.size() > 0, "stage 1: empty dataset");
  require(dataset.num_ids() >= 1, "stage 1: dataset has no identity labels");
  if (config.lambda1 > 0.0 && !dataset.has_cameras()) {
    throw ValidationError("stage 1: camera labels are missing but lambda1 > 0; set lambda1 = 0 for camera-free data");
  }
  const auto start = Clock::now();
  Log log(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "stage1_log.jsonl", options.on_event);

  Model model;
  model.config = config;
  model.stage = "stage1";
  model.num_ids = dataset.num_ids();
  model.num_cameras = dataset.num_cameras();
  model.identity_raw = dataset.identity_raw;
  model.encoder = make_encoder(config);
  for (auto* s : model.encoder->parameter_sets()) s->set_trainable(false);
  const auto& ec = model.encoder->config();
  const int K = config.experts;

  // Frozen encoder: DII features are computed once.
  const auto mask = spectral::BandPassMask::build(ec.image_size, ec.image_size, config.mask);
  const auto shift = shift_of(config.dii_shift);
  std::vector<Image> inputs;
  inputs.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    Image x = at_resolution(*dataset.pixels(i), ec.image_size);
    inputs.push_back(config.stream ? spectral::dii_to_pixels(spectral::extract_dii(x, mask), x, shift) : x);
  }
  const Tensor all_features = encode_chunked(*model.encoder, inputs);
  inputs.clear();

  Rng prompt_rng(derive_seed(config.seed, {300}));
  model.prompts = std::make_unique<model::PromptSet>(model.num_ids, K, config.prompt_length, ec.text_width, prompt_rng);
  model.meka = std::make_unique<meka::Meka>(meka::MekaConfig{K, ec.embed_dim, std::max(1, model.num_cameras), 0.01},
                                            derive_seed(config.seed, {200}));

  StageResult result;
  const std::map<std::string, const nn::ParameterSet*> frozen = {{"image", &model.encoder->image().params()},
                                                                  {"text", &model.encoder->text().params()},
                                                                  {"logit_scale", &model.encoder->scale_params()}};
  const std::map<std::string, const nn::ParameterSet*> learned = {{"prompts", &model.prompts->params()},
                                                                   {"meka", &model.meka->params()}};
  for (const auto& [n, s] : frozen) result.hash_before[n] = s->hash();
  for (const auto& [n, s] : learned) result.hash_before[n] = s->hash();
  result.latent_distance_initial = meka::mean_pairwise_distance(model.meka->forward(all_features));

  AdamW opt(trainable({&model.prompts->params(), &model.meka->params()}), config.adam_beta1, config.adam_beta2,
            config.adam_eps, config.weight_decay);
  data::PkSampler sampler(dataset.by_identity(), config.p, config.m, derive_seed(config.seed, {1, 1}));
  const int steps_per_epoch = steps_for(config, sampler);
  const int total_steps = std::max(1, config.epochs_stage1 * steps_per_epoch);
  const double scale = model.encoder->logit_scale();
  const meka::MekaWeights weights{config.lambda1, config.lambda2, config.lambda3};

  log.write({{"event", "start"},
             {"stage", 1},
             {"records", dataset.size()},
             {"num_ids", model.num_ids},
             {"steps_per_epoch", steps_per_epoch},
             {"total_steps", total_steps},
             {"config", config.to_json()}});

  int step = 0;
  for (int epoch = 0; epoch < config.epochs_stage1; ++epoch) {
    double epoch_sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      const auto indices = sampler.next();
      std::vector<ag::Index> rows(indices.begin(), indices.end());
      std::vector<int> ids, cams;
      for (auto i : indices) {
        ids.push_back(dataset.records[i].identity);
        cams.push_back(dataset.records[i].camera);
      }
      const Tensor f = ag::gather_rows(all_features, rows);
      const auto bundle = model.meka->forward(f);
      meka::MekaLosses parts;
      parts.ec = meka::loss_ec(bundle);
      parts.cc = config.lambda1 > 0.0 ? meka::loss_cc(bundle, cams) : Tensor::scalar(0.0);
      parts.rc = meka::loss_rc(bundle, f);
      parts.al = meka::loss_al(bundle);
      const auto meka_loss = meka::loss_meka(parts, weights);
      const Tensor text = model.encoder->encode_prompt_table(*model.prompts);
      const Tensor v2t = objectives::loss_v2t(bundle.unit_latents, text, ids, scale);
      const Tensor t2v = objectives::loss_t2v(bundle.unit_latents, text, ids, scale);
      const auto total = objectives::stage1_total(meka_loss, v2t, t2v);
      check_finite(total.report, indices, 1, step);

      const double lr = lr_schedule(step, total_steps, config);
      ag::backward(total.total);
      opt.step(lr);
      opt.zero_grad();

      result.step_totals.push_back(total.report.weighted_total);
      epoch_sum += total.report.weighted_total;
      json rec = {{"event", "step"}, {"stage", 1}, {"epoch", epoch}, {"step", step}, {"lr", lr},
                  {"losses", total.report.to_json()}, {"wall_time", elapsed(start)}};
      log.write(rec);
    }
    check_frozen(frozen, result.hash_before, 1, epoch);
    result.epoch_totals.push_back(epoch_sum / steps_per_epoch);
    log.write({{"event", "epoch"}, {"stage", 1}, {"epoch", epoch}, {"mean_total", result.epoch_totals.back()},
               {"wall_time", elapsed(start)}});
  }

  result.latent_distance_final = meka::mean_pairwise_distance(model.meka->forward(all_features));
  for (const auto& [n, s] : frozen) result.hash_after[n] = s->hash();
  for (const auto& [n, s] : learned) result.hash_after[n] = s->hash();
  if (!options.out_dir.empty()) {
    result.checkpoint = options.out_dir / "stage1.ckpt";
    save_checkpoint(result.checkpoint, model);
  }
  log.write({{"event", "done"},
             {"stage", 1},
             {"latent_distance_initial", result.latent_distance_initial},
             {"latent_distance_final", result.latent_distance_final},
             {"hash_before", hashes_json(result.hash_before)},
             {"hash_after", hashes_json(result.hash_after)},
             {"checkpoint", result.checkpoint.string()},
             {"wall_time", elapsed(start)}});
  return result;
}

// ---------------------------------------------------------------- stage 2

namespace {

// (b*K) x d token block, row n*K + k, from K tensors of shape b x d.
Tensor interleave(const std::vector<Tensor>& per_expert) {
  const auto K = static_cast<ag::Index>(per_expert.size());
  const ag::Index b = per_expert.front().rows();
  std::vector<ag::Index> order;
  for (ag::Index n = 0; n < b; ++n)
    for (ag::Index k = 0; k < K; ++k) order.push_back(k * b + n);
  return ag::gather_rows(ag::concat_rows(per_expert), order);
}

void check_compatible(const TrainConfig& a, const TrainConfig& b) {
  auto same = [](auto x, auto y, const char* key) {
    if (x != y) throw ValidationError(std::string("stage-2 config differs from the stage-1 checkpoint in '") + key + "'");
  };
  same(a.experts, b.experts, "experts");
  same(a.prompt_length, b.prompt_length, "prompt_length");
  same(a.image_size, b.image_size, "image_size");
}

}  // namespace

StageResult train_stage2(const std::filesystem::path& stage1_checkpoint, const data::Dataset& dataset,
                         const RunOptions& options, const std::optional<TrainConfig>& override_config) {
  Model model = load_checkpoint(stage1_checkpoint);
  if (model.stage != "stage1") {
    throw ValidationError("checkpoint " + stage1_checkpoint.string() + " has stage tag '" + model.stage +
                          "', stage 2 needs a 'stage1' checkpoint");
  }
  if (override_config) {
    check_compatible(model.config, *override_config);
    model.config = *override_config;
  }
  const TrainConfig& config = model.config;
  config.validate();
  require(dataset.size() > 0, "stage 2: empty dataset");
  if (dataset.identity_raw != model.identity_raw) {
    throw ValidationError("stage 2: dataset identities differ from the ones the stage-1 prompts were learned for");
  }
  const auto start = Clock::now();
  Log log(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "stage2_log.jsonl", options.on_event);

  model.stage = "stage2";
  const auto& ec = model.encoder->config();
  const int K = config.experts;
  const int d = ec.embed_dim;
  const int N = model.num_ids;

  model.encoder->text().params().set_trainable(false);
  model.encoder->scale_params().set_trainable(false);
  model.prompts->params().set_trainable(false);
  model.meka->params().set_trainable(false);
  model.encoder->image().params().set_trainable(true);

  const Tensor text_table = Tensor::constant(model.encoder->encode_prompt_table(*model.prompts).value());

  Rng student_rng(derive_seed(config.seed, {500}));
  model.student = std::make_unique<nn::ParameterSet>();
  model.student->add("student.classifier.weight", nn::gaussian(d, N, 1.0 / std::sqrt(static_cast<double>(d)), student_rng));
  model.teacher = std::make_unique<moe::MoeTeacher>(moe::MoeConfig{K, d, N, 2}, derive_seed(config.seed, {400}));
  const nn::Linear classifier = model.classifier();

  StageResult result;
  const std::map<std::string, const nn::ParameterSet*> frozen = {{"text", &model.encoder->text().params()},
                                                                  {"logit_scale", &model.encoder->scale_params()},
                                                                  {"prompts", &model.prompts->params()},
                                                                  {"meka", &model.meka->params()}};
  const std::map<std::string, const nn::ParameterSet*> learned = {{"image", &model.encoder->image().params()},
                                                                   {"student", model.student.get()},
                                                                   {"teacher", &model.teacher->params()}};
  for (const auto& [n, s] : frozen) result.hash_before[n] = s->hash();
  for (const auto& [n, s] : learned) result.hash_before[n] = s->hash();

  // Fixed clean batch for the held-in L_ID descent check.
  const auto held = data::pk_sample(dataset, std::min(config.p, N), config.m, derive_seed(config.seed, {600}));
  std::vector<Image> held_images;
  for (const auto& img : held.images) held_images.push_back(at_resolution(img, ec.image_size));
  auto held_in_id = [&] {
    return objectives::loss_id(classifier(ag::detach(model.encoder->encode_image(held_images))), held.identities,
                               config.label_smoothing)
        .item();
  };
  result.held_in_id_initial = held_in_id();

  AdamW opt(trainable({&model.encoder->image().params(), model.student.get(), &model.teacher->params()}),
            config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
  data::PkSampler sampler(dataset.by_identity(), config.p, config.m, derive_seed(config.seed, {1, 2}));
  const int steps_per_epoch = steps_for(config, sampler);
  const int total_steps = std::max(1, config.epochs_stage2 * steps_per_epoch);
  const double scale = model.encoder->logit_scale();
  const auto mask = spectral::BandPassMask::build(ec.image_size, ec.image_size, config.mask);
  data::AugmentConfig aug;
  aug.height = aug.width = ec.image_size;
  aug.crop_padding = config.crop_padding;
  aug.flip_probability = config.flip_probability;
  aug.max_rotation_degrees = config.max_rotation;
  const int workers = config.deterministic ? 1 : config.workers;

  log.write({{"event", "start"},
             {"stage", 2},
             {"records", dataset.size()},
             {"num_ids", N},
             {"steps_per_epoch", steps_per_epoch},
             {"total_steps", total_steps},
             {"held_in_id", result.held_in_id_initial},
             {"config", config.to_json()}});

  int step = 0;
  for (int epoch = 0; epoch < config.epochs_stage2; ++epoch) {
    std::vector<std::vector<std::size_t>> plan;
    for (int s = 0; s < steps_per_epoch; ++s) plan.push_back(sampler.next());
    const std::uint64_t e = static_cast<std::uint64_t>(epoch);
    Prefetcher prefetch(
        [&](int job) {
          std::vector<Image> out;
          const auto& idx = plan[static_cast<std::size_t>(job)];
          for (std::size_t slot = 0; slot < idx.size(); ++slot) {
            const std::uint64_t image_index = static_cast<std::uint64_t>(job) * idx.size() + slot;
            Image x = data::augment(*dataset.pixels(idx[slot]), aug, derive_seed(config.seed, {2, e, image_index}));
            if (config.stream) {
              x = spectral::make_spi(x, mask, derive_seed(config.seed, {3, e, image_index}));
            }
            out.push_back(std::move(x));
          }
          return out;
        },
        steps_per_epoch, workers, 2 * workers);

    double epoch_sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      const auto& indices = plan[static_cast<std::size_t>(s)];
      const auto images = prefetch.get(s);
      std::vector<int> ids;
      std::vector<ag::Index> text_rows;
      for (auto i : indices) {
        const int y = dataset.records[i].identity;
        ids.push_back(y);
        for (int k = 0; k < K; ++k) text_rows.push_back(static_cast<ag::Index>(y) * K + k);
      }
      const auto b = static_cast<ag::Index>(indices.size());
      const Tensor f = model.encoder->encode_image(images);
      const auto bundle = model.meka->forward(f);
      const Tensor z_s = classifier(f);
      const Tensor id_loss = objectives::loss_id(z_s, ids, config.label_smoothing);
      const Tensor v2tce = objectives::loss_v2tce(bundle.unit_latents, text_table, ids, scale, config.label_smoothing);
      const auto teacher = model.teacher->forward(interleave(bundle.latents), ag::gather_rows(text_table, text_rows), b);
      const Tensor dis = moe::distill_loss(z_s, teacher.z_t, config.reverse_kl);
      const auto total = objectives::stage2_total(id_loss, v2tce, dis, config.alpha1, config.alpha2);
      check_finite(total.report, indices, 2, step);

      const double lr = lr_schedule(step, total_steps, config);
      ag::backward(total.total);
      opt.step(lr);
      opt.zero_grad();

      result.step_totals.push_back(total.report.weighted_total);
      epoch_sum += total.report.weighted_total;
      log.write({{"event", "step"}, {"stage", 2}, {"epoch", epoch}, {"step", step}, {"lr", lr},
                 {"losses", total.report.to_json()}, {"wall_time", elapsed(start)}});
    }
    check_frozen(frozen, result.hash_before, 2, epoch);
    result.epoch_totals.push_back(epoch_sum / steps_per_epoch);
    log.write({{"event", "epoch"}, {"stage", 2}, {"epoch", epoch}, {"mean_total", result.epoch_totals.back()},
               {"wall_time", elapsed(start)}});
  }

  result.held_in_id_final = held_in_id();
  for (const auto& [n, s] : frozen) result.hash_after[n] = s->hash();
  for (const auto& [n, s] : learned) result.hash_after[n] = s->hash();

  if (!config.eval_query.empty() && !config.eval_gallery.empty()) {
    auto q = data::load_manifest(config.eval_query, data::Domain::Target);
    auto g = data::load_manifest(config.eval_gallery, data::Domain::Target);
    result.report = evaluate_checkpoint(model, *q, *g);
    log.write({{"event", "eval"}, {"stage", 2}, {"report", result.report->to_json()}});
  }
  if (!options.out_dir.empty()) {
    result.checkpoint = options.out_dir / "stage2.ckpt";
    save_checkpoint(result.checkpoint, model);
  }
  log.write({{"event", "done"},
             {"stage", 2},
             {"held_in_id_initial", result.held_in_id_initial},
             {"held_in_id_final", result.held_in_id_final},
             {"hash_before", hashes_json(result.hash_before)},
             {"hash_after", hashes_json(result.hash_after)},
             {"checkpoint", result.checkpoint.string()},
             {"wall_time", elapsed(start)}});
  return result;
}

eval::EvalReport evaluate_checkpoint(const Model& model, const data::Dataset& query, const data::Dataset& gallery,
                                     int max_rank) {
  const auto q = eval::extract_features(*model.encoder, query);
  const auto g = eval::extract_features(*model.encoder, gallery);
  return eval::evaluate(q, g, max_rank);
}

}  // namespace mikecoco::train
