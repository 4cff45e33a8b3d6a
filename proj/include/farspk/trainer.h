#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "farspk/common.h"
#include "farspk/frontend.h"
#include "farspk/modelmath.h"

namespace farspk {

// ---------------------------------------------------------------------------
// Synthetic speakers.
//
// Each speaker owns a center in feature space. An utterance is a T x D matrix
// of frames center + session offset + frame noise. Speed variants warp the
// center along the feature axis by the speed factor, the way resampling
// scales a spectrum. Target ("far-field") speakers additionally pass through a
// fixed partial rotation plus a bias.

struct SyntheticConfig {
  int source_speakers = 40;
  int target_speakers = 10;
  int dim = 24;
  int train_utts = 12;  // per speaker and speed variant
  int val_utts = 4;
  int test_utts = 4;
  int frames = 240;
  double center_scale = 1.0;
  double session_sigma = 0.25;
  double frame_sigma = 0.6;
  double shift_angle = 0.6;  // radians per rotated plane
  double shift_bias = 0.5;
  bool speed_variants = true;

  void validate() const;
};

enum class Domain { kSource, kTarget };

struct SyntheticUtterance {
  std::string id;
  std::string speaker;  // base speaker id, e.g. "src007"
  Domain domain = Domain::kSource;
  int speaker_index = 0;  // within its domain
  int speed_index = 0;  // index into SpeakerLabelMap::kFactors
  FeatureMatrix features;
};

struct SyntheticSpeakerSet {
  std::vector<std::string> source;  // base speaker ids
  std::vector<std::string> target;
  std::vector<SyntheticUtterance> train;
  std::vector<SyntheticUtterance> val;
  std::vector<SyntheticUtterance> test;  // speed 1.0 only
};

SyntheticSpeakerSet synthesize_speakers(const SyntheticConfig& config, Rng rng);

// ---------------------------------------------------------------------------
// Class layout across the three stages.
//
// Stage 1: every source speaker in every speed variant (base classes),
// followed by every target speaker in every speed variant (reserved).
// Stage 2: source speakers at speed 1.0, then every target class.
// Stage 3: same head as stage 2.

struct ClassPlan {
  int source = 0;
  int target = 0;
  int variants = 3;

  int stage1_base() const { return variants * source; }
  int reserved() const { return variants * target; }
  int stage1_classes(bool with_reserved) const {
    return stage1_base() + (with_reserved ? reserved() : 0);
  }
  int stage2_classes() const { return source + variants * target; }
  int cohort_size() const { return source + target; }

  // Stage-1 class of (source speaker i, variant f).
  int stage1_source(int i, int f) const { return f * source + i; }
  int stage1_target(int i, int f) const { return stage1_base() + f * target + i; }
  int stage2_source(int i) const { return i; }
  int stage2_target(int i, int f) const { return source + f * target + i; }

  // Stage-2 class -> stage-1 class; targets map to their reserved rows when
  // reserved, otherwise they are fresh.
  std::vector<std::optional<int>> stage2_mapping(bool reserved_rows) const;
};

ClassPlan reference_class_plan();  // 5994 source, 155 target

// ---------------------------------------------------------------------------
// Toy encoder: frames -> tanh(W1 x + b1) -> W2 h + b2 -> pooling -> embedding.

enum class Pooling { kGsp, kMqmha };

const char* to_string(Pooling pooling);
Pooling pooling_from_string(const std::string& name);

struct EncoderConfig {
  int input_dim = 24;
  int hidden = 32;
  int channels = 16;
  Pooling pooling = Pooling::kGsp;
  int num_queries = 1;
  int num_heads = 1;

  int embedding_dim() const {
    return pooling == Pooling::kGsp ? 2 * channels : 2 * channels * num_queries;
  }
  void validate() const;
};

struct EncoderParams {
  EncoderConfig config;
  Matrix w1;  // hidden x input_dim
  Vector b1;
  Matrix w2;  // channels x hidden
  Vector b2;
  MqmhaParams mqmha;
  SpeakerHead head;

  void check_finite() const;
};

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng);

// J = n_base + n_reserved classes with unit-norm rows; the last n_reserved
// classes are flagged reserved.
SpeakerHead build_head(int n_base, int n_reserved, int num_subcenters, int dim,
                       Rng& rng, double scale = 30.0);

// Encoder forward pass plus pooling.
Vector embed(const EncoderParams& params, const FeatureMatrix& features);

struct ParamGrad {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix queries;
  Matrix head;

  static ParamGrad zeros_like(const EncoderParams& params);
  ParamGrad& operator+=(const ParamGrad& other);
  ParamGrad& operator*=(double factor);
};

struct SampleResult {
  double loss = 0.0;
  int predicted = -1;
};

// Loss of one labeled chunk; accumulates its gradient into `grad` when given.
SampleResult sample_loss(const EncoderParams& params, const Matrix& frames, int label,
                         MarginLoss loss, double margin, ParamGrad* grad);

// ---------------------------------------------------------------------------
// Optimization.

// SGD with classical momentum and decoupled weight decay:
// v <- mu v + g;  w <- (1 - lr wd) w - lr v.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(EncoderParams& params, const ParamGrad& grad, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::optional<ParamGrad> velocity_;
};

// Reduce-on-plateau over a metric to be minimized, relative threshold.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double min_lr,
                   double threshold = 1e-4);
  // Returns true when the learning rate was reduced.
  bool observe(double metric);
  double lr() const { return lr_; }
  int reductions() const { return reductions_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double threshold_;
  bool has_best_ = false;
  double best_ = 0.0;
  int bad_ = 0;
  int reductions_ = 0;
};

// ---------------------------------------------------------------------------
// Stages.

inline constexpr double kStage1BaseLr = 0.08;
inline constexpr double kStage2BaseLr = 2e-5;

struct TrainConfig {
  int stage = 1;
  double lr = kStage1BaseLr;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  int batch = 32;
  double plateau_factor = 0.1;
  int plateau_patience = 2;
  double min_lr = 1e-6;
  int chunk_len = 200;
  int epochs = 6;
  // Validation (and scheduler evaluation) period in steps; 0 = once per epoch.
  int validate_every = 0;
  MarginLoss loss = MarginLoss::kAm;
  MarginSchedule margin{0.0, 0.2, MarginCurve::kLinear, 1};
  // When set, the margin schedule spans the whole stage.
  bool margin_spans_stage = true;

  void validate() const;

  static TrainConfig stage1(double lr_scale = 1.0);
  static TrainConfig stage2(double lr_scale = 1.0);
  static TrainConfig stage3(double lr_scale = 1.0);
};

struct LabeledUtterance {
  const FeatureMatrix* features = nullptr;
  int label = -1;
};

struct LogRow {
  std::size_t step = 0;
  double lr = 0.0;
  double margin = 0.0;
  double loss = 0.0;
  double val_acc = 0.0;
};

struct StageReport {
  std::vector<LogRow> log;
  std::size_t steps = 0;
  double final_loss = 0.0;
  double pre_val_acc = 0.0;
  double post_val_acc = 0.0;
  double pre_val_loss = 0.0;
  double post_val_loss = 0.0;
  int chunk_len = 0;
  double margin_begin = 0.0;
  double margin_end = 0.0;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Full-utterance classification loss and accuracy of the head.
Evaluation evaluate(const EncoderParams& params, const std::vector<LabeledUtterance>& data,
                    MarginLoss loss = MarginLoss::kAm, double margin = 0.0);

// Generic stage loop: minibatch SGD over random chunks, plateau scheduling
// at every validation point. `steps_override` replaces epochs * steps/epoch.
StageReport train_stage(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                        const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                        Rng rng, std::optional<std::size_t> steps_override = std::nullopt);

// Stage 1 on source data only. Throws when a sample is labeled with a
// reserved class.
StageReport pretrain_stage1(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                            const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                            Rng rng);

// New head from `mapping` (stage-2 class -> stage-1 class, or fresh); the
// encoder is copied verbatim.
EncoderParams transfer_to_stage2(const EncoderParams& stage1,
                                 const std::vector<std::optional<int>>& mapping, Rng rng);

StageReport finetune_stage2(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                            const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                            Rng rng, std::optional<std::size_t> steps_override = std::nullopt);

// One epoch of large-margin fine-tuning on target data.
StageReport lmft_stage3(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                        const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                        Rng rng);

void write_training_log(const std::filesystem::path& path, const std::vector<LogRow>& log);

// Binary embedding-archive sections: scalars, then one record per tensor row.
void save_params(const std::filesystem::path& path, const EncoderParams& params);
EncoderParams load_params(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Data views over a synthetic set.

struct StageData {
  std::vector<LabeledUtterance> train;
  std::vector<LabeledUtterance> val;
  std::vector<LabeledUtterance> val_target;  // subset of val on target classes
};

StageData stage1_data(const SyntheticSpeakerSet& set, const ClassPlan& plan);
StageData stage2_data(const SyntheticSpeakerSet& set, const ClassPlan& plan);
StageData stage3_data(const SyntheticSpeakerSet& set, const ClassPlan& plan);

ClassPlan class_plan(const SyntheticSpeakerSet& set, const SyntheticConfig& config);

// ---------------------------------------------------------------------------
// Paired reserved-vs-fresh transfer experiment.

struct TransferArm {
  double target_val_acc = 0.0;
  double stage1_train_acc = 0.0;
  double target_row_norm = 0.0;  // mean norm of target-class rows entering stage 2
};

struct TransferTrial {
  uint64_t seed = 0;
  TransferArm reserved;
  TransferArm fresh;
};

struct TransferSetup {
  SyntheticConfig data;
  EncoderConfig encoder;
  TrainConfig stage1 = TrainConfig::stage1();
  TrainConfig stage2 = TrainConfig::stage2();
  int num_subcenters = 1;
  double scale = 30.0;
  std::size_t stage2_steps = 0;  // 0 = stage2.epochs over the data

  // Both stages at 10x the base learning rates (ratio kept), batch 8,
  // 50-frame chunks, 20 stage-1 epochs and a 60-step stage 2.
  static TransferSetup desk_scale();
};

TransferTrial run_transfer_trial(const TransferSetup& setup, uint64_t seed);

}  // namespace farspk
