#include "farspk/trainer.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "farspk/augment.h"
#include "farspk/backend.h"

namespace farspk {

namespace {

Vector gaussian(Rng& rng, Eigen::Index n, double sigma = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal(0.0, sigma);
  return v;
}

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sigma) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal(0.0, sigma);
  }
  return m;
}

Vector unit_row(Rng rng, Eigen::Index dim) {
  Vector v = gaussian(rng, dim);
  return v / v.norm();
}

// Resamples `center` along its index axis by `factor`: out[d] = center[d / factor].
Vector warp(const Vector& center, double factor) {
  const Eigen::Index n = center.size();
  Vector out(n);
  for (Eigen::Index d = 0; d < n; ++d) {
    const double pos = std::min(static_cast<double>(d) / factor, static_cast<double>(n - 1));
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const Eigen::Index hi = std::min(lo + 1, n - 1);
    const double frac = pos - static_cast<double>(lo);
    out[d] = (1.0 - frac) * center[lo] + frac * center[hi];
  }
  return out;
}

// Q diag(rot(angle), ...) Q^T for a random orthogonal Q.
Matrix partial_rotation(Rng& rng, int dim, double angle) {
  const Matrix q = Eigen::HouseholderQR<Matrix>(gaussian(rng, dim, dim, 1.0)).householderQ();
  Matrix r = Matrix::Identity(dim, dim);
  for (int i = 0; i + 1 < dim; i += 2) {
    r(i, i) = std::cos(angle);
    r(i, i + 1) = -std::sin(angle);
    r(i + 1, i) = std::sin(angle);
    r(i + 1, i + 1) = std::cos(angle);
  }
  return q * r * q.transpose();
}

std::string speaker_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03d", prefix, i);
  return buf;
}

struct Forward {
  Matrix hidden;    // T x H after tanh
  Matrix channels;  // T x C
  Vector pooled;
};

Forward forward(const EncoderParams& p, const Matrix& frames) {
  if (frames.cols() != p.config.input_dim) {
    throw DataError("shape error: features have " + std::to_string(frames.cols()) +
                    " dims, encoder expects " + std::to_string(p.config.input_dim));
  }
  if (frames.rows() == 0) throw DataError("shape error: no frames");
  Forward f;
  f.hidden = ((frames * p.w1.transpose()).rowwise() + p.b1.transpose()).array().tanh();
  f.channels = (f.hidden * p.w2.transpose()).rowwise() + p.b2.transpose();
  f.pooled = p.config.pooling == Pooling::kGsp ? gsp(f.channels) : mqmha(f.channels, p.mqmha);
  return f;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

// ---------------------------------------------------------------------------

void SyntheticConfig::validate() const {
  if (source_speakers < 1 || target_speakers < 0 || dim < 2 || train_utts < 1 ||
      val_utts < 0 || test_utts < 0 || frames < 2) {
    throw ConfigError("invalid config: synthetic counts out of range");
  }
  if (!(center_scale > 0.0) || session_sigma < 0.0 || frame_sigma < 0.0 || shift_bias < 0.0) {
    throw ConfigError("invalid config: synthetic scales out of range");
  }
}

SyntheticSpeakerSet synthesize_speakers(const SyntheticConfig& config, Rng rng) {
  config.validate();
  SyntheticSpeakerSet set;
  Rng shift_rng = rng.derive("domain-shift");
  const Matrix rotation = partial_rotation(shift_rng, config.dim, config.shift_angle);
  const Vector bias = gaussian(shift_rng, config.dim, config.shift_bias);
  const int variants = config.speed_variants ? static_cast<int>(SpeakerLabelMap::kFactors.size()) : 1;

  auto make_speaker = [&](const std::string& name, Domain domain, int index) {
    Rng spk = rng.derive("speaker:" + name);
    const Vector center = gaussian(spk, config.dim, config.center_scale);
    auto make_utts = [&](std::vector<SyntheticUtterance>& out, const char* split, int count,
                         int max_variants) {
      for (int f = 0; f < max_variants; ++f) {
        const double factor = SpeakerLabelMap::kFactors[static_cast<std::size_t>(f)];
        const Vector warped = warp(center, factor);
        for (int u = 0; u < count; ++u) {
          SyntheticUtterance utt;
          utt.id = (f == 0 ? "" : (f == 1 ? "sp0.9-" : "sp1.1-")) + name + "-" + split +
                   std::to_string(u);
          Rng urng = spk.derive(utt.id);
          utt.speaker = name;
          utt.domain = domain;
          utt.speaker_index = index;
          utt.speed_index = f;
          const Vector session = warped + gaussian(urng, config.dim, config.session_sigma);
          Matrix frames =
              gaussian(urng, config.frames, config.dim, config.frame_sigma).rowwise() +
              session.transpose();
          if (domain == Domain::kTarget) {
            frames = (frames * rotation.transpose()).rowwise() + bias.transpose();
          }
          utt.features.frames = std::move(frames);
          out.push_back(std::move(utt));
        }
      }
    };
    make_utts(set.train, "train", config.train_utts, variants);
    make_utts(set.val, "val", config.val_utts, variants);
    make_utts(set.test, "test", config.test_utts, 1);
  };

  for (int i = 0; i < config.source_speakers; ++i) {
    set.source.push_back(speaker_name("src", i));
    make_speaker(set.source.back(), Domain::kSource, i);
  }
  for (int i = 0; i < config.target_speakers; ++i) {
    set.target.push_back(speaker_name("tgt", i));
    make_speaker(set.target.back(), Domain::kTarget, i);
  }
  return set;
}

std::vector<std::optional<int>> ClassPlan::stage2_mapping(bool reserved_rows) const {
  std::vector<std::optional<int>> mapping(static_cast<std::size_t>(stage2_classes()));
  for (int i = 0; i < source; ++i) mapping[static_cast<std::size_t>(stage2_source(i))] = stage1_source(i, 0);
  if (reserved_rows) {
    for (int f = 0; f < variants; ++f) {
      for (int i = 0; i < target; ++i) {
        mapping[static_cast<std::size_t>(stage2_target(i, f))] = stage1_target(i, f);
      }
    }
  }
  return mapping;
}

ClassPlan reference_class_plan() { return ClassPlan{5994, 155, 3}; }

ClassPlan class_plan(const SyntheticSpeakerSet& set, const SyntheticConfig& config) {
  return ClassPlan{static_cast<int>(set.source.size()), static_cast<int>(set.target.size()),
                   config.speed_variants ? static_cast<int>(SpeakerLabelMap::kFactors.size()) : 1};
}

// ---------------------------------------------------------------------------

const char* to_string(Pooling pooling) { return pooling == Pooling::kGsp ? "gsp" : "mqmha"; }

Pooling pooling_from_string(const std::string& name) {
  if (name == "gsp") return Pooling::kGsp;
  if (name == "mqmha") return Pooling::kMqmha;
  throw ConfigError("invalid config: unknown pooling '" + name + "'");
}

void EncoderConfig::validate() const {
  if (input_dim < 1 || hidden < 1 || channels < 1) {
    throw ConfigError("invalid config: encoder sizes must be positive");
  }
  if (pooling == Pooling::kMqmha &&
      (num_queries < 1 || num_heads < 1 || channels % num_heads != 0)) {
    throw ConfigError("invalid head split: " + std::to_string(channels) + " channels, " +
                      std::to_string(num_heads) + " heads");
  }
}

void EncoderParams::check_finite() const {
  if (!all_finite(w1) || !all_finite(b1) || !all_finite(w2) || !all_finite(b2) ||
      !all_finite(mqmha.queries) || !all_finite(head.weights)) {
    throw DataError("non-finite parameters");
  }
}

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  p.w1 = gaussian(rng, config.hidden, config.input_dim, 1.0 / std::sqrt(config.input_dim));
  p.b1 = Vector::Zero(config.hidden);
  p.w2 = gaussian(rng, config.channels, config.hidden, 1.0 / std::sqrt(config.hidden));
  p.b2 = Vector::Zero(config.channels);
  if (config.pooling == Pooling::kMqmha) {
    p.mqmha = MqmhaParams::zeros(config.num_queries, config.num_heads, config.channels);
    p.mqmha.queries = gaussian(rng, p.mqmha.queries.rows(), p.mqmha.queries.cols(), 0.1);
  } else {
    p.mqmha.queries.resize(0, 0);
  }
  return p;
}

SpeakerHead build_head(int n_base, int n_reserved, int num_subcenters, int dim, Rng& rng,
                       double scale) {
  if (dim <= 0) throw ConfigError("invalid dim: embedding dim must be positive");
  if (n_base < 0 || n_reserved < 0 || num_subcenters < 1) {
    throw ConfigError("invalid config: head counts out of range");
  }
  SpeakerHead head;
  head.num_classes = n_base + n_reserved;
  head.num_subcenters = num_subcenters;
  head.dim = dim;
  head.scale = scale;
  head.weights.resize(static_cast<Eigen::Index>(head.num_classes) * num_subcenters, dim);
  // Rows come from per-row streams so a head with extra reserved classes
  // shares its base rows with a plain head of the same seed.
  for (Eigen::Index r = 0; r < head.weights.rows(); ++r) {
    head.weights.row(r) = unit_row(rng.derive("row:" + std::to_string(r)), dim).transpose();
  }
  head.reserved.assign(static_cast<std::size_t>(head.num_classes), false);
  for (int j = n_base; j < head.num_classes; ++j) head.reserved[static_cast<std::size_t>(j)] = true;
  return head;
}

Vector embed(const EncoderParams& params, const FeatureMatrix& features) {
  return forward(params, features.frames).pooled;
}

ParamGrad ParamGrad::zeros_like(const EncoderParams& p) {
  ParamGrad g;
  g.w1 = Matrix::Zero(p.w1.rows(), p.w1.cols());
  g.b1 = Vector::Zero(p.b1.size());
  g.w2 = Matrix::Zero(p.w2.rows(), p.w2.cols());
  g.b2 = Vector::Zero(p.b2.size());
  g.queries = Matrix::Zero(p.mqmha.queries.rows(), p.mqmha.queries.cols());
  g.head = Matrix::Zero(p.head.weights.rows(), p.head.weights.cols());
  return g;
}

ParamGrad& ParamGrad::operator+=(const ParamGrad& o) {
  w1 += o.w1;
  b1 += o.b1;
  w2 += o.w2;
  b2 += o.b2;
  queries += o.queries;
  head += o.head;
  return *this;
}

ParamGrad& ParamGrad::operator*=(double factor) {
  w1 *= factor;
  b1 *= factor;
  w2 *= factor;
  b2 *= factor;
  queries *= factor;
  head *= factor;
  return *this;
}

SampleResult sample_loss(const EncoderParams& params, const Matrix& frames, int label,
                         MarginLoss loss, double margin, ParamGrad* grad) {
  const Forward f = forward(params, frames);
  const SubcenterCosines cos = subcenter_cosine(f.pooled, params.head);
  const LossResult lr = margin_softmax_loss(loss, cos.cosines, label, params.head.scale, margin);
  SampleResult out;
  out.loss = lr.loss;
  Eigen::Index best = 0;
  cos.cosines.maxCoeff(&best);
  out.predicted = static_cast<int>(best);
  if (!grad) return out;

  const SubcenterGrad sg = subcenter_cosine_backward(f.pooled, params.head, cos, lr.grad);
  grad->head += sg.weights;
  Matrix g_channels;
  if (params.config.pooling == Pooling::kGsp) {
    g_channels = gsp_backward(f.channels, sg.x);
  } else {
    MqmhaGrad mg = mqmha_backward(f.channels, params.mqmha, sg.x);
    g_channels = std::move(mg.frames);
    grad->queries += mg.queries;
  }
  grad->w2 += g_channels.transpose() * f.hidden;
  grad->b2 += g_channels.colwise().sum().transpose();
  const Matrix g_pre =
      ((g_channels * params.w2).array() * (1.0 - f.hidden.array().square())).matrix();
  grad->w1 += g_pre.transpose() * frames;
  grad->b1 += g_pre.colwise().sum().transpose();
  return out;
}

// ---------------------------------------------------------------------------

void SgdMomentum::step(EncoderParams& p, const ParamGrad& g, double lr) {
  if (!velocity_) velocity_ = ParamGrad::zeros_like(p);
  ParamGrad& v = *velocity_;
  const double keep = 1.0 - lr * weight_decay_;
  auto update = [&](auto& w, auto& vel, const auto& grad) {
    vel = momentum_ * vel + grad;
    w = keep * w - lr * vel;
  };
  update(p.w1, v.w1, g.w1);
  update(p.b1, v.b1, g.b1);
  update(p.w2, v.w2, g.w2);
  update(p.b2, v.b2, g.b2);
  if (p.mqmha.queries.size() > 0) update(p.mqmha.queries, v.queries, g.queries);
  update(p.head.weights, v.head, g.head);
}

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double min_lr,
                                   double threshold)
    : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr), threshold_(threshold) {
  if (!(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience < 0 || min_lr < 0.0) {
    throw ConfigError("invalid config: plateau scheduler parameters");
  }
}

bool PlateauScheduler::observe(double metric) {
  if (!has_best_ || metric < best_ - std::abs(best_) * threshold_) {
    has_best_ = true;
    best_ = metric;
    bad_ = 0;
    return false;
  }
  if (++bad_ <= patience_) return false;
  bad_ = 0;
  const double next = std::max(lr_ * factor_, min_lr_);
  if (next >= lr_) return false;
  lr_ = next;
  ++reductions_;
  return true;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage < 1 || stage > 3) throw ConfigError("invalid config: stage must be 1, 2 or 3");
  if (!(lr > 0.0)) throw ConfigError("invalid config: lr must be > 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw ConfigError("invalid config: plateau factor must be in (0, 1)");
  }
  if (momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0 || batch < 1 || chunk_len < 1 ||
      epochs < 0 || validate_every < 0 || plateau_patience < 0 || min_lr < 0.0) {
    throw ConfigError("invalid config: training parameters out of range");
  }
  margin.validate();
}

TrainConfig TrainConfig::stage1(double lr_scale) {
  TrainConfig c;
  c.stage = 1;
  c.lr = kStage1BaseLr * lr_scale;
  c.loss = MarginLoss::kAm;
  c.margin = {0.0, 0.2, MarginCurve::kLinear, 1};
  return c;
}

TrainConfig TrainConfig::stage2(double lr_scale) {
  TrainConfig c;
  c.stage = 2;
  c.lr = kStage2BaseLr * lr_scale;
  c.loss = MarginLoss::kAm;
  c.margin = {0.2, 0.2, MarginCurve::kLinear, 1};
  return c;
}

TrainConfig TrainConfig::stage3(double lr_scale) {
  TrainConfig c;
  c.stage = 3;
  c.lr = kStage2BaseLr * lr_scale;
  c.chunk_len = 400;
  c.epochs = 1;
  c.loss = MarginLoss::kAam;
  c.margin = {0.2, 0.5, MarginCurve::kExponential, 1};
  return c;
}

Evaluation evaluate(const EncoderParams& params, const std::vector<LabeledUtterance>& data,
                    MarginLoss loss, double margin) {
  Evaluation ev;
  if (data.empty()) return ev;
  std::size_t correct = 0;
  for (const auto& item : data) {
    const SampleResult r = sample_loss(params, item.features->frames, item.label, loss, margin, nullptr);
    ev.loss += r.loss;
    correct += r.predicted == item.label;
  }
  ev.loss /= static_cast<double>(data.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return ev;
}

StageReport train_stage(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                        const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                        Rng rng, std::optional<std::size_t> steps_override) {
  config.validate();
  params.head.validate();
  const auto batch = static_cast<std::size_t>(config.batch);
  const std::size_t steps_per_epoch = train.empty() ? 0 : (train.size() + batch - 1) / batch;
  const std::size_t total =
      steps_override ? *steps_override : steps_per_epoch * static_cast<std::size_t>(config.epochs);
  if (total > 0 && train.empty()) throw DataError("no training data");
  const std::size_t period =
      config.validate_every > 0 ? static_cast<std::size_t>(config.validate_every)
                                : std::max<std::size_t>(steps_per_epoch, 1);

  MarginSchedule margin = config.margin;
  if (config.margin_spans_stage) margin.total_steps = std::max<std::size_t>(total, 2) - 1;
  auto margin_for = [&](std::size_t step) {
    return margin_at(std::min(step, margin.total_steps), margin);
  };

  StageReport report;
  report.chunk_len = config.chunk_len;
  report.margin_begin = margin_for(0);
  report.margin_end = total > 0 ? margin_for(total - 1) : report.margin_begin;
  const Evaluation pre = evaluate(params, val, config.loss);
  report.pre_val_acc = report.post_val_acc = pre.accuracy;
  report.pre_val_loss = report.post_val_loss = pre.loss;

  PlateauScheduler scheduler(config.lr, config.plateau_factor, config.plateau_patience,
                             config.min_lr);
  SgdMomentum sgd(config.momentum, config.weight_decay);
  Rng order_rng = rng.derive("order");
  Rng chunk_rng = rng.derive("chunk");
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  double running = 0.0;
  std::size_t running_count = 0;

  for (std::size_t step = 0; step < total; ++step) {
    const double m = margin_for(step);
    ParamGrad grad = ParamGrad::zeros_like(params);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[order_rng.index(i)]);
        }
        cursor = 0;
      }
      const LabeledUtterance& item = train[order[cursor++]];
      if (item.label < 0 || item.label >= params.head.num_classes) {
        throw DataError("label " + std::to_string(item.label) + " outside the " +
                        std::to_string(params.head.num_classes) + "-class head");
      }
      if (params.head.reserved[static_cast<std::size_t>(item.label)]) {
        throw DataError("label leak into reserved classes: class " + std::to_string(item.label));
      }
      const FeatureMatrix piece =
          chunk(*item.features, static_cast<std::size_t>(config.chunk_len), chunk_rng);
      batch_loss += sample_loss(params, piece.frames, item.label, config.loss, m, &grad).loss;
    }
    grad *= 1.0 / static_cast<double>(batch);
    batch_loss /= static_cast<double>(batch);
    sgd.step(params, grad, scheduler.lr());
    params.check_finite();
    running += batch_loss;
    ++running_count;
    report.final_loss = batch_loss;

    if ((step + 1) % period == 0 || step + 1 == total) {
      const Evaluation ev = evaluate(params, val, config.loss);
      report.log.push_back({step + 1, scheduler.lr(), m, running / static_cast<double>(running_count),
                            ev.accuracy});
      running = 0.0;
      running_count = 0;
      if (!val.empty()) scheduler.observe(ev.loss);
      report.post_val_acc = ev.accuracy;
      report.post_val_loss = ev.loss;
    }
  }
  report.steps = total;
  return report;
}

StageReport pretrain_stage1(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                            const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                            Rng rng) {
  for (const auto& item : train) {
    if (item.label >= 0 && item.label < params.head.num_classes &&
        params.head.reserved[static_cast<std::size_t>(item.label)]) {
      throw DataError("label leak into reserved classes: class " + std::to_string(item.label));
    }
  }
  return train_stage(params, train, val, config, rng);
}

EncoderParams transfer_to_stage2(const EncoderParams& stage1,
                                 const std::vector<std::optional<int>>& mapping, Rng rng) {
  const SpeakerHead& old = stage1.head;
  EncoderParams out = stage1;
  SpeakerHead& head = out.head;
  head.num_classes = static_cast<int>(mapping.size());
  head.weights.resize(static_cast<Eigen::Index>(head.num_classes) * head.num_subcenters, head.dim);
  head.reserved.assign(mapping.size(), false);
  for (int j = 0; j < head.num_classes; ++j) {
    const auto& src = mapping[static_cast<std::size_t>(j)];
    if (src && (*src < 0 || *src >= old.num_classes)) {
      throw ConfigError("bad mapping: stage-2 class " + std::to_string(j) +
                        " -> stage-1 class " + std::to_string(*src));
    }
    for (int k = 0; k < head.num_subcenters; ++k) {
      if (src) {
        head.weights.row(head.row(j, k)) = old.weights.row(old.row(*src, k));
      } else {
        head.weights.row(head.row(j, k)) =
            unit_row(rng.derive("fresh:" + std::to_string(head.row(j, k))), head.dim).transpose();
      }
    }
  }
  return out;
}

StageReport finetune_stage2(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                            const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                            Rng rng, std::optional<std::size_t> steps_override) {
  return train_stage(params, train, val, config, rng, steps_override);
}

StageReport lmft_stage3(EncoderParams& params, const std::vector<LabeledUtterance>& train,
                        const std::vector<LabeledUtterance>& val, const TrainConfig& config,
                        Rng rng) {
  TrainConfig one = config;
  one.epochs = 1;
  return train_stage(params, train, val, one, rng);
}

void write_training_log(const std::filesystem::path& path, const std::vector<LogRow>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write training log " + path.string());
  out << "step,lr,margin,loss,val_acc\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6f\n", r.step, r.lr, r.margin, r.loss,
                  r.val_acc);
    out << buf;
  }
  if (!out) throw DataError("failed writing training log " + path.string());
}

// ---------------------------------------------------------------------------

namespace {

std::vector<EmbeddingRecord> matrix_records(const std::string& name, const Matrix& m) {
  std::vector<EmbeddingRecord> recs;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    recs.push_back({name + ":" + std::to_string(r), m.row(r).transpose()});
  }
  return recs;
}

class SectionReader {
 public:
  explicit SectionReader(std::istream& in) : in_(in) {}

  std::vector<EmbeddingRecord> next(const std::string& name, Eigen::Index dim) {
    std::vector<EmbeddingRecord> recs;
    uint32_t got = 0;
    if (!read_embedding_section(in_, recs, &got)) {
      throw DataError("params archive truncated before " + name);
    }
    if (static_cast<Eigen::Index>(got) != dim) {
      throw DataError("params archive: section " + name + " has dim " + std::to_string(got) +
                      ", expected " + std::to_string(dim));
    }
    for (const auto& r : recs) {
      if (r.id.rfind(name, 0) != 0) throw DataError("params archive: unexpected record " + r.id);
    }
    return recs;
  }

  Matrix matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto recs = next(name, cols);
    if (static_cast<Eigen::Index>(recs.size()) != rows) {
      throw DataError("params archive: section " + name + " has wrong row count");
    }
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) m.row(r) = recs[static_cast<std::size_t>(r)].values.transpose();
    return m;
  }

 private:
  std::istream& in_;
};

const char* kMetaKeys[] = {"input_dim", "hidden",     "channels",       "pooling",
                           "num_queries", "num_heads", "num_classes",   "num_subcenters",
                           "scale",     "margin"};

}  // namespace

void save_params(const std::filesystem::path& path, const EncoderParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write params " + path.string());
  const EncoderConfig& c = p.config;
  const double meta[] = {static_cast<double>(c.input_dim),   static_cast<double>(c.hidden),
                         static_cast<double>(c.channels),    c.pooling == Pooling::kGsp ? 0.0 : 1.0,
                         static_cast<double>(c.num_queries), static_cast<double>(c.num_heads),
                         static_cast<double>(p.head.num_classes),
                         static_cast<double>(p.head.num_subcenters), p.head.scale, p.head.margin};
  std::vector<EmbeddingRecord> meta_recs;
  for (std::size_t i = 0; i < std::size(meta); ++i) {
    meta_recs.push_back({std::string("meta.") + kMetaKeys[i], Vector::Constant(1, meta[i])});
  }
  write_embedding_section(out, 1, meta_recs);
  write_embedding_section(out, static_cast<uint32_t>(c.input_dim), matrix_records("enc.w1", p.w1));
  write_embedding_section(out, static_cast<uint32_t>(c.hidden), {{"enc.b1", p.b1}});
  write_embedding_section(out, static_cast<uint32_t>(c.hidden), matrix_records("enc.w2", p.w2));
  write_embedding_section(out, static_cast<uint32_t>(c.channels), {{"enc.b2", p.b2}});
  if (c.pooling == Pooling::kMqmha) {
    write_embedding_section(out, static_cast<uint32_t>(p.mqmha.queries.cols()),
                            matrix_records("pool.q", p.mqmha.queries));
  }
  write_embedding_section(out, static_cast<uint32_t>(p.head.dim), matrix_records("class", p.head.weights));
  Vector reserved(p.head.num_classes);
  for (int j = 0; j < p.head.num_classes; ++j) reserved[j] = p.head.reserved[static_cast<std::size_t>(j)];
  write_embedding_section(out, static_cast<uint32_t>(p.head.num_classes), {{"head.reserved", reserved}});
  if (!out) throw DataError("failed writing params " + path.string());
}

EncoderParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open params " + path.string());
  SectionReader reader(in);
  const auto meta_recs = reader.next("meta.", 1);
  if (meta_recs.size() != std::size(kMetaKeys)) throw DataError("params archive: bad meta section");
  double meta[std::size(kMetaKeys)];
  for (std::size_t i = 0; i < std::size(kMetaKeys); ++i) {
    if (meta_recs[i].id != std::string("meta.") + kMetaKeys[i]) {
      throw DataError("params archive: unexpected record " + meta_recs[i].id);
    }
    meta[i] = meta_recs[i].values[0];
  }
  EncoderParams p;
  EncoderConfig& c = p.config;
  c.input_dim = static_cast<int>(meta[0]);
  c.hidden = static_cast<int>(meta[1]);
  c.channels = static_cast<int>(meta[2]);
  c.pooling = meta[3] == 0.0 ? Pooling::kGsp : Pooling::kMqmha;
  c.num_queries = static_cast<int>(meta[4]);
  c.num_heads = static_cast<int>(meta[5]);
  c.validate();
  p.w1 = reader.matrix("enc.w1", c.hidden, c.input_dim);
  p.b1 = reader.matrix("enc.b1", 1, c.hidden).row(0).transpose();
  p.w2 = reader.matrix("enc.w2", c.channels, c.hidden);
  p.b2 = reader.matrix("enc.b2", 1, c.channels).row(0).transpose();
  if (c.pooling == Pooling::kMqmha) {
    p.mqmha = MqmhaParams::zeros(c.num_queries, c.num_heads, c.channels);
    p.mqmha.queries = reader.matrix("pool.q", p.mqmha.queries.rows(), p.mqmha.queries.cols());
  } else {
    p.mqmha.queries.resize(0, 0);
  }
  SpeakerHead& h = p.head;
  h.num_classes = static_cast<int>(meta[6]);
  h.num_subcenters = static_cast<int>(meta[7]);
  h.scale = meta[8];
  h.margin = meta[9];
  h.dim = c.embedding_dim();
  h.weights = reader.matrix("class", static_cast<Eigen::Index>(h.num_classes) * h.num_subcenters, h.dim);
  const Matrix reserved = reader.matrix("head.reserved", 1, h.num_classes);
  h.reserved.resize(static_cast<std::size_t>(h.num_classes));
  for (int j = 0; j < h.num_classes; ++j) h.reserved[static_cast<std::size_t>(j)] = reserved(0, j) != 0.0;
  h.validate();
  return p;
}

// ---------------------------------------------------------------------------

StageData stage1_data(const SyntheticSpeakerSet& set, const ClassPlan& plan) {
  StageData d;
  auto add = [&](const std::vector<SyntheticUtterance>& utts, std::vector<LabeledUtterance>& out) {
    for (const auto& u : utts) {
      if (u.domain != Domain::kSource || u.speed_index >= plan.variants) continue;
      out.push_back({&u.features, plan.stage1_source(u.speaker_index, u.speed_index)});
    }
  };
  add(set.train, d.train);
  add(set.val, d.val);
  return d;
}

StageData stage2_data(const SyntheticSpeakerSet& set, const ClassPlan& plan) {
  StageData d;
  auto add = [&](const std::vector<SyntheticUtterance>& utts, std::vector<LabeledUtterance>& out,
                 std::vector<LabeledUtterance>* target_out) {
    for (const auto& u : utts) {
      if (u.speed_index >= plan.variants) continue;
      if (u.domain == Domain::kSource) {
        if (u.speed_index == 0) out.push_back({&u.features, plan.stage2_source(u.speaker_index)});
      } else {
        const LabeledUtterance item{&u.features, plan.stage2_target(u.speaker_index, u.speed_index)};
        out.push_back(item);
        if (target_out) target_out->push_back(item);
      }
    }
  };
  add(set.train, d.train, nullptr);
  add(set.val, d.val, &d.val_target);
  return d;
}

StageData stage3_data(const SyntheticSpeakerSet& set, const ClassPlan& plan) {
  StageData d;
  auto add = [&](const std::vector<SyntheticUtterance>& utts, std::vector<LabeledUtterance>& out) {
    for (const auto& u : utts) {
      if (u.domain != Domain::kTarget || u.speed_index != 0) continue;
      out.push_back({&u.features, plan.stage2_target(u.speaker_index, 0)});
    }
  };
  add(set.train, d.train);
  add(set.val, d.val);
  d.val_target = d.val;
  return d;
}

// ---------------------------------------------------------------------------

TransferSetup TransferSetup::desk_scale() {
  TransferSetup s;
  s.stage1 = TrainConfig::stage1(10.0);
  s.stage2 = TrainConfig::stage2(10.0);
  for (TrainConfig* c : {&s.stage1, &s.stage2}) {
    c->batch = 8;
    c->chunk_len = 50;
  }
  s.stage1.epochs = 20;
  s.stage2_steps = 60;
  s.data.frames = 90;
  return s;
}

TransferTrial run_transfer_trial(const TransferSetup& setup, uint64_t seed) {
  Rng root(seed);
  const SyntheticSpeakerSet set = synthesize_speakers(setup.data, root.derive("data"));
  const ClassPlan plan = class_plan(set, setup.data);
  const StageData d1 = stage1_data(set, plan);
  const StageData d2 = stage2_data(set, plan);

  TransferTrial trial;
  trial.seed = seed;
  for (const bool reserved : {true, false}) {
    Rng enc_rng = root.derive("encoder");
    EncoderParams p = init_encoder(setup.encoder, enc_rng);
    Rng head_rng = root.derive("head");
    p.head = build_head(plan.stage1_base(), reserved ? plan.reserved() : 0, setup.num_subcenters,
                        setup.encoder.embedding_dim(), head_rng, setup.scale);
    pretrain_stage1(p, d1.train, d1.val, setup.stage1, root.derive("stage1"));
    TransferArm& arm = reserved ? trial.reserved : trial.fresh;
    arm.stage1_train_acc = evaluate(p, d1.train).accuracy;
    EncoderParams p2 = transfer_to_stage2(p, plan.stage2_mapping(reserved), root.derive("fresh"));
    const Eigen::Index first = p2.head.row(plan.source, 0);
    arm.target_row_norm =
        p2.head.weights.bottomRows(p2.head.weights.rows() - first).rowwise().norm().mean();
    std::optional<std::size_t> steps;
    if (setup.stage2_steps > 0) steps = setup.stage2_steps;
    finetune_stage2(p2, d2.train, d2.val, setup.stage2, root.derive("stage2"), steps);
    arm.target_val_acc = evaluate(p2, d2.val_target).accuracy;
  }
  return trial;
}

}  // namespace farspk
