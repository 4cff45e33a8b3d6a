#include "farspk/modelmath.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace farspk {

namespace {

struct Moments {
  Vector mean;
  Vector var;
  Vector std;
};

// Weighted first and second central moments of the rows of `block`. The
// weights sum to one.
Moments weighted_moments(const Matrix& block, const Vector& weights) {
  const Eigen::Index cols = block.cols();
  Moments m;
  m.mean = Vector::Zero(cols);
  for (Eigen::Index t = 0; t < block.rows(); ++t) {
    m.mean += weights[t] * block.row(t).transpose();
  }
  m.var = Vector::Zero(cols);
  for (Eigen::Index t = 0; t < block.rows(); ++t) {
    m.var += weights[t] * (block.row(t).transpose() - m.mean).cwiseAbs2();
  }
  m.std.resize(cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    m.std[c] = m.var[c] >= kVarianceFloor ? std::sqrt(m.var[c]) : 0.0;
  }
  return m;
}

// Gradient of [mean, std] w.r.t. the rows (for fixed weights) and w.r.t.
// the weights themselves.
void weighted_moments_backward(const Matrix& block, const Vector& weights,
                               const Moments& m, const Vector& grad_mean,
                               const Vector& grad_std, Matrix& grad_block,
                               Vector& grad_weights) {
  Vector grad_var(block.cols());
  for (Eigen::Index c = 0; c < block.cols(); ++c) {
    grad_var[c] = m.std[c] > 0.0 ? grad_std[c] / (2.0 * m.std[c]) : 0.0;
  }
  grad_block.resize(block.rows(), block.cols());
  grad_weights.resize(block.rows());
  for (Eigen::Index t = 0; t < block.rows(); ++t) {
    const Vector centered = block.row(t).transpose() - m.mean;
    grad_block.row(t) =
        (weights[t] * (grad_mean + 2.0 * grad_var.cwiseProduct(centered))).transpose();
    // d var / d a_t = (h_t - mu)^2: the path through mu vanishes because the
    // weighted deviations sum to zero.
    grad_weights[t] = grad_mean.dot(block.row(t).transpose()) +
                      grad_var.dot(centered.cwiseAbs2());
  }
}

Vector softmax(const Vector& z) {
  const double top = z.maxCoeff();
  Vector e = (z.array() - top).exp();
  return e / e.sum();
}

void check_frames(const Matrix& frames) {
  if (frames.rows() < 1) {
    throw DataError("pooling needs at least one frame");
  }
}

}  // namespace

Vector gsp(const Matrix& frames) {
  check_frames(frames);
  const Vector uniform =
      Vector::Constant(frames.rows(), 1.0 / static_cast<double>(frames.rows()));
  const Moments m = weighted_moments(frames, uniform);
  Vector out(2 * frames.cols());
  out << m.mean, m.std;
  return out;
}

Matrix gsp_backward(const Matrix& frames, const Vector& grad_out) {
  check_frames(frames);
  const Eigen::Index c = frames.cols();
  const Vector uniform =
      Vector::Constant(frames.rows(), 1.0 / static_cast<double>(frames.rows()));
  const Moments m = weighted_moments(frames, uniform);
  Matrix grad;
  Vector unused;
  weighted_moments_backward(frames, uniform, m, grad_out.head(c), grad_out.tail(c),
                            grad, unused);
  return grad;
}

MqmhaParams MqmhaParams::zeros(int num_queries, int num_heads, int channels) {
  if (num_queries < 1 || num_heads < 1 || channels % num_heads != 0) {
    throw ConfigError("invalid head split: " + std::to_string(channels) +
                      " channels over " + std::to_string(num_heads) + " heads");
  }
  MqmhaParams p;
  p.num_queries = num_queries;
  p.num_heads = num_heads;
  p.queries = Matrix::Zero(num_queries * num_heads, channels / num_heads);
  return p;
}

namespace {

void check_mqmha(const Matrix& frames, const MqmhaParams& params) {
  check_frames(frames);
  if (params.num_heads < 1 || frames.cols() % params.num_heads != 0) {
    throw ConfigError("invalid head split: " + std::to_string(frames.cols()) +
                      " channels over " + std::to_string(params.num_heads) + " heads");
  }
  if (params.queries.rows() != params.num_queries * params.num_heads ||
      params.queries.cols() != frames.cols() / params.num_heads) {
    throw ConfigError("invalid head split: query matrix shape does not match");
  }
}

}  // namespace

Vector mqmha(const Matrix& frames, const MqmhaParams& params) {
  check_mqmha(frames, params);
  const Eigen::Index width = frames.cols() / params.num_heads;
  Vector out(params.output_dim());
  Eigen::Index pos = 0;
  for (int q = 0; q < params.num_queries; ++q) {
    for (int i = 0; i < params.num_heads; ++i) {
      const Matrix block = frames.middleCols(i * width, width);
      const Vector v = params.queries.row(q * params.num_heads + i).transpose();
      const Vector weights = softmax(block * v);
      const Moments m = weighted_moments(block, weights);
      out.segment(pos, width) = m.mean;
      out.segment(pos + width, width) = m.std;
      pos += 2 * width;
    }
  }
  return out;
}

MqmhaGrad mqmha_backward(const Matrix& frames, const MqmhaParams& params,
                         const Vector& grad_out) {
  check_mqmha(frames, params);
  const Eigen::Index width = frames.cols() / params.num_heads;
  MqmhaGrad grad;
  grad.frames = Matrix::Zero(frames.rows(), frames.cols());
  grad.queries = Matrix::Zero(params.queries.rows(), params.queries.cols());

  Eigen::Index pos = 0;
  for (int q = 0; q < params.num_queries; ++q) {
    for (int i = 0; i < params.num_heads; ++i) {
      const Eigen::Index row = q * params.num_heads + i;
      const Matrix block = frames.middleCols(i * width, width);
      const Vector v = params.queries.row(row).transpose();
      const Vector weights = softmax(block * v);
      const Moments m = weighted_moments(block, weights);

      Matrix grad_block;
      Vector grad_weights;
      weighted_moments_backward(block, weights, m, grad_out.segment(pos, width),
                                grad_out.segment(pos + width, width), grad_block,
                                grad_weights);
      // softmax backward
      const Vector grad_scores =
          weights.cwiseProduct(
              (grad_weights.array() - weights.dot(grad_weights)).matrix());
      grad_block += grad_scores * v.transpose();
      grad.queries.row(row) = (block.transpose() * grad_scores).transpose();
      grad.frames.middleCols(i * width, width) += grad_block;
      pos += 2 * width;
    }
  }
  return grad;
}

void SpeakerHead::validate() const {
  if (num_classes < 0 || num_subcenters < 1 || dim < 1) {
    throw ConfigError("invalid dim: speaker head shape");
  }
  if (weights.rows() != static_cast<Eigen::Index>(num_classes) * num_subcenters ||
      weights.cols() != dim) {
    throw ConfigError("invalid dim: speaker head weight matrix shape");
  }
  if (reserved.size() != static_cast<std::size_t>(num_classes)) {
    throw ConfigError("invalid dim: reserved mask size");
  }
  if (!(scale > 0.0) || !(margin >= 0.0)) {
    throw ConfigError("invalid config: head scale must be > 0 and margin >= 0");
  }
}

SubcenterCosines subcenter_cosine(const Vector& x, const SpeakerHead& head) {
  const double xn = x.norm();
  if (!(xn > 0.0) || !std::isfinite(xn)) {
    throw DataError("degenerate embedding");
  }
  if (x.size() != head.dim) {
    throw DataError("shape error: embedding dim " + std::to_string(x.size()) +
                    " vs head dim " + std::to_string(head.dim));
  }
  const Vector xhat = x / xn;
  SubcenterCosines out;
  out.cosines.resize(head.num_classes);
  out.best_subcenter.assign(static_cast<std::size_t>(head.num_classes), 0);
  for (int j = 0; j < head.num_classes; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < head.num_subcenters; ++k) {
      const auto w = head.weights.row(head.row(j, k));
      const double wn = w.norm();
      if (!(wn > 0.0)) {
        throw DataError("degenerate sub-center weight for class " + std::to_string(j));
      }
      const double c = std::clamp(w.dot(xhat) / wn, -1.0, 1.0);
      if (c > best) {
        best = c;
        out.best_subcenter[static_cast<std::size_t>(j)] = k;
      }
    }
    out.cosines[j] = best;
  }
  return out;
}

SubcenterGrad subcenter_cosine_backward(const Vector& x, const SpeakerHead& head,
                                        const SubcenterCosines& forward,
                                        const Vector& grad_cosines) {
  const double xn = x.norm();
  const Vector xhat = x / xn;
  SubcenterGrad grad;
  grad.x = Vector::Zero(x.size());
  grad.weights = Matrix::Zero(head.weights.rows(), head.weights.cols());
  for (int j = 0; j < head.num_classes; ++j) {
    const double g = grad_cosines[j];
    if (g == 0.0) continue;
    const Eigen::Index r = head.row(j, forward.best_subcenter[static_cast<std::size_t>(j)]);
    const Vector w = head.weights.row(r).transpose();
    const double wn = w.norm();
    const Vector what = w / wn;
    const double c = what.dot(xhat);
    grad.x += g * (what - c * xhat) / xn;
    grad.weights.row(r) = (g * (xhat - c * what) / wn).transpose();
  }
  return grad;
}

const char* to_string(MarginLoss loss) {
  return loss == MarginLoss::kAm ? "am" : "aam";
}

MarginLoss margin_loss_from_string(const std::string& name) {
  if (name == "am") return MarginLoss::kAm;
  if (name == "aam") return MarginLoss::kAam;
  throw ConfigError("invalid config: unknown loss '" + name + "'");
}

namespace {

void check_label(const Vector& cosines, int label, double scale) {
  if (label < 0 || label >= cosines.size()) {
    throw DataError("label " + std::to_string(label) + " out of range");
  }
  if (!(scale > 0.0)) {
    throw ConfigError("invalid config: scale must be positive");
  }
}

// Cross-entropy over logits plus d loss / d logits.
LossResult cross_entropy(Vector logits, int label) {
  LossResult r;
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  r.grad = (logits.array() - lse).exp();
  // Sums over the other classes keep full precision when the target dominates.
  r.grad[label] = 0.0;
  const double others = r.grad.sum();
  if (logits[label] >= top) {
    Vector rest = (logits.array() - logits[label]).exp();
    rest[label] = 0.0;
    r.loss = std::log1p(rest.sum());
  } else {
    r.loss = lse - logits[label];
  }
  r.grad[label] = -others;
  r.logits = std::move(logits);
  return r;
}

}  // namespace

LossResult am_softmax_loss(const Vector& cosines, int label, double scale,
                           double margin) {
  check_label(cosines, label, scale);
  Vector logits = scale * cosines;
  logits[label] = scale * (cosines[label] - margin);
  LossResult r = cross_entropy(std::move(logits), label);
  r.grad *= scale;
  return r;
}

LossResult aam_softmax_loss(const Vector& cosines, int label, double scale,
                            double margin) {
  check_label(cosines, label, scale);
  const double c = std::clamp(cosines[label], -1.0, 1.0);
  const double cos_m = std::cos(margin);
  const double sin_m = std::sin(margin);
  // theta + m <= pi  <=>  cos(theta) >= cos(pi - m)
  const double threshold = std::cos(std::numbers::pi - margin);

  double target = 0.0;
  double dtarget = 1.0;
  if (c > threshold) {
    const double sin_theta = std::sqrt(std::max(0.0, 1.0 - c * c));
    target = c * cos_m - sin_theta * sin_m;
    dtarget = cos_m + c * sin_m / std::max(sin_theta, 1e-12);
  } else {
    target = c - margin * sin_m;
  }

  Vector logits = scale * cosines;
  logits[label] = scale * target;
  LossResult r = cross_entropy(std::move(logits), label);
  r.grad *= scale;
  r.grad[label] *= dtarget;
  return r;
}

LossResult margin_softmax_loss(MarginLoss kind, const Vector& cosines,
                               int label, double scale, double margin) {
  return kind == MarginLoss::kAm ? am_softmax_loss(cosines, label, scale, margin)
                                 : aam_softmax_loss(cosines, label, scale, margin);
}

void MarginSchedule::validate() const {
  if (!(start >= 0.0 && start <= end) || total_steps < 1) {
    throw ConfigError("invalid config: margin schedule needs 0 <= start <= end, total_steps >= 1");
  }
  if (curve == MarginCurve::kExponential && !(start > 0.0)) {
    throw ConfigError("invalid exponential schedule: start margin must be > 0");
  }
}

double margin_at(std::size_t step, const MarginSchedule& schedule) {
  schedule.validate();
  if (step > schedule.total_steps) {
    throw ConfigError("invalid config: margin step past schedule end");
  }
  if (step == schedule.total_steps) {
    return schedule.end;
  }
  const double frac =
      static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  if (schedule.curve == MarginCurve::kLinear) {
    return schedule.start + (schedule.end - schedule.start) * frac;
  }
  return schedule.start * std::pow(schedule.end / schedule.start, frac);
}

}  // namespace farspk
