#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "farspk/common.h"

namespace farspk {

// Variances below this are treated as zero: the std is reported as 0 and no
// gradient flows through it.
inline constexpr double kVarianceFloor = 1e-10;

// ---------------------------------------------------------------------------
// Pooling. Frame-level inputs are T x C matrices, one row per frame.

// [per-channel mean, per-channel population std], 2C values.
Vector gsp(const Matrix& frames);
// Gradient w.r.t. `frames` given the gradient w.r.t. the pooled output.
Matrix gsp_backward(const Matrix& frames, const Vector& grad_out);

// Multi-query multi-head attention pooling. Channels are split into
// `num_heads` contiguous groups of C / num_heads. For every (query q, head i)
// an attention distribution over time is softmax(H_i v_{q,i}); the block
// output is [weighted mean of H_i, weighted std of H_i]. Blocks are laid out
// query-major, then head. Output dim is 2 * C * num_queries.
struct MqmhaParams {
  int num_queries = 1;
  int num_heads = 1;
  // (num_queries * num_heads) x (C / num_heads); row q * num_heads + i.
  Matrix queries;

  static MqmhaParams zeros(int num_queries, int num_heads, int channels);
  int channels() const { return static_cast<int>(queries.cols()) * num_heads; }
  int output_dim() const { return 2 * channels() * num_queries; }
};

Vector mqmha(const Matrix& frames, const MqmhaParams& params);

struct MqmhaGrad {
  Matrix frames;
  Matrix queries;
};
MqmhaGrad mqmha_backward(const Matrix& frames, const MqmhaParams& params,
                         const Vector& grad_out);

// ---------------------------------------------------------------------------
// Speaker classification head with sub-centers.

struct SpeakerHead {
  int num_classes = 0;
  int num_subcenters = 1;
  int dim = 0;
  // (num_classes * num_subcenters) x dim, row j * num_subcenters + k.
  Matrix weights;
  double scale = 30.0;
  double margin = 0.0;
  // True for classes that have no positive samples in the current stage.
  std::vector<bool> reserved;

  Eigen::Index row(int cls, int sub) const {
    return static_cast<Eigen::Index>(cls) * num_subcenters + sub;
  }
  void validate() const;
};

struct SubcenterCosines {
  Vector cosines;                   // J values in [-1, 1]
  std::vector<int> best_subcenter;  // argmax k per class, lowest k on ties
};

// cos(theta_j) = max_k <x/|x|, W_jk/|W_jk|>.
SubcenterCosines subcenter_cosine(const Vector& x, const SpeakerHead& head);

struct SubcenterGrad {
  Vector x;
  Matrix weights;  // same shape as head.weights; only winning rows nonzero
};
// Subgradient of the max: only the winning sub-center of each class
// receives gradient.
SubcenterGrad subcenter_cosine_backward(const Vector& x, const SpeakerHead& head,
                                        const SubcenterCosines& forward,
                                        const Vector& grad_cosines);

// ---------------------------------------------------------------------------
// Margin softmax losses over cosines.

enum class MarginLoss { kAm, kAam };

const char* to_string(MarginLoss loss);
MarginLoss margin_loss_from_string(const std::string& name);

struct LossResult {
  double loss = 0.0;
  Vector grad;  // d loss / d cosines
  Vector logits;
};

// Target logit s * (cos - m); others s * cos.
LossResult am_softmax_loss(const Vector& cosines, int label, double scale,
                           double margin);
// Target logit s * cos(theta + m); s * (cos - m sin m) once theta + m > pi.
LossResult aam_softmax_loss(const Vector& cosines, int label, double scale,
                            double margin);
LossResult margin_softmax_loss(MarginLoss kind, const Vector& cosines,
                               int label, double scale, double margin);

// ---------------------------------------------------------------------------

enum class MarginCurve { kLinear, kExponential };

struct MarginSchedule {
  double start = 0.0;
  double end = 0.0;
  MarginCurve curve = MarginCurve::kLinear;
  std::size_t total_steps = 1;

  void validate() const;
};

double margin_at(std::size_t step, const MarginSchedule& schedule);

}  // namespace farspk
