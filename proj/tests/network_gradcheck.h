#pragma once

#include <vector>

#include "farspk/trainer.h"
#include "gradcheck.h"

namespace farspk::testing {

// Finite-difference check of the whole toy network (encoder, pooling,
// sub-center head, margin loss) on a 2-speaker micro-batch. Returns the
// relative error over all parameters stacked together.
inline double network_gradient_error(Rng& rng, Pooling pooling, MarginLoss loss) {
  EncoderConfig cfg;
  cfg.input_dim = 5;
  cfg.hidden = 6;
  cfg.channels = 4;
  cfg.pooling = pooling;
  cfg.num_queries = 2;
  cfg.num_heads = 2;
  EncoderParams params = init_encoder(cfg, rng);
  for (Eigen::Index i = 0; i < params.b1.size(); ++i) params.b1[i] = rng.uniform(-0.3, 0.3);
  for (Eigen::Index i = 0; i < params.b2.size(); ++i) params.b2[i] = rng.uniform(-0.3, 0.3);
  params.head = build_head(3, 0, 2, cfg.embedding_dim(), rng, 10.0);
  const double margin = rng.uniform(0.0, 0.3);

  std::vector<Matrix> frames;
  for (int s = 0; s < 2; ++s) {
    Matrix m(7, cfg.input_dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() + s;
    frames.push_back(m);
  }
  const int labels[] = {0, 1};

  auto total = [&](const EncoderParams& p) {
    double sum = 0.0;
    for (int s = 0; s < 2; ++s) sum += sample_loss(p, frames[s], labels[s], loss, margin, nullptr).loss;
    return sum;
  };
  ParamGrad analytic = ParamGrad::zeros_like(params);
  for (int s = 0; s < 2; ++s) sample_loss(params, frames[s], labels[s], loss, margin, &analytic);

  std::vector<double> a, n;
  auto check = [&](auto member, const auto& grad) {
    using Mat = std::decay_t<decltype(params.*member)>;
    const Mat g = numeric_gradient<Mat>(
        [&](const Mat& value) {
          EncoderParams copy = params;
          copy.*member = value;
          return total(copy);
        },
        params.*member, 1e-6);
    a.insert(a.end(), grad.data(), grad.data() + grad.size());
    n.insert(n.end(), g.data(), g.data() + g.size());
  };
  check(&EncoderParams::w1, analytic.w1);
  check(&EncoderParams::b1, analytic.b1);
  check(&EncoderParams::w2, analytic.w2);
  check(&EncoderParams::b2, analytic.b2);
  {
    const Matrix g = numeric_gradient<Matrix>(
        [&](const Matrix& value) {
          EncoderParams copy = params;
          copy.head.weights = value;
          return total(copy);
        },
        params.head.weights, 1e-6);
    a.insert(a.end(), analytic.head.data(), analytic.head.data() + analytic.head.size());
    n.insert(n.end(), g.data(), g.data() + g.size());
  }
  if (pooling == Pooling::kMqmha) {
    const Matrix g = numeric_gradient<Matrix>(
        [&](const Matrix& value) {
          EncoderParams copy = params;
          copy.mqmha.queries = value;
          return total(copy);
        },
        params.mqmha.queries, 1e-6);
    a.insert(a.end(), analytic.queries.data(), analytic.queries.data() + analytic.queries.size());
    n.insert(n.end(), g.data(), g.data() + g.size());
  }
  const Eigen::Map<const Vector> av(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const Vector> nv(n.data(), static_cast<Eigen::Index>(n.size()));
  return relative_error(av, nv);
}

}  // namespace farspk::testing
