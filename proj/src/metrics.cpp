#include "farspk/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace farspk {

void DcfParams::validate() const {
  if (!(p_tar > 0.0 && p_tar < 1.0)) throw ConfigError("invalid config: p_tar must be in (0, 1)");
  if (!(c_miss > 0.0) || !(c_fa > 0.0)) throw ConfigError("invalid config: costs must be > 0");
}

std::vector<DetOperatingPoint> det_sweep(const TrialScoreSet& scores) {
  std::vector<std::pair<double, bool>> sorted;  // (score, is target)
  sorted.reserve(scores.size());
  std::size_t n_tar = 0;
  for (const auto& t : scores) {
    if (!t.label) throw DataError("degenerate labels: unlabeled trial " + t.enroll + " " + t.test);
    if (!std::isfinite(t.score)) throw DataError("non-finite score for " + t.enroll + " " + t.test);
    const bool target = *t.label == TrialLabel::kTarget;
    n_tar += target;
    sorted.emplace_back(t.score, target);
  }
  const std::size_t n_non = sorted.size() - n_tar;
  if (n_tar == 0 || n_non == 0) {
    throw DataError("degenerate labels: both target and nontarget trials are required");
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const double inf = std::numeric_limits<double>::infinity();
  const auto nt = static_cast<double>(n_tar);
  const auto nn = static_cast<double>(n_non);
  std::vector<DetOperatingPoint> det;
  det.push_back({-inf, 0.0, 1.0});
  // Walking up the sorted scores: at threshold s, everything below s is
  // rejected.
  std::size_t misses = 0, rejected_non = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double s = sorted[i].first;
    det.push_back({s, static_cast<double>(misses) / nt,
                   static_cast<double>(n_non - rejected_non) / nn});
    for (; i < sorted.size() && sorted[i].first == s; ++i) {
      (sorted[i].second ? misses : rejected_non) += 1;
    }
  }
  det.push_back({inf, 1.0, 0.0});
  return det;
}

namespace {

double crossing_threshold(double lo, double hi, double alpha) {
  if (std::isinf(lo) && std::isinf(hi)) return 0.0;
  if (std::isinf(lo)) return hi;
  if (std::isinf(hi)) return lo;
  return lo + alpha * (hi - lo);
}

}  // namespace

MetricResult eer(const std::vector<DetOperatingPoint>& det) {
  if (det.empty()) throw DataError("degenerate labels: empty DET");
  for (std::size_t j = 0; j < det.size(); ++j) {
    const double d = det[j].p_miss - det[j].p_fa;
    if (d < 0.0) continue;
    if (d == 0.0) return {det[j].p_miss, det[j].threshold};
    const DetOperatingPoint& a = det[j - 1];
    const DetOperatingPoint& b = det[j];
    const double da = a.p_miss - a.p_fa;
    const double alpha = -da / (d - da);
    return {a.p_miss + alpha * (b.p_miss - a.p_miss),
            crossing_threshold(a.threshold, b.threshold, alpha)};
  }
  throw DataError("degenerate labels: DET never crosses");
}

MetricResult eer(const TrialScoreSet& scores) { return eer(det_sweep(scores)); }

MetricResult min_dcf(const std::vector<DetOperatingPoint>& det, const DcfParams& params) {
  params.validate();
  const double norm = std::min(params.p_tar * params.c_miss, (1.0 - params.p_tar) * params.c_fa);
  MetricResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (const auto& p : det) {
    const double cost =
        (params.p_tar * params.c_miss * p.p_miss + (1.0 - params.p_tar) * params.c_fa * p.p_fa) / norm;
    if (cost < best.value) best = {cost, p.threshold};
  }
  return best;
}

MetricResult min_dcf(const TrialScoreSet& scores, const DcfParams& params) {
  return min_dcf(det_sweep(scores), params);
}

void write_det_csv(const std::filesystem::path& path, const std::vector<DetOperatingPoint>& det) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write DET file " + path.string());
  out << "threshold,p_miss,p_fa\n";
  char buf[128];
  for (const auto& p : det) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.p_miss, p.p_fa);
    out << buf;
  }
  if (!out) throw DataError("failed writing DET file " + path.string());
}

TrialScoreSet labeled_scores(const std::vector<double>& targets,
                             const std::vector<double>& nontargets) {
  TrialScoreSet out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    out.push_back({"tar" + std::to_string(i), "t", targets[i], TrialLabel::kTarget});
  }
  for (std::size_t i = 0; i < nontargets.size(); ++i) {
    out.push_back({"non" + std::to_string(i), "t", nontargets[i], TrialLabel::kNontarget});
  }
  return out;
}

}  // namespace farspk
