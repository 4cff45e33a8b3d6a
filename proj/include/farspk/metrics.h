#pragma once

#include <filesystem>
#include <vector>

#include "farspk/backend.h"

namespace farspk {

struct DetOperatingPoint {
  double threshold = 0.0;  // accept iff score >= threshold
  double p_miss = 0.0;
  double p_fa = 0.0;
};

struct DcfParams {
  double p_tar = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;

  void validate() const;
};

struct MetricResult {
  double value = 0.0;
  double threshold = 0.0;
};

// Operating points for threshold -inf (accept all), every distinct score in
// increasing order, and +inf (reject all).
std::vector<DetOperatingPoint> det_sweep(const TrialScoreSet& scores);

// Linear interpolation of the first crossing of p_miss - p_fa through zero.
MetricResult eer(const std::vector<DetOperatingPoint>& det);
MetricResult eer(const TrialScoreSet& scores);

// Normalized by min(p_tar c_miss, (1 - p_tar) c_fa); ties keep the lowest
// threshold.
MetricResult min_dcf(const std::vector<DetOperatingPoint>& det, const DcfParams& params = {});
MetricResult min_dcf(const TrialScoreSet& scores, const DcfParams& params = {});

// threshold,p_miss,p_fa rows.
void write_det_csv(const std::filesystem::path& path, const std::vector<DetOperatingPoint>& det);

TrialScoreSet labeled_scores(const std::vector<double>& targets,
                             const std::vector<double>& nontargets);

}  // namespace farspk
