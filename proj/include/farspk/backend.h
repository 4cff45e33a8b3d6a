#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "farspk/common.h"

namespace farspk {

// ---------------------------------------------------------------------------
// Embedding archives.
//
// Binary: "FFKE", u32 dim, u64 count, then `count` records of
// (u16 id length, id bytes, dim little-endian float32). Text: one record per
// line, "id v1 v2 ... vE".

struct EmbeddingRecord {
  std::string id;
  Vector values;
};

void write_embedding_section(std::ostream& out, uint32_t dim,
                             const std::vector<EmbeddingRecord>& records);
// Reads one section; returns false at clean end of stream.
bool read_embedding_section(std::istream& in, std::vector<EmbeddingRecord>& records,
                            uint32_t* dim = nullptr);

void write_embedding_archive(const std::filesystem::path& path,
                             const std::vector<EmbeddingRecord>& records);
// Binary if the file starts with "FFKE", text otherwise.
std::vector<EmbeddingRecord> read_embedding_archive(const std::filesystem::path& path);
void write_embedding_text(const std::filesystem::path& path,
                          const std::vector<EmbeddingRecord>& records);

// ---------------------------------------------------------------------------

class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(const std::vector<EmbeddingRecord>& records);

  void add(const std::string& id, Vector values);
  void set_speaker(const std::string& id, const std::string& speaker);

  bool contains(const std::string& id) const { return vectors_.count(id) != 0; }
  // Fails the run on unknown ids.
  const Vector& at(const std::string& id) const;
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  Eigen::Index dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }

  bool has_speakers() const { return !speaker_.empty(); }
  // speaker -> utterance ids in insertion order; speakers sorted.
  std::map<std::string, std::vector<std::string>> speaker_groups() const;

 private:
  Eigen::Index dim_ = 0;
  std::vector<std::string> ids_;
  std::map<std::string, Vector> vectors_;
  std::map<std::string, std::string> speaker_;
};

// ---------------------------------------------------------------------------
// Trials and scores.

enum class TrialLabel { kNontarget = 0, kTarget = 1 };

struct TrialRecord {
  std::string enroll;
  std::string test;
  double score = 0.0;
  std::optional<TrialLabel> label;
};

using TrialScoreSet = std::vector<TrialRecord>;

// "enroll test [label]" per line, label in {0, 1}.
TrialScoreSet read_trial_list(const std::filesystem::path& path);
void write_trial_list(const std::filesystem::path& path, const TrialScoreSet& trials);
// "enroll test score" per line, score with 6 decimals.
TrialScoreSet read_score_file(const std::filesystem::path& path);
void write_score_file(const std::filesystem::path& path, const TrialScoreSet& scores);
// Copies labels from `trials` onto `scores`, matching row by row.
TrialScoreSet attach_labels(const TrialScoreSet& scores, const TrialScoreSet& trials);

// ---------------------------------------------------------------------------
// Scoring.

double cosine_score(const Vector& enroll, const Vector& test);

Vector domain_mean(const EmbeddingStore& store, std::size_t sample_size, Rng& rng);

// cos(e - mean, t - mean)
double sub_mean_score(const Vector& enroll, const Vector& test, const Vector& mean);

struct Cohort {
  std::vector<std::string> speakers;
  std::vector<std::string> source_ids;  // utterance picked per speaker
  Matrix centers;                        // one row per speaker

  std::size_t size() const { return static_cast<std::size_t>(centers.rows()); }
};

// One uniformly chosen utterance per speaker.
Cohort build_cohort(const EmbeddingStore& store, Rng& rng);
Cohort cohort_from_records(const std::vector<EmbeddingRecord>& records);

struct CohortStats {
  double mean = 0.0;
  double stddev = 0.0;
};

// Moments (population std) of the top_k highest cosine scores of `x`
// against the cohort.
CohortStats cohort_stats(const Vector& x, const Cohort& cohort, std::size_t top_k);

// Symmetric adaptive s-norm.
double as_norm(double raw, const CohortStats& enroll, const CohortStats& test);
double as_norm(double raw, const Vector& enroll, const Vector& test,
               const Cohort& cohort, std::size_t top_k = 300);

struct ScoringOptions {
  std::optional<Vector> mean;  // Sub-Mean when set
  const Cohort* cohort = nullptr;  // AS-Norm when set
  std::size_t top_k = 300;
};

// Scores every trial; unknown ids fail the whole run.
TrialScoreSet score_trials(const TrialScoreSet& trials, const EmbeddingStore& store,
                           const ScoringOptions& options = {});

// ---------------------------------------------------------------------------
// Fusion.

struct FusionModel {
  std::vector<double> weights;
  double bias = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

struct FusionFitOptions {
  double tolerance = 1e-6;  // on the gradient norm of the log-likelihood
  std::size_t max_iterations = 20000;
};

// Logistic regression of the labels on the per-system scores.
FusionModel fit_fusion(const std::vector<TrialScoreSet>& systems,
                       const FusionFitOptions& options = {});

// sum_i w_i s_i / sum_i w_i per trial; the bias is not applied.
TrialScoreSet fuse(const std::vector<TrialScoreSet>& systems, const FusionModel& model);

void write_fusion_model(const std::filesystem::path& path, const FusionModel& model);
FusionModel read_fusion_model(const std::filesystem::path& path);

}  // namespace farspk
