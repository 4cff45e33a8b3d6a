#include "farspk/backend.h"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "binary_io.h"

namespace farspk {

void write_embedding_section(std::ostream& out, uint32_t dim,
                             const std::vector<EmbeddingRecord>& records) {
  out.write("FFKE", 4);
  detail::put_le<uint32_t>(out, dim);
  detail::put_le<uint64_t>(out, records.size());
  for (const auto& rec : records) {
    if (rec.values.size() != static_cast<Eigen::Index>(dim)) {
      throw DataError("embedding dim mismatch for " + rec.id);
    }
    detail::put_id(out, rec.id);
    for (Eigen::Index i = 0; i < rec.values.size(); ++i) {
      detail::put_f32(out, rec.values[i]);
    }
  }
}

bool read_embedding_section(std::istream& in, std::vector<EmbeddingRecord>& records,
                            uint32_t* dim_out) {
  if (in.peek() == std::char_traits<char>::eof()) {
    return false;
  }
  detail::expect_magic(in, "FFKE", "embedding archive");
  const auto dim = detail::get_le<uint32_t>(in);
  const auto count = detail::get_le<uint64_t>(in);
  if (dim_out) *dim_out = dim;
  for (uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord rec;
    rec.id = detail::get_id(in);
    rec.values.resize(dim);
    for (uint32_t d = 0; d < dim; ++d) rec.values[d] = detail::get_f32(in);
    records.push_back(std::move(rec));
  }
  return true;
}

void write_embedding_archive(const std::filesystem::path& path,
                             const std::vector<EmbeddingRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embedding archive " + path.string());
  const auto dim = records.empty() ? 0u : static_cast<uint32_t>(records.front().values.size());
  write_embedding_section(out, dim, records);
  if (!out) throw DataError("failed writing embedding archive " + path.string());
}

std::vector<EmbeddingRecord> read_embedding_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding archive " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  const bool binary = in && std::string(magic, 4) == "FFKE";
  in.clear();
  in.seekg(0);

  std::vector<EmbeddingRecord> records;
  if (binary) {
    read_embedding_section(in, records);
    return records;
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    EmbeddingRecord rec;
    if (!(ss >> rec.id)) continue;
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    if (!ss.eof()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
    rec.values = Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    if (!records.empty() && rec.values.size() != records.front().values.size()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": dim mismatch");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_embedding_text(const std::filesystem::path& path,
                          const std::vector<EmbeddingRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  for (const auto& rec : records) {
    out << rec.id;
    for (Eigen::Index i = 0; i < rec.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, " %.9g", rec.values[i]);
      out << buf;
    }
    out << '\n';
  }
}

EmbeddingStore::EmbeddingStore(const std::vector<EmbeddingRecord>& records) {
  for (const auto& rec : records) add(rec.id, rec.values);
}

void EmbeddingStore::add(const std::string& id, Vector values) {
  if (!values.allFinite()) {
    throw DataError("non-finite embedding: " + id);
  }
  if (ids_.empty()) {
    dim_ = values.size();
  } else if (values.size() != dim_) {
    throw DataError("embedding dim mismatch for " + id);
  }
  if (!vectors_.emplace(id, std::move(values)).second) {
    throw DataError("duplicate embedding id: " + id);
  }
  ids_.push_back(id);
}

void EmbeddingStore::set_speaker(const std::string& id, const std::string& speaker) {
  speaker_[id] = speaker;
}

const Vector& EmbeddingStore::at(const std::string& id) const {
  const auto it = vectors_.find(id);
  if (it == vectors_.end()) {
    throw DataError("unknown embedding id: " + id);
  }
  return it->second;
}

std::map<std::string, std::vector<std::string>> EmbeddingStore::speaker_groups() const {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& [id, spk] : speaker_) {
    auto& members = groups[spk];
    if (contains(id)) members.push_back(id);
  }
  // Keep utterances in store order so draws do not depend on id spelling.
  std::map<std::string, std::size_t> order;
  for (std::size_t i = 0; i < ids_.size(); ++i) order[ids_[i]] = i;
  for (auto& [spk, members] : groups) {
    std::sort(members.begin(), members.end(),
              [&](const std::string& a, const std::string& b) { return order[a] < order[b]; });
  }
  return groups;
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

}  // namespace

TrialScoreSet read_trial_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trial list " + path.string());
  TrialScoreSet trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tok.size() < 2 || tok.size() > 3) {
      throw DataError(where + ": expected 'enroll test [label]'");
    }
    TrialRecord rec{tok[0], tok[1], 0.0, std::nullopt};
    if (tok.size() == 3) {
      if (tok[2] == "1") {
        rec.label = TrialLabel::kTarget;
      } else if (tok[2] == "0") {
        rec.label = TrialLabel::kNontarget;
      } else {
        throw DataError(where + ": label must be 0 or 1");
      }
    }
    trials.push_back(std::move(rec));
  }
  return trials;
}

void write_trial_list(const std::filesystem::path& path, const TrialScoreSet& trials) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : trials) {
    out << t.enroll << ' ' << t.test;
    if (t.label) out << ' ' << (*t.label == TrialLabel::kTarget ? 1 : 0);
    out << '\n';
  }
}

TrialScoreSet read_score_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open score file " + path.string());
  TrialScoreSet scores;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tok.size() != 3) throw DataError(where + ": expected 'enroll test score'");
    TrialRecord rec{tok[0], tok[1], 0.0, std::nullopt};
    try {
      std::size_t used = 0;
      rec.score = std::stod(tok[2], &used);
      if (used != tok[2].size()) throw std::invalid_argument(tok[2]);
    } catch (const std::exception&) {
      throw DataError(where + ": bad score '" + tok[2] + "'");
    }
    if (!std::isfinite(rec.score)) throw DataError(where + ": non-finite score");
    scores.push_back(std::move(rec));
  }
  return scores;
}

void write_score_file(const std::filesystem::path& path, const TrialScoreSet& scores) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.6f", s.score);
    out << s.enroll << ' ' << s.test << ' ' << buf << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

TrialScoreSet attach_labels(const TrialScoreSet& scores, const TrialScoreSet& trials) {
  if (scores.size() != trials.size()) {
    throw DataError("trial mismatch: " + std::to_string(scores.size()) + " scores vs " +
                    std::to_string(trials.size()) + " trials");
  }
  TrialScoreSet out = scores;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].enroll != trials[i].enroll || out[i].test != trials[i].test) {
      throw DataError("trial mismatch at row " + std::to_string(i + 1));
    }
    out[i].label = trials[i].label;
  }
  return out;
}

double cosine_score(const Vector& enroll, const Vector& test) {
  if (enroll.size() != test.size()) {
    throw DataError("shape error: embedding dims differ");
  }
  const double ne = enroll.norm();
  const double nt = test.norm();
  if (!(ne > 0.0) || !(nt > 0.0)) {
    throw DataError("degenerate embedding");
  }
  return std::clamp(enroll.dot(test) / (ne * nt), -1.0, 1.0);
}

Vector domain_mean(const EmbeddingStore& store, std::size_t sample_size, Rng& rng) {
  if (store.empty()) {
    throw DataError("no embeddings");
  }
  std::vector<std::size_t> order(store.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t take = sample_size;
  if (sample_size > store.size()) {
    spdlog::warn("domain_mean: sample size {} exceeds store size {}, using all",
                 sample_size, store.size());
    take = store.size();
  }
  if (take == 0) {
    throw ConfigError("invalid config: domain mean sample size is 0");
  }
  // partial Fisher-Yates
  for (std::size_t i = 0; i < take && take < store.size(); ++i) {
    std::swap(order[i], order[i + rng.index(order.size() - i)]);
  }
  order.resize(take);
  std::sort(order.begin(), order.end());

  Vector sum = Vector::Zero(store.dim());
  for (std::size_t idx : order) sum += store.at(store.ids()[idx]);
  return sum / static_cast<double>(take);
}

double sub_mean_score(const Vector& enroll, const Vector& test, const Vector& mean) {
  const Vector e = enroll - mean;
  const Vector t = test - mean;
  if (!(e.norm() > 0.0) || !(t.norm() > 0.0)) {
    throw DataError("embedding equals domain mean");
  }
  return cosine_score(e, t);
}

Cohort build_cohort(const EmbeddingStore& store, Rng& rng) {
  if (!store.has_speakers()) {
    throw ConfigError("invalid config: cohort needs a speaker grouping");
  }
  Cohort cohort;
  std::vector<Vector> rows;
  for (const auto& [spk, members] : store.speaker_groups()) {
    if (members.empty()) {
      spdlog::warn("build_cohort: speaker {} has no utterances, skipped", spk);
      continue;
    }
    const std::string& pick = members[rng.index(members.size())];
    cohort.speakers.push_back(spk);
    cohort.source_ids.push_back(pick);
    rows.push_back(store.at(pick));
  }
  cohort.centers.resize(static_cast<Eigen::Index>(rows.size()), store.dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    cohort.centers.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  }
  return cohort;
}

Cohort cohort_from_records(const std::vector<EmbeddingRecord>& records) {
  Cohort cohort;
  if (records.empty()) return cohort;
  cohort.centers.resize(static_cast<Eigen::Index>(records.size()), records.front().values.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].values.size() != cohort.centers.cols()) {
      throw DataError("cohort dim mismatch for " + records[i].id);
    }
    cohort.speakers.push_back(records[i].id);
    cohort.source_ids.push_back(records[i].id);
    cohort.centers.row(static_cast<Eigen::Index>(i)) = records[i].values.transpose();
  }
  return cohort;
}

CohortStats cohort_stats(const Vector& x, const Cohort& cohort, std::size_t top_k) {
  if (top_k < 2) {
    throw ConfigError("invalid config: top_k must be >= 2");
  }
  if (cohort.size() < top_k) {
    throw DataError("cohort too small: " + std::to_string(cohort.size()) +
                    " centers for top_k " + std::to_string(top_k));
  }
  std::vector<double> scores(cohort.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = cosine_score(x, cohort.centers.row(static_cast<Eigen::Index>(i)).transpose());
  }
  std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(top_k - 1),
                   scores.end(), std::greater<>());
  CohortStats stats;
  for (std::size_t i = 0; i < top_k; ++i) stats.mean += scores[i];
  stats.mean /= static_cast<double>(top_k);
  double var = 0.0;
  for (std::size_t i = 0; i < top_k; ++i) {
    var += (scores[i] - stats.mean) * (scores[i] - stats.mean);
  }
  stats.stddev = std::sqrt(var / static_cast<double>(top_k));
  if (stats.stddev < 1e-8) {
    throw DataError("degenerate cohort: top-k score std below 1e-8");
  }
  return stats;
}

double as_norm(double raw, const CohortStats& enroll, const CohortStats& test) {
  return 0.5 * ((raw - enroll.mean) / enroll.stddev + (raw - test.mean) / test.stddev);
}

double as_norm(double raw, const Vector& enroll, const Vector& test,
               const Cohort& cohort, std::size_t top_k) {
  return as_norm(raw, cohort_stats(enroll, cohort, top_k), cohort_stats(test, cohort, top_k));
}

TrialScoreSet score_trials(const TrialScoreSet& trials, const EmbeddingStore& store,
                           const ScoringOptions& options) {
  // Cohort statistics per embedding id; cohort entries see the same
  // mean-subtracted space as the trial embeddings.
  std::map<std::string, CohortStats> memo;
  std::optional<Cohort> shifted;
  if (options.cohort && options.mean) {
    shifted = *options.cohort;
    shifted->centers.rowwise() -= options.mean->transpose();
  }
  const Cohort* cohort = shifted ? &*shifted : options.cohort;

  auto stats_for = [&](const std::string& id, const Vector& x) -> const CohortStats& {
    auto it = memo.find(id);
    if (it == memo.end()) it = memo.emplace(id, cohort_stats(x, *cohort, options.top_k)).first;
    return it->second;
  };

  TrialScoreSet out = trials;
  for (auto& t : out) {
    Vector e = store.at(t.enroll);
    Vector v = store.at(t.test);
    if (options.mean) {
      t.score = sub_mean_score(e, v, *options.mean);
      e -= *options.mean;
      v -= *options.mean;
    } else {
      t.score = cosine_score(e, v);
    }
    if (cohort) {
      t.score = as_norm(t.score, stats_for(t.enroll, e), stats_for(t.test, v));
    }
  }
  return out;
}

namespace {

void check_aligned(const std::vector<TrialScoreSet>& systems) {
  if (systems.empty()) {
    throw ConfigError("invalid config: no systems to fuse");
  }
  for (std::size_t s = 1; s < systems.size(); ++s) {
    if (systems[s].size() != systems[0].size()) {
      throw DataError("trial mismatch: system " + std::to_string(s) + " has " +
                      std::to_string(systems[s].size()) + " trials, expected " +
                      std::to_string(systems[0].size()));
    }
    for (std::size_t i = 0; i < systems[0].size(); ++i) {
      if (systems[s][i].enroll != systems[0][i].enroll ||
          systems[s][i].test != systems[0][i].test) {
        throw DataError("trial mismatch: system " + std::to_string(s) + " row " +
                        std::to_string(i + 1));
      }
    }
  }
}

}  // namespace

FusionModel fit_fusion(const std::vector<TrialScoreSet>& systems,
                       const FusionFitOptions& options) {
  check_aligned(systems);
  const std::size_t n = systems[0].size();
  const Eigen::Index dims = static_cast<Eigen::Index>(systems.size()) + 1;

  Matrix x(static_cast<Eigen::Index>(n), dims);
  Vector y(static_cast<Eigen::Index>(n));
  std::size_t targets = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& label = systems[0][i].label;
    if (!label) throw DataError("degenerate labels: trial " + std::to_string(i + 1) + " unlabeled");
    y[static_cast<Eigen::Index>(i)] = *label == TrialLabel::kTarget ? 1.0 : 0.0;
    targets += *label == TrialLabel::kTarget;
    x(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t s = 0; s < systems.size(); ++s) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s) + 1) = systems[s][i].score;
    }
  }
  if (targets == 0 || targets == n) {
    throw DataError("degenerate labels: both target and nontarget trials are required");
  }

  // Optimize over standardized score columns, then map back.
  Vector center = Vector::Zero(dims), spread = Vector::Ones(dims);
  for (Eigen::Index c = 1; c < dims; ++c) {
    center[c] = x.col(c).mean();
    const double sd = std::sqrt((x.col(c).array() - center[c]).square().mean());
    if (sd > 0.0) spread[c] = sd;
    x.col(c) = (x.col(c).array() - center[c]) / spread[c];
  }

  auto gradient = [&](const Vector& theta) {
    const Vector z = x * theta;
    Vector resid(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) resid[i] = y[i] - 1.0 / (1.0 + std::exp(-z[i]));
    return Vector(x.transpose() * resid / static_cast<double>(n));
  };

  // Gradient ascent with step 1/L, L the Lipschitz bound of the mean
  // gradient, so every step increases the likelihood. The stopping test uses
  // the gradient of the summed log-likelihood.
  const double lipschitz =
      0.25 * Eigen::SelfAdjointEigenSolver<Matrix>(x.transpose() * x / static_cast<double>(n))
                 .eigenvalues()
                 .maxCoeff();
  const double step = 1.0 / lipschitz;
  Vector theta = Vector::Zero(dims);
  FusionModel model;
  for (; model.iterations < options.max_iterations; ++model.iterations) {
    const Vector g = gradient(theta);
    if (g.norm() * static_cast<double>(n) < options.tolerance) {
      model.converged = true;
      break;
    }
    theta += step * g;
  }
  model.bias = theta[0];
  for (Eigen::Index c = 1; c < dims; ++c) {
    model.weights.push_back(theta[c] / spread[c]);
    model.bias -= theta[c] * center[c] / spread[c];
  }
  return model;
}

TrialScoreSet fuse(const std::vector<TrialScoreSet>& systems, const FusionModel& model) {
  check_aligned(systems);
  if (model.weights.size() != systems.size()) {
    throw ConfigError("invalid config: " + std::to_string(model.weights.size()) +
                      " weights for " + std::to_string(systems.size()) + " systems");
  }
  const double total = std::accumulate(model.weights.begin(), model.weights.end(), 0.0);
  if (total == 0.0) {
    throw ConfigError("zero total weight");
  }
  TrialScoreSet out = systems[0];
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < systems.size(); ++s) acc += model.weights[s] * systems[s][i].score;
    out[i].score = acc / total;
  }
  return out;
}

void write_fusion_model(const std::filesystem::path& path, const FusionModel& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  out << "weights";
  for (double w : model.weights) {
    std::snprintf(buf, sizeof buf, " %.17g", w);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%.17g", model.bias);
  out << "\nbias " << buf << '\n';
}

FusionModel read_fusion_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open fusion model " + path.string());
  FusionModel model;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    if (key == "weights") {
      double w;
      while (ss >> w) model.weights.push_back(w);
    } else if (key == "bias") {
      ss >> model.bias;
    } else {
      throw DataError("fusion model: unknown key '" + key + "'");
    }
  }
  if (model.weights.empty()) throw DataError("fusion model has no weights");
  return model;
}

}  // namespace farspk
