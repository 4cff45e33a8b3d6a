#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "farspk/backend.h"

using namespace farspk;

namespace {

Vector random_vector(Rng& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

TrialScoreSet labeled_system(const std::vector<double>& scores, const std::vector<int>& labels) {
  TrialScoreSet s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    s.push_back({"e" + std::to_string(i), "t" + std::to_string(i), scores[i],
                 labels[i] ? TrialLabel::kTarget : TrialLabel::kNontarget});
  }
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("farspk_backend_" + name);
}

}  // namespace

TEST(CosineScore, HandValues) {
  EXPECT_DOUBLE_EQ(cosine_score(vec({1, 0}), vec({1, 0})), 1.0);
  EXPECT_DOUBLE_EQ(cosine_score(vec({1, 0}), vec({0, 1})), 0.0);
  EXPECT_NEAR(cosine_score(vec({1, 2, 2}), vec({2, 1, 2})), 8.0 / 9.0, 1e-15);
  EXPECT_THROW(cosine_score(vec({0, 0}), vec({1, 0})), DataError);
}

TEST(CosineScore, SymmetricAndScaleInvariant) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Vector e = random_vector(rng, 16);
    const Vector t = random_vector(rng, 16);
    EXPECT_EQ(cosine_score(e, t), cosine_score(t, e));
    const double a = rng.uniform(0.01, 100), b = rng.uniform(0.01, 100);
    EXPECT_NEAR(cosine_score(a * e, b * t), cosine_score(e, t), 1e-12);
  }
}

TEST(DomainMean, SmallCases) {
  Rng rng(2);
  EmbeddingStore one;
  one.add("a", vec({1, 2, 3}));
  EXPECT_EQ(domain_mean(one, 1, rng), vec({1, 2, 3}));

  EmbeddingStore pair;
  pair.add("a", vec({1, -2}));
  pair.add("b", vec({-1, 2}));
  EXPECT_TRUE(domain_mean(pair, 2, rng).isZero(0));

  EXPECT_THROW(domain_mean(EmbeddingStore{}, 1, rng), DataError);
}

TEST(DomainMean, MatchesDirectSumAndIsSeeded) {
  Rng data(3);
  EmbeddingStore store;
  Vector sum = Vector::Zero(8);
  for (int i = 0; i < 100; ++i) {
    Vector v = random_vector(data, 8);
    sum += v;
    store.add("u" + std::to_string(i), v);
  }
  Rng rng(0);
  EXPECT_LT((domain_mean(store, 100, rng) - sum / 100.0).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((domain_mean(store, 1000, rng) - sum / 100.0).cwiseAbs().maxCoeff(), 1e-6);

  Rng a(17), b(17);
  EXPECT_EQ(domain_mean(store, 40, a), domain_mean(store, 40, b));
}

TEST(SubMean, HandValues) {
  EXPECT_NEAR(sub_mean_score(vec({2, 1}), vec({1, 2}), vec({1, 1})), 0.0, 1e-15);
  const Vector m = vec({0.3, -0.2, 1.0});
  const Vector v = vec({1.0, 2.0, -1.0});
  EXPECT_NEAR(sub_mean_score(m + v, m + v, m), 1.0, 1e-15);
  EXPECT_THROW(sub_mean_score(m, m + v, m), DataError);
}

TEST(SubMean, ZeroMeanIsCosine) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Vector e = random_vector(rng, 12);
    const Vector t = random_vector(rng, 12);
    EXPECT_NEAR(sub_mean_score(e, t, Vector::Zero(12)), cosine_score(e, t), 1e-12);
  }
}

TEST(Cohort, OneCenterPerSpeakerAndSeeded) {
  Rng data(5);
  EmbeddingStore store;
  for (int s = 0; s < 7; ++s) {
    for (int u = 0; u < 1 + s % 3; ++u) {
      const std::string id = "spk" + std::to_string(s) + "-u" + std::to_string(u);
      store.add(id, random_vector(data, 4));
      store.set_speaker(id, "spk" + std::to_string(s));
    }
  }
  store.set_speaker("missing-utt", "ghost");  // no embedding: skipped
  Rng a(9), b(9);
  const Cohort ca = build_cohort(store, a);
  const Cohort cb = build_cohort(store, b);
  EXPECT_EQ(ca.size(), 7u);
  EXPECT_EQ(ca.source_ids, cb.source_ids);
  EXPECT_EQ(ca.centers, cb.centers);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    EXPECT_EQ(ca.source_ids[i].rfind(ca.speakers[i] + "-", 0), 0u);
  }

  EmbeddingStore single;
  single.add("x", vec({1, 2}));
  single.set_speaker("x", "s");
  Rng r(0);
  EXPECT_EQ(build_cohort(single, r).centers.row(0).transpose(), vec({1, 2}));

  EmbeddingStore ungrouped;
  ungrouped.add("x", vec({1, 2}));
  EXPECT_THROW(build_cohort(ungrouped, r), ConfigError);
}

TEST(AsNorm, MatchesSortAndMomentsOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<EmbeddingRecord> recs;
    for (int i = 0; i < 5; ++i) recs.push_back({"c" + std::to_string(i), random_vector(rng, 6)});
    const Cohort cohort = cohort_from_records(recs);
    const Vector e = random_vector(rng, 6);
    const Vector t = random_vector(rng, 6);
    const double raw = cosine_score(e, t);

    auto side = [&](const Vector& x) {
      std::vector<double> s;
      for (const auto& r : recs) s.push_back(x.dot(r.values) / (x.norm() * r.values.norm()));
      std::sort(s.begin(), s.end(), std::greater<>());
      const double mu = (s[0] + s[1] + s[2]) / 3.0;
      const double var = ((s[0] - mu) * (s[0] - mu) + (s[1] - mu) * (s[1] - mu) +
                          (s[2] - mu) * (s[2] - mu)) / 3.0;
      return (raw - mu) / std::sqrt(var);
    };
    EXPECT_NEAR(as_norm(raw, e, t, cohort, 3), 0.5 * (side(e) + side(t)), 1e-10);
  }
}

TEST(AsNorm, CenteredAndSymmetricCases) {
  EXPECT_DOUBLE_EQ(as_norm(0.4, CohortStats{0.4, 0.1}, CohortStats{0.4, 0.3}), 0.0);
  EXPECT_DOUBLE_EQ(as_norm(0.7, CohortStats{0.2, 0.25}, CohortStats{0.2, 0.25}), (0.7 - 0.2) / 0.25);
}

TEST(AsNorm, MonotoneInRawAndShiftInvariantRanking) {
  Rng rng(7);
  std::vector<EmbeddingRecord> recs;
  for (int i = 0; i < 20; ++i) recs.push_back({"c" + std::to_string(i), random_vector(rng, 5)});
  const Cohort cohort = cohort_from_records(recs);
  std::vector<std::pair<double, double>> pairs;  // (original, shifted)
  const double c = 0.37;
  for (int trial = 0; trial < 100; ++trial) {
    const Vector e = random_vector(rng, 5), t = random_vector(rng, 5);
    const auto se = cohort_stats(e, cohort, 10), st = cohort_stats(t, cohort, 10);
    const double raw = cosine_score(e, t);
    EXPECT_LT(as_norm(raw, se, st), as_norm(raw + 1e-3, se, st));
    const double shifted = as_norm(raw + c, CohortStats{se.mean + c, se.stddev},
                                   CohortStats{st.mean + c, st.stddev});
    pairs.emplace_back(as_norm(raw, se, st), shifted);
  }
  // Rank correlation 1: sorting by one key sorts the other.
  std::sort(pairs.begin(), pairs.end());
  for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_LE(pairs[i - 1].second, pairs[i].second);
}

TEST(AsNorm, ErrorPaths) {
  std::vector<EmbeddingRecord> recs{{"a", vec({1, 0})}, {"b", vec({2, 0})}, {"c", vec({0, 1})}};
  const Cohort cohort = cohort_from_records(recs);
  EXPECT_THROW(cohort_stats(vec({1, 0}), cohort, 4), DataError);  // too small
  EXPECT_THROW(cohort_stats(vec({1, 0}), cohort, 2), DataError);  // top-2 both 1.0
  EXPECT_THROW(cohort_stats(vec({1, 0}), cohort, 1), ConfigError);
}

TEST(ScoreTrials, UnknownIdFailsRun) {
  EmbeddingStore store;
  store.add("a", vec({1, 0}));
  TrialScoreSet trials{{"a", "zzz", 0.0, std::nullopt}};
  EXPECT_THROW(score_trials(trials, store), DataError);
}

TEST(ScoreTrials, SubMeanThenAsNorm) {
  Rng rng(8);
  EmbeddingStore store;
  for (int i = 0; i < 6; ++i) store.add("u" + std::to_string(i), random_vector(rng, 4));
  std::vector<EmbeddingRecord> recs;
  for (int i = 0; i < 8; ++i) recs.push_back({"c" + std::to_string(i), random_vector(rng, 4)});
  const Cohort cohort = cohort_from_records(recs);
  TrialScoreSet trials{{"u0", "u1", 0, std::nullopt}, {"u2", "u3", 0, std::nullopt}};
  const Vector mean = random_vector(rng, 4) * 0.1;

  ScoringOptions plain;
  EXPECT_DOUBLE_EQ(score_trials(trials, store, plain)[0].score,
                   cosine_score(store.at("u0"), store.at("u1")));

  ScoringOptions sm;
  sm.mean = mean;
  EXPECT_DOUBLE_EQ(score_trials(trials, store, sm)[1].score,
                   sub_mean_score(store.at("u2"), store.at("u3"), mean));

  ScoringOptions both = sm;
  both.cohort = &cohort;
  both.top_k = 4;
  Cohort shifted = cohort;
  shifted.centers.rowwise() -= mean.transpose();
  const Vector e = store.at("u0") - mean, t = store.at("u1") - mean;
  EXPECT_NEAR(score_trials(trials, store, both)[0].score,
              as_norm(cosine_score(e, t), e, t, shifted, 4), 1e-12);
}

TEST(Fusion, SeparableSystemHitsIterationCap) {
  const auto sys = labeled_system({0.9, 0.8, 0.7, 0.1, 0.2, 0.3}, {1, 1, 1, 0, 0, 0});
  FusionFitOptions opt;
  opt.max_iterations = 2000;
  const FusionModel m = fit_fusion({sys}, opt);
  EXPECT_FALSE(m.converged);
  EXPECT_EQ(m.iterations, 2000u);
  EXPECT_GT(m.weights[0], 10.0);
  for (const auto& t : sys) {
    const bool predicted = m.bias + m.weights[0] * t.score > 0;
    EXPECT_EQ(predicted, *t.label == TrialLabel::kTarget);
  }
}

TEST(Fusion, NoiseSystemGetsSmallWeight) {
  Rng rng(10);
  std::vector<double> good, noise;
  std::vector<int> labels;
  for (int i = 0; i < 2000; ++i) {
    const int y = rng.uniform(0, 1) < 0.3 ? 1 : 0;
    labels.push_back(y);
    good.push_back((y ? 1.0 : -1.0) + rng.normal(0, 0.7));
    noise.push_back(rng.normal());
  }
  const FusionModel m = fit_fusion({labeled_system(good, labels), labeled_system(noise, labels)});
  EXPECT_TRUE(m.converged);
  EXPECT_GT(m.weights[0], 1.0);
  EXPECT_LT(std::abs(m.weights[1]), 0.1 * m.weights[0]);
}

TEST(Fusion, DuplicatedSystemGivesSameFusedScores) {
  Rng rng(11);
  std::vector<double> a, b;
  std::vector<int> labels;
  for (int i = 0; i < 500; ++i) {
    const int y = i % 3 == 0;
    labels.push_back(y);
    a.push_back((y ? 0.6 : 0.1) + rng.normal(0, 0.3));
    b.push_back((y ? 0.5 : 0.2) + rng.normal(0, 0.3));
  }
  const auto sa = labeled_system(a, labels), sb = labeled_system(b, labels);
  const FusionModel two = fit_fusion({sa, sb});
  const FusionModel three = fit_fusion({sa, sa, sb});
  ASSERT_TRUE(two.converged);
  ASSERT_TRUE(three.converged);
  const auto f2 = fuse({sa, sb}, two);
  const auto f3 = fuse({sa, sa, sb}, three);
  for (std::size_t i = 0; i < f2.size(); ++i) EXPECT_NEAR(f2[i].score, f3[i].score, 1e-6);
  EXPECT_NEAR(three.weights[0] + three.weights[1], two.weights[0], 1e-4);
}

TEST(Fusion, ErrorPaths) {
  const auto ok = labeled_system({0.1, 0.2}, {1, 0});
  EXPECT_THROW(fit_fusion({labeled_system({0.1, 0.2}, {1, 1})}), DataError);
  auto shifted = ok;
  shifted[1].test = "other";
  EXPECT_THROW(fit_fusion({ok, shifted}), DataError);
  EXPECT_THROW(fuse({ok}, FusionModel{{0.0}, 0.0}), ConfigError);
}

TEST(Fuse, WeightedAverages) {
  const auto s1 = labeled_system({0.9, 0.2}, {1, 0});
  const auto s2 = labeled_system({0.3, 0.6}, {1, 0});
  EXPECT_NEAR(fuse({s1, s2}, FusionModel{{2.0, 1.0}})[0].score, 0.7, 1e-15);
  EXPECT_NEAR(fuse({s1, s2}, FusionModel{{1.0, 1.0}})[1].score, 0.4, 1e-15);
  EXPECT_EQ(fuse({s1}, FusionModel{{3.3}})[0].score, s1[0].score);
  // equal weights: system order does not matter
  EXPECT_EQ(fuse({s1, s2}, FusionModel{{1.0, 1.0}})[0].score,
            fuse({s2, s1}, FusionModel{{1.0, 1.0}})[0].score);
}

TEST(Files, ArchivesTrialsScoresAndModels) {
  Rng rng(12);
  std::vector<EmbeddingRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back({"utt" + std::to_string(i), random_vector(rng, 5)});

  const auto bin = temp_file("emb.ffke");
  write_embedding_archive(bin, recs);
  const auto txt = temp_file("emb.txt");
  write_embedding_text(txt, recs);
  for (const auto& path : {bin, txt}) {
    const auto back = read_embedding_archive(path);
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      EXPECT_EQ(back[i].id, recs[i].id);
      EXPECT_LT((back[i].values - recs[i].values).cwiseAbs().maxCoeff(), 1e-6);
    }
  }

  const auto scores_path = temp_file("scores.txt");
  TrialScoreSet scores{{"a", "b", 0.1234567, std::nullopt}, {"c", "d", -2.0, std::nullopt}};
  write_score_file(scores_path, scores);
  std::ifstream in(scores_path);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "a b 0.123457");
  EXPECT_NEAR(read_score_file(scores_path)[1].score, -2.0, 0);

  const auto trials_path = temp_file("trials.txt");
  {
    std::ofstream out(trials_path);
    out << "a b 1\nc d 0\n";
  }
  const auto trials = read_trial_list(trials_path);
  EXPECT_EQ(*trials[0].label, TrialLabel::kTarget);
  EXPECT_EQ(*attach_labels(scores, trials)[1].label, TrialLabel::kNontarget);
  {
    std::ofstream out(trials_path);
    out << "a b 2\n";
  }
  EXPECT_THROW(read_trial_list(trials_path), DataError);

  const auto model_path = temp_file("fusion.txt");
  write_fusion_model(model_path, FusionModel{{0.25, 1.5}, -0.3});
  const auto model = read_fusion_model(model_path);
  EXPECT_EQ(model.weights, (std::vector<double>{0.25, 1.5}));
  EXPECT_EQ(model.bias, -0.3);

  for (const auto& p : {bin, txt, scores_path, trials_path, model_path}) std::filesystem::remove(p);
}
