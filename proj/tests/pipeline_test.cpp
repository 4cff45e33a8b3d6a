#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "farspk/pipeline.h"

namespace farspk {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("farspk_pipeline_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PipelineConfig parse(const std::string& text) {
  std::istringstream in(text);
  return PipelineConfig::parse(in, "test.ini");
}

// A pipeline small enough to run several times per test.
PipelineConfig tiny_config(const fs::path& out) {
  PipelineConfig c = parse(R"(
[pipeline]
seed = 11
[synthetic]
source_speakers = 8
target_speakers = 4
dim = 12
train_utts = 4
val_utts = 3
test_utts = 3
frames = 60
[train]
hidden = 16
channels = 8
batch = 8
chunk_len = 40
stage1_epochs = 3
stage2_steps = 8
[backend]
mean_sample = 8
top_k = 4
)");
  c.out_dir = out;
  return c;
}

int run_cli(const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = std::string(FARSPK_CLI) + " " + args + " > " + stdout_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(PipelineConfig, ParsesSectionsAndKeepsDefaults) {
  const PipelineConfig c = parse(R"(
; comment
[pipeline]
seed = 42
jobs = 3
[synthetic]
dim = 16
[train]
pooling = mqmha
num_queries = 2
num_heads = 2
reserve = no
[backend]
systems = cosine , asnorm
top_k = 50
[metrics]
p_tar = 0.05
)");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.jobs, 3);
  EXPECT_EQ(c.synthetic.dim, 16);
  EXPECT_EQ(c.train.encoder.input_dim, 16);
  EXPECT_EQ(c.train.encoder.pooling, Pooling::kMqmha);
  EXPECT_FALSE(c.train.reserve);
  EXPECT_EQ(c.backend.systems, (std::vector<std::string>{"cosine", "asnorm"}));
  EXPECT_EQ(c.backend.top_k, 50u);
  EXPECT_DOUBLE_EQ(c.metrics.p_tar, 0.05);
  EXPECT_DOUBLE_EQ(c.metrics.c_miss, 1.0);
  EXPECT_EQ(c.synthetic.source_speakers, 40);
  EXPECT_TRUE(c.apply_cmn);
}

TEST(PipelineConfig, RejectsUnknownKeysNamingThem) {
  try {
    parse("[train]\nlearning_rate = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[train] learning_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse("[training]\nlr_scale = 1\n"), ConfigError);
  EXPECT_THROW(parse("seed = 1\n"), ConfigError);
}

TEST(PipelineConfig, RejectsBadValues) {
  try {
    parse("[train]\nbatch = eight\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
  EXPECT_THROW(parse("[train]\nbatch = 8x\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nreserve = maybe\n"), ConfigError);
  EXPECT_THROW(parse("[pipeline]\njobs = 0\n"), ConfigError);
  EXPECT_THROW(parse("[backend]\nsystems = cosine, plda\n"), ConfigError);
  EXPECT_THROW(parse("[train]\npooling = max\n"), ConfigError);
  EXPECT_THROW(parse("[metrics]\np_tar = 1.5\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nnum_heads = 3\nchannels = 16\npooling = mqmha\n"), ConfigError);
}

TEST(PipelineConfig, StageSettingsFollowPresets) {
  const PipelineConfig c = parse("[train]\nlr_scale = 1\nchunk_len = 200\n");
  const TrainConfig s1 = c.train.stage_config(1);
  const TrainConfig s2 = c.train.stage_config(2);
  const TrainConfig s3 = c.train.stage_config(3);
  EXPECT_DOUBLE_EQ(s1.lr, kStage1BaseLr);
  EXPECT_DOUBLE_EQ(s2.lr, kStage2BaseLr);
  EXPECT_EQ(s1.chunk_len, 200);
  EXPECT_EQ(s3.chunk_len, 400);
  EXPECT_EQ(s3.epochs, 1);
  EXPECT_EQ(s3.loss, MarginLoss::kAam);
}

TEST(Stages, ListParsingAndUnknownNames) {
  EXPECT_EQ(parse_stage_list(""), std::vector<std::string>{});
  EXPECT_EQ(parse_stage_list("eval, score"), (std::vector<std::string>{"eval", "score"}));
  EXPECT_THROW(parse_stage_list("train4"), ConfigError);
}

TEST(Stages, EmptyListIsNoOp) {
  const fs::path out = scratch("empty");
  run_pipeline(tiny_config(out), {});
  EXPECT_FALSE(fs::exists(out));
}

TEST(Stages, MissingDependencyIsReported) {
  const fs::path out = scratch("missing");
  for (const std::string stage : {"train1", "train2", "embed", "score", "fuse", "eval"}) {
    try {
      run_pipeline(tiny_config(out), {stage});
      FAIL() << stage << " ran without its inputs";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("stage dependency missing"), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(run_pipeline(tiny_config(out), {"featurize"}), ConfigError);
}

TEST(Artifacts, AtomicWriteLeavesNoPartialFile) {
  const fs::path dir = scratch("atomic");
  const fs::path target = dir / "sub" / "out.txt";
  EXPECT_THROW(atomic_write(target,
                            [](const fs::path& tmp) {
                              std::ofstream(tmp) << "partial";
                              throw DataError("disk full");
                            }),
               DataError);
  EXPECT_FALSE(fs::exists(target));
  EXPECT_FALSE(fs::exists(dir / "sub" / "out.txt.tmp"));
  atomic_write(target, [](const fs::path& tmp) { std::ofstream(tmp) << "done"; });
  EXPECT_EQ(slurp(target), "done");
  EXPECT_FALSE(fs::exists(dir / "sub" / "out.txt.tmp"));
}

TEST(Artifacts, Sha256KnownVectors) {
  const fs::path dir = scratch("sha");
  fs::create_directories(dir);
  std::ofstream(dir / "abc") << "abc";
  std::ofstream(dir / "empty");
  EXPECT_EQ(sha256_file(dir / "abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_file(dir / "empty"), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Artifacts, ManifestListsSortedFilesWithHashes) {
  const fs::path dir = scratch("manifest");
  fs::create_directories(dir / "b");
  std::ofstream(dir / "b" / "x.txt") << "abc";
  std::ofstream(dir / "a.txt") << "";
  write_manifest(dir);
  write_manifest(dir);  // the manifest never lists itself
  EXPECT_EQ(slurp(dir / "manifest.txt"),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855  a.txt\n"
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad  b/x.txt\n");
}

TEST(Artifacts, ParallelForCoversEveryIndexAndRethrows) {
  for (int jobs : {1, 4}) {
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { hits[i] += 1; });
    EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
    EXPECT_THROW(parallel_for(10, jobs,
                              [](std::size_t i) {
                                if (i == 7) throw DataError("boom");
                              }),
                 DataError);
  }
}

TEST(SyntheticSet, TrialsAreAllTargetPairsAtNominalSpeed) {
  SyntheticConfig cfg;
  cfg.source_speakers = 3;
  cfg.target_speakers = 3;
  cfg.dim = 4;
  cfg.train_utts = 2;
  cfg.val_utts = 2;
  cfg.test_utts = 2;
  cfg.frames = 10;
  const SyntheticSpeakerSet set = synthesize_speakers(cfg, Rng(3));
  const TrialScoreSet trials = target_trials(set.val);
  ASSERT_EQ(trials.size(), 15u);  // C(6, 2)
  std::size_t targets = 0;
  for (const auto& t : trials) targets += *t.label == TrialLabel::kTarget;
  EXPECT_EQ(targets, 3u);
  for (const auto& t : trials) EXPECT_EQ(t.enroll.rfind("tgt", 0), 0u);
}

TEST(SyntheticSet, DiskRoundTrip) {
  SyntheticConfig cfg;
  cfg.source_speakers = 3;
  cfg.target_speakers = 2;
  cfg.dim = 4;
  cfg.train_utts = 2;
  cfg.val_utts = 1;
  cfg.test_utts = 2;
  cfg.frames = 10;
  const SyntheticSpeakerSet set = synthesize_speakers(cfg, Rng(5));
  const fs::path dir = scratch("synthetic");
  write_synthetic_set(dir, set);
  const SyntheticSpeakerSet back = read_synthetic_set(dir);
  EXPECT_EQ(back.source, set.source);
  EXPECT_EQ(back.target, set.target);
  ASSERT_EQ(back.train.size(), set.train.size());
  for (std::size_t i = 0; i < set.train.size(); ++i) {
    EXPECT_EQ(back.train[i].id, set.train[i].id);
    EXPECT_EQ(back.train[i].speaker_index, set.train[i].speaker_index);
    EXPECT_EQ(back.train[i].speed_index, set.train[i].speed_index);
    EXPECT_EQ(back.train[i].domain, set.train[i].domain);
    EXPECT_LT((back.train[i].features.frames - set.train[i].features.frames).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_EQ(back.test.size(), set.test.size());
  EXPECT_EQ(read_trial_list(dir / "eval_trials.txt").size(), 6u);  // C(4, 2)
}

TEST(EndToEnd, DeterministicAcrossRunsAndJobCounts) {
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  const std::vector<std::string> stages{"synthesize", "train1", "train2", "train3", "embed",
                                        "score",      "fuse",   "eval"};
  run_pipeline(tiny_config(a), stages);
  PipelineConfig cb = tiny_config(b);
  cb.jobs = 3;
  run_pipeline(cb, stages);
  for (const char* f : {"scores/cosine.eval.txt", "scores/submean.eval.txt", "scores/asnorm.eval.txt",
                        "scores/fused.eval.txt", "results/metrics.txt", "models/stage3.params"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));

  const std::string metrics = slurp(a / "results/metrics.txt");
  EXPECT_NE(metrics.find("[fused]\nEER(%) "), std::string::npos) << metrics;

  // Rerunning a completed stage reproduces its artifact byte for byte.
  const std::string before = slurp(a / "scores/asnorm.eval.txt");
  run_pipeline(tiny_config(a), {"score"});
  EXPECT_EQ(slurp(a / "scores/asnorm.eval.txt"), before);

  // A different seed changes the scores.
  PipelineConfig cc = tiny_config(scratch("det_c"));
  cc.seed = 12;
  run_pipeline(cc, {"synthesize", "train1", "train2", "embed", "score"});
  EXPECT_NE(slurp(cc.out_dir / "scores/cosine.eval.txt"), slurp(a / "scores/cosine.eval.txt"));
}

TEST(WavStages, FeaturizeAndAugmentManifest) {
  const fs::path dir = scratch("wav");
  fs::create_directories(dir / "in");
  std::ofstream manifest(dir / "in" / "manifest.txt");
  for (int u = 0; u < 2; ++u) {
    Waveform w;
    for (int n = 0; n < 8000; ++n) w.samples.push_back(0.3 * std::sin(0.05 * n * (u + 1)));
    write_wav(dir / "in" / ("u" + std::to_string(u) + ".wav"), w);
    manifest << "utt" << u << " u" << u << ".wav spk" << u << "\n";
  }
  manifest.close();

  featurize_manifest(dir / "in" / "manifest.txt", dir / "feats.ffkf", FrontendConfig{}, true, 2);
  const auto feats = read_feature_archive(dir / "feats.ffkf");
  ASSERT_EQ(feats.size(), 2u);
  EXPECT_EQ(feats[1].first, "utt1");
  EXPECT_EQ(feats[0].second.num_frames(), 48);  // 0.5 s at 10 ms shift, 25 ms window

  AugmentSettings settings;
  augment_manifest(dir / "in" / "manifest.txt", settings, dir / "aug1", 9, 1);
  augment_manifest(dir / "in" / "manifest.txt", settings, dir / "aug2", 9, 3);
  const auto entries = read_wav_manifest(dir / "aug1" / "manifest.txt");
  ASSERT_EQ(entries.size(), 6u);
  std::set<std::string> speakers;
  for (const auto& e : entries) speakers.insert(e.speaker);
  EXPECT_EQ(speakers, (std::set<std::string>{"spk0", "spk1", "sp0.9-spk0", "sp0.9-spk1",
                                             "sp1.1-spk0", "sp1.1-spk1"}));
  EXPECT_EQ(entries[2].utt, "sp0.9-utt0");
  EXPECT_EQ(read_wav(entries[2].wav).samples.size(), 8889u);  // round(8000 / 0.9)
  for (const auto& e : entries) {
    EXPECT_EQ(slurp(e.wav), slurp(dir / "aug2" / fs::relative(e.wav, dir / "aug1"))) << e.utt;
  }

  std::ofstream(dir / "bad.txt") << "utt0 only_two_fields\n";
  EXPECT_THROW(read_wav_manifest(dir / "bad.txt"), DataError);
}

TEST(Cli, EvalMatchesOracleFixture) {
  const fs::path data = fs::path(FARSPK_SOURCE_DIR) / "tests/data/eval6";
  const fs::path out = scratch("cli_eval");
  fs::create_directories(out);
  ASSERT_EQ(run_cli("eval --scores " + (data / "scores.txt").string() + " --trials " +
                        (data / "trials.txt").string() + " --det " + (out / "det.csv").string(),
                    out / "stdout.txt"),
            0);
  EXPECT_EQ(slurp(out / "stdout.txt"), slurp(data / "expected.txt"));
  const std::string det = slurp(out / "det.csv");
  EXPECT_EQ(det.rfind("threshold,p_miss,p_fa\n", 0), 0u);
}

TEST(Cli, ExitCodes) {
  const fs::path out = scratch("cli_codes");
  fs::create_directories(out);
  std::ofstream(out / "bad.ini") << "[backend]\ncolour = blue\n";
  EXPECT_EQ(run_cli("pipeline --config " + (out / "bad.ini").string(), out / "log1"), 2);
  EXPECT_NE(slurp(out / "log1").find("[backend] colour"), std::string::npos);
  EXPECT_EQ(run_cli("no-such-command", out / "log2"), 2);
  std::ofstream(out / "ok.ini") << "[pipeline]\nseed = 1\n";
  EXPECT_EQ(run_cli("pipeline --config " + (out / "ok.ini").string() + " --out-dir " +
                        (out / "run").string() + " --stages embed",
                    out / "log3"),
            3);
  EXPECT_EQ(run_cli("pipeline --config " + (out / "ok.ini").string() + " --stages \"\"", out / "log4"), 0);
  std::ofstream(out / "scores.txt") << "a b nan\n";
  std::ofstream(out / "trials.txt") << "a b 1\n";
  EXPECT_EQ(run_cli("eval --scores " + (out / "scores.txt").string() + " --trials " +
                        (out / "trials.txt").string(),
                    out / "log5"),
            3);
}

}  // namespace
}  // namespace farspk
