#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "farspk/frontend.h"
#include "farspk/metrics.h"
#include "farspk/trainer.h"

namespace farspk {

// ---------------------------------------------------------------------------
// Configuration: INI-style "[section]" headers and "key = value" lines.
// Unknown sections and keys are rejected.

struct TrainSettings {
  double lr_scale = 10.0;
  int batch = 8;
  int chunk_len = 50;
  int stage1_epochs = 20;
  int stage2_epochs = 6;
  int stage2_steps = 0;  // overrides stage2_epochs when > 0
  int stage3_chunk_len = 400;
  int validate_every = 0;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 2;
  double min_lr = 1e-6;
  bool reserve = true;
  EncoderConfig encoder;
  int subcenters = 1;
  double scale = 30.0;

  TrainConfig stage_config(int stage) const;
};

struct BackendSettings {
  std::vector<std::string> systems{"cosine", "submean", "asnorm"};
  std::size_t mean_sample = 40000;
  std::size_t top_k = 300;
  std::string model = "auto";  // auto | stage2 | stage3
};

struct AugmentSettings {
  std::optional<std::filesystem::path> manifest;
  std::optional<std::filesystem::path> rir_dir, noise_dir, music_dir, speech_dir;
  bool speed = true;
};

struct PipelineConfig {
  uint64_t seed = 1;
  std::filesystem::path out_dir = "farspk_out";
  int jobs = 1;

  FrontendConfig frontend;
  std::optional<std::filesystem::path> featurize_manifest;
  bool apply_cmn = true;
  AugmentSettings augment;
  SyntheticConfig synthetic;
  TrainSettings train;
  BackendSettings backend;
  DcfParams metrics;

  // Relative paths in the file resolve against the current directory.
  static PipelineConfig from_file(const std::filesystem::path& path);
  static PipelineConfig parse(std::istream& in, const std::string& name);
  void validate() const;
};

// ---------------------------------------------------------------------------
// Artifacts.

// Writes through `<path>.tmp` and renames into place.
void atomic_write(const std::filesystem::path& path,
                  const std::function<void(const std::filesystem::path&)>& writer);

std::string sha256_file(const std::filesystem::path& path);

// "<sha256>  <relative path>" for every file under `dir` except the manifest
// itself, sorted by path.
void write_manifest(const std::filesystem::path& dir);

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// "utt_id wav_path speaker_id" per line.
struct ManifestEntry {
  std::string utt;
  std::filesystem::path wav;
  std::string speaker;
};
std::vector<ManifestEntry> read_wav_manifest(const std::filesystem::path& path);
void write_wav_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

// Log-mel features (optionally mean-normalized) for every manifest entry.
void featurize_manifest(const std::filesystem::path& manifest, const std::filesystem::path& out,
                        const FrontendConfig& config, bool apply_cmn, int jobs);

// Augments every entry with a recipe drawn from (seed, utterance id) and,
// when `speed` is set, adds the 0.9 / 1.1 speed copies as new speakers.
void augment_manifest(const std::filesystem::path& manifest, const AugmentSettings& settings,
                      const std::filesystem::path& out_dir, uint64_t seed, int jobs);

// Synthetic data on disk: <dir>/{train,val,test}.ffkf, utts.txt
// ("id speaker domain speed split"), dev_trials.txt and eval_trials.txt.
void write_synthetic_set(const std::filesystem::path& dir, const SyntheticSpeakerSet& set);
SyntheticSpeakerSet read_synthetic_set(const std::filesystem::path& dir);

// Every pair (i < j) of speed-1.0 target utterances in `utts`, labeled.
TrialScoreSet target_trials(const std::vector<SyntheticUtterance>& utts);

// Stage 1 starts from a fresh encoder; stages 2 and 3 need `init`.
EncoderParams train_pipeline_stage(int stage, const PipelineConfig& config,
                                   const SyntheticSpeakerSet& set, const EncoderParams* init,
                                   StageReport* report = nullptr);

std::vector<EmbeddingRecord> embed_features(const EncoderParams& params,
                                            const std::vector<FeatureRecord>& features, int jobs);

// "EER(%) <v> threshold <t>" and "minDCF <v> threshold <t>".
std::string format_evaluation(const TrialScoreSet& labeled, const DcfParams& params);

// ---------------------------------------------------------------------------

const std::vector<std::string>& pipeline_stage_names();
// Comma-separated stage list; throws on unknown names.
std::vector<std::string> parse_stage_list(const std::string& csv);

// Runs the given stages in pipeline order and rewrites the manifest.
void run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages);

}  // namespace farspk
