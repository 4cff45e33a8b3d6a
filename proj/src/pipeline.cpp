#include "farspk/pipeline.h"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "farspk/augment.h"
#include "farspk/backend.h"

namespace farspk {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config parsing.

namespace {

const std::map<std::string, std::set<std::string>>& allowed_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"pipeline", {"seed", "out_dir", "jobs"}},
      {"frontend",
       {"sample_rate", "window_ms", "shift_ms", "fft_size", "num_mel_bins", "low_freq",
        "high_freq", "preemphasis", "log_floor", "manifest", "cmn"}},
      {"augment", {"manifest", "rir_dir", "noise_dir", "music_dir", "speech_dir", "speed"}},
      {"synthetic",
       {"source_speakers", "target_speakers", "dim", "train_utts", "val_utts", "test_utts",
        "frames", "center_scale", "session_sigma", "frame_sigma", "shift_angle", "shift_bias",
        "speed_variants"}},
      {"train",
       {"lr_scale", "batch", "chunk_len", "stage1_epochs", "stage2_epochs", "stage2_steps",
        "stage3_chunk_len", "validate_every", "momentum", "weight_decay", "plateau_factor",
        "plateau_patience", "min_lr", "reserve", "hidden", "channels", "pooling", "num_queries",
        "num_heads", "subcenters", "scale"}},
      {"backend", {"systems", "mean_sample", "top_k", "model"}},
      {"metrics", {"p_tar", "c_miss", "c_fa"}},
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class ConfigReader {
 public:
  ConfigReader(const boost::property_tree::ptree& tree, std::string name)
      : tree_(tree), name_(std::move(name)) {}

  template <typename T>
  void get(const std::string& section, const std::string& key, T& out) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return;
    const auto node = sec->get_child_optional(boost::property_tree::ptree::path_type(key, '\0'));
    if (!node) return;
    const std::string raw = trim(node->data());
    if (!convert(raw, out)) {
      throw ConfigError("invalid config: " + name_ + ": [" + section + "] " + key + " = '" + raw +
                        "' is not a valid value");
    }
  }

 private:
  static bool convert(const std::string& raw, std::string& out) {
    out = raw;
    return true;
  }
  static bool convert(const std::string& raw, fs::path& out) {
    out = raw;
    return !raw.empty();
  }
  static bool convert(const std::string& raw, std::optional<fs::path>& out) {
    if (raw.empty()) return false;
    out = fs::path(raw);
    return true;
  }
  static bool convert(const std::string& raw, bool& out) {
    if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return out = true, true;
    if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return out = false, true;
    return false;
  }
  static bool convert(const std::string& raw, std::vector<std::string>& out) {
    out = split_csv(raw);
    return true;
  }
  template <typename T>
  static bool convert(const std::string& raw, T& out) {
    std::istringstream ss(raw);
    T value{};
    if (!(ss >> value)) return false;
    ss >> std::ws;
    if (!ss.eof()) return false;
    out = value;
    return true;
  }

  const boost::property_tree::ptree& tree_;
  std::string name_;
};

}  // namespace

PipelineConfig PipelineConfig::parse(std::istream& in, const std::string& name) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("invalid config: " + name + ":" + std::to_string(e.line()) + ": " +
                      e.message());
  }
  for (const auto& [section, body] : tree) {
    const auto it = allowed_keys().find(section);
    if (it == allowed_keys().end() || body.empty()) {
      throw ConfigError("invalid config: " + name + ": unknown section or key '" + section + "'");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) {
        throw ConfigError("invalid config: " + name + ": unknown key [" + section + "] " + key);
      }
    }
  }

  ConfigReader r(tree, name);
  PipelineConfig c;
  r.get("pipeline", "seed", c.seed);
  r.get("pipeline", "out_dir", c.out_dir);
  r.get("pipeline", "jobs", c.jobs);

  FrontendConfig& fe = c.frontend;
  r.get("frontend", "sample_rate", fe.sample_rate);
  r.get("frontend", "window_ms", fe.window_ms);
  r.get("frontend", "shift_ms", fe.shift_ms);
  r.get("frontend", "fft_size", fe.fft_size);
  r.get("frontend", "num_mel_bins", fe.num_mel_bins);
  r.get("frontend", "low_freq", fe.low_freq);
  r.get("frontend", "high_freq", fe.high_freq);
  r.get("frontend", "preemphasis", fe.preemphasis);
  r.get("frontend", "log_floor", fe.log_floor);
  r.get("frontend", "manifest", c.featurize_manifest);
  r.get("frontend", "cmn", c.apply_cmn);

  AugmentSettings& au = c.augment;
  r.get("augment", "manifest", au.manifest);
  r.get("augment", "rir_dir", au.rir_dir);
  r.get("augment", "noise_dir", au.noise_dir);
  r.get("augment", "music_dir", au.music_dir);
  r.get("augment", "speech_dir", au.speech_dir);
  r.get("augment", "speed", au.speed);

  SyntheticConfig& sy = c.synthetic;
  r.get("synthetic", "source_speakers", sy.source_speakers);
  r.get("synthetic", "target_speakers", sy.target_speakers);
  r.get("synthetic", "dim", sy.dim);
  r.get("synthetic", "train_utts", sy.train_utts);
  r.get("synthetic", "val_utts", sy.val_utts);
  r.get("synthetic", "test_utts", sy.test_utts);
  r.get("synthetic", "frames", sy.frames);
  r.get("synthetic", "center_scale", sy.center_scale);
  r.get("synthetic", "session_sigma", sy.session_sigma);
  r.get("synthetic", "frame_sigma", sy.frame_sigma);
  r.get("synthetic", "shift_angle", sy.shift_angle);
  r.get("synthetic", "shift_bias", sy.shift_bias);
  r.get("synthetic", "speed_variants", sy.speed_variants);

  TrainSettings& tr = c.train;
  r.get("train", "lr_scale", tr.lr_scale);
  r.get("train", "batch", tr.batch);
  r.get("train", "chunk_len", tr.chunk_len);
  r.get("train", "stage1_epochs", tr.stage1_epochs);
  r.get("train", "stage2_epochs", tr.stage2_epochs);
  r.get("train", "stage2_steps", tr.stage2_steps);
  r.get("train", "stage3_chunk_len", tr.stage3_chunk_len);
  r.get("train", "validate_every", tr.validate_every);
  r.get("train", "momentum", tr.momentum);
  r.get("train", "weight_decay", tr.weight_decay);
  r.get("train", "plateau_factor", tr.plateau_factor);
  r.get("train", "plateau_patience", tr.plateau_patience);
  r.get("train", "min_lr", tr.min_lr);
  r.get("train", "reserve", tr.reserve);
  r.get("train", "hidden", tr.encoder.hidden);
  r.get("train", "channels", tr.encoder.channels);
  std::string pooling = to_string(tr.encoder.pooling);
  r.get("train", "pooling", pooling);
  tr.encoder.pooling = pooling_from_string(pooling);
  r.get("train", "num_queries", tr.encoder.num_queries);
  r.get("train", "num_heads", tr.encoder.num_heads);
  r.get("train", "subcenters", tr.subcenters);
  r.get("train", "scale", tr.scale);
  tr.encoder.input_dim = sy.dim;

  BackendSettings& be = c.backend;
  r.get("backend", "systems", be.systems);
  r.get("backend", "mean_sample", be.mean_sample);
  r.get("backend", "top_k", be.top_k);
  r.get("backend", "model", be.model);

  r.get("metrics", "p_tar", c.metrics.p_tar);
  r.get("metrics", "c_miss", c.metrics.c_miss);
  r.get("metrics", "c_fa", c.metrics.c_fa);

  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("invalid config: cannot open " + path.string());
  return parse(in, path.string());
}

void PipelineConfig::validate() const {
  if (jobs < 1) throw ConfigError("invalid config: [pipeline] jobs must be >= 1");
  frontend.validate();
  synthetic.validate();
  train.encoder.validate();
  if (train.encoder.input_dim != synthetic.dim) {
    throw ConfigError("invalid config: encoder input dim must equal [synthetic] dim");
  }
  if (train.subcenters < 1) throw ConfigError("invalid config: [train] subcenters must be >= 1");
  if (!(train.scale > 0.0)) throw ConfigError("invalid config: [train] scale must be > 0");
  if (train.stage2_steps < 0) throw ConfigError("invalid config: [train] stage2_steps must be >= 0");
  for (int stage = 1; stage <= 3; ++stage) train.stage_config(stage).validate();
  static const std::set<std::string> systems{"cosine", "submean", "asnorm", "submean_asnorm"};
  if (backend.systems.empty()) throw ConfigError("invalid config: [backend] systems is empty");
  for (const auto& s : backend.systems) {
    if (!systems.count(s)) throw ConfigError("invalid config: [backend] systems: unknown '" + s + "'");
  }
  if (backend.model != "auto" && backend.model != "stage2" && backend.model != "stage3") {
    throw ConfigError("invalid config: [backend] model must be auto, stage2 or stage3");
  }
  if (backend.top_k < 2) throw ConfigError("invalid config: [backend] top_k must be >= 2");
  if (backend.mean_sample < 1) throw ConfigError("invalid config: [backend] mean_sample must be >= 1");
  metrics.validate();
}

TrainConfig TrainSettings::stage_config(int stage) const {
  TrainConfig c = stage == 1   ? TrainConfig::stage1(lr_scale)
                  : stage == 2 ? TrainConfig::stage2(lr_scale)
                               : TrainConfig::stage3(lr_scale);
  c.batch = batch;
  c.chunk_len = stage == 3 ? stage3_chunk_len : chunk_len;
  c.epochs = stage == 1 ? stage1_epochs : stage == 2 ? stage2_epochs : 1;
  c.validate_every = validate_every;
  c.momentum = momentum;
  c.weight_decay = weight_decay;
  c.plateau_factor = plateau_factor;
  c.plateau_patience = plateau_patience;
  c.min_lr = min_lr;
  return c;
}

// ---------------------------------------------------------------------------
// Artifacts.

void atomic_write(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  try {
    writer(tmp);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

void write_manifest(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), dir).generic_string();
    if (rel == "manifest.txt" || entry.path().extension() == ".tmp") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  atomic_write(dir / "manifest.txt", [&](const fs::path& tmp) {
    std::ofstream out(tmp);
    for (const auto& rel : files) out << sha256_file(dir / rel) << "  " << rel << "\n";
    if (!out) throw DataError("failed writing manifest");
  });
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<ManifestEntry> read_wav_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string wav, extra;
    if (!(ss >> e.utt >> wav >> e.speaker) || (ss >> extra)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 'utt_id wav_path speaker_id'");
    }
    e.wav = fs::path(wav).is_relative() ? path.parent_path() / wav : fs::path(wav);
    out.push_back(std::move(e));
  }
  return out;
}

void write_wav_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  atomic_write(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp);
    for (const auto& e : entries) out << e.utt << " " << e.wav.generic_string() << " " << e.speaker << "\n";
    if (!out) throw DataError("failed writing " + path.string());
  });
}

void featurize_manifest(const fs::path& manifest, const fs::path& out, const FrontendConfig& config,
                        bool apply_cmn, int jobs) {
  config.validate();
  const auto entries = read_wav_manifest(manifest);
  std::vector<FeatureRecord> records(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    FeatureMatrix f = logmel_fbank(read_wav(entries[i].wav), config);
    records[i] = {entries[i].utt, apply_cmn ? cmn(f) : std::move(f)};
  });
  atomic_write(out, [&](const fs::path& tmp) { write_feature_archive(tmp, records); });
}

namespace {

std::vector<Waveform> load_wav_dir(const std::optional<fs::path>& dir) {
  std::vector<Waveform> out;
  if (!dir) return out;
  if (!fs::is_directory(*dir)) throw DataError("not a directory: " + dir->string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(*dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(read_wav(f));
  return out;
}

bool recipe_available(AugmentKind kind, const AugmentSources& s) {
  switch (kind) {
    case AugmentKind::kReverb: return !s.rirs.empty();
    case AugmentKind::kMusic: return !s.music.empty();
    case AugmentKind::kNoiseIntervals: return !s.noises.empty();
    case AugmentKind::kBabble: return !s.speech.empty();
    default: return true;
  }
}

}  // namespace

void augment_manifest(const fs::path& manifest, const AugmentSettings& settings,
                      const fs::path& out_dir, uint64_t seed, int jobs) {
  const auto entries = read_wav_manifest(manifest);
  AugmentSources sources;
  sources.rirs = load_wav_dir(settings.rir_dir);
  sources.noises = load_wav_dir(settings.noise_dir);
  sources.music = load_wav_dir(settings.music_dir);
  sources.speech = load_wav_dir(settings.speech_dir);

  const std::size_t variants = settings.speed ? SpeakerLabelMap::kFactors.size() : 1;
  std::vector<ManifestEntry> out(entries.size() * variants);
  const Rng base = Rng(seed).derive("augment");
  parallel_for(out.size(), jobs, [&](std::size_t k) {
    const std::size_t f = k / entries.size();
    const ManifestEntry& e = entries[k % entries.size()];
    const double factor = SpeakerLabelMap::kFactors[f];
    const std::string prefix = f == 0 ? "" : (f == 1 ? "sp0.9-" : "sp1.1-");
    ManifestEntry result{prefix + e.utt, fs::path("wav") / (prefix + e.utt + ".wav"), prefix + e.speaker};
    Waveform wave = read_wav(e.wav);
    if (factor != 1.0) wave = speed_perturb(wave, factor);
    Rng rng = base.derive(result.utt);
    AugmentRecipe recipe = choose_recipe(rng);
    if (!recipe_available(recipe.kind, sources)) recipe = AugmentRecipe{};
    const Waveform augmented = augment(wave, recipe, sources, rng);
    atomic_write(out_dir / result.wav, [&](const fs::path& tmp) { write_wav(tmp, augmented); });
    out[k] = std::move(result);
  });
  write_wav_manifest(out_dir / "manifest.txt", out);
}

// ---------------------------------------------------------------------------
// Synthetic data on disk.

namespace {

const char* kSplits[] = {"train", "val", "test"};

std::vector<SyntheticUtterance>& split_of(SyntheticSpeakerSet& set, int i) {
  return i == 0 ? set.train : i == 1 ? set.val : set.test;
}

void write_trials_file(const fs::path& path, const TrialScoreSet& trials) {
  atomic_write(path, [&](const fs::path& tmp) { write_trial_list(tmp, trials); });
}

}  // namespace

TrialScoreSet target_trials(const std::vector<SyntheticUtterance>& utts) {
  std::vector<const SyntheticUtterance*> pool;
  for (const auto& u : utts) {
    if (u.domain == Domain::kTarget && u.speed_index == 0) pool.push_back(&u);
  }
  TrialScoreSet trials;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      trials.push_back({pool[i]->id, pool[j]->id, 0.0,
                        pool[i]->speaker == pool[j]->speaker ? TrialLabel::kTarget
                                                             : TrialLabel::kNontarget});
    }
  }
  return trials;
}

void write_synthetic_set(const fs::path& dir, const SyntheticSpeakerSet& set_in) {
  SyntheticSpeakerSet& set = const_cast<SyntheticSpeakerSet&>(set_in);
  for (int s = 0; s < 3; ++s) {
    std::vector<FeatureRecord> records;
    for (const auto& u : split_of(set, s)) records.push_back({u.id, u.features});
    atomic_write(dir / (std::string(kSplits[s]) + ".ffkf"),
                 [&](const fs::path& tmp) { write_feature_archive(tmp, records); });
  }
  atomic_write(dir / "speakers.txt", [&](const fs::path& tmp) {
    std::ofstream out(tmp);
    for (const auto& s : set.source) out << s << " source\n";
    for (const auto& s : set.target) out << s << " target\n";
  });
  atomic_write(dir / "utts.txt", [&](const fs::path& tmp) {
    std::ofstream out(tmp);
    for (int s = 0; s < 3; ++s) {
      for (const auto& u : split_of(set, s)) {
        out << u.id << " " << u.speaker << " "
            << (u.domain == Domain::kSource ? "source" : "target") << " " << u.speed_index << " "
            << kSplits[s] << "\n";
      }
    }
  });
  write_trials_file(dir / "dev_trials.txt", target_trials(set.val));
  write_trials_file(dir / "eval_trials.txt", target_trials(set.test));
}

SyntheticSpeakerSet read_synthetic_set(const fs::path& dir) {
  SyntheticSpeakerSet set;
  std::map<std::string, std::pair<Domain, int>> speakers;
  {
    std::ifstream in(dir / "speakers.txt");
    if (!in) throw DataError("cannot open " + (dir / "speakers.txt").string());
    std::string name, domain;
    while (in >> name >> domain) {
      auto& list = domain == "source" ? set.source : set.target;
      speakers[name] = {domain == "source" ? Domain::kSource : Domain::kTarget,
                        static_cast<int>(list.size())};
      list.push_back(name);
    }
  }
  std::map<std::string, SyntheticUtterance> info;
  {
    std::ifstream in(dir / "utts.txt");
    if (!in) throw DataError("cannot open " + (dir / "utts.txt").string());
    std::string id, speaker, domain, split;
    int speed = 0;
    while (in >> id >> speaker >> domain >> speed >> split) {
      const auto it = speakers.find(speaker);
      if (it == speakers.end()) throw DataError("utts.txt: unknown speaker " + speaker);
      SyntheticUtterance u;
      u.id = id;
      u.speaker = speaker;
      u.domain = it->second.first;
      u.speaker_index = it->second.second;
      u.speed_index = speed;
      info[id] = std::move(u);
    }
  }
  for (int s = 0; s < 3; ++s) {
    for (auto& [id, features] : read_feature_archive(dir / (std::string(kSplits[s]) + ".ffkf"))) {
      const auto it = info.find(id);
      if (it == info.end()) throw DataError("synthetic archive: unknown utterance " + id);
      SyntheticUtterance u = it->second;
      u.features = std::move(features);
      split_of(set, s).push_back(std::move(u));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------

EncoderParams train_pipeline_stage(int stage, const PipelineConfig& config,
                                   const SyntheticSpeakerSet& set, const EncoderParams* init,
                                   StageReport* report) {
  const ClassPlan plan = class_plan(set, config.synthetic);
  const TrainConfig tc = config.train.stage_config(stage);
  const Rng root(config.seed);
  StageReport local;
  StageReport& rep = report ? *report : local;

  if (stage == 1) {
    Rng enc_rng = root.derive("encoder");
    EncoderParams p = init_encoder(config.train.encoder, enc_rng);
    Rng head_rng = root.derive("head");
    p.head = build_head(plan.stage1_base(), config.train.reserve ? plan.reserved() : 0,
                        config.train.subcenters, config.train.encoder.embedding_dim(), head_rng,
                        config.train.scale);
    const StageData d = stage1_data(set, plan);
    rep = pretrain_stage1(p, d.train, d.val, tc, root.derive("train1"));
    return p;
  }
  if (!init) throw DataError("stage dependency missing: stage " + std::to_string(stage) + " needs initial params");
  if (stage == 2) {
    const bool reserved =
        std::count(init->head.reserved.begin(), init->head.reserved.end(), true) > 0;
    if (init->head.num_classes != plan.stage1_classes(reserved)) {
      throw DataError("stage dependency missing: stage-1 params have " +
                      std::to_string(init->head.num_classes) + " classes, data needs " +
                      std::to_string(plan.stage1_classes(reserved)));
    }
    EncoderParams p = transfer_to_stage2(*init, plan.stage2_mapping(reserved), root.derive("fresh"));
    const StageData d = stage2_data(set, plan);
    std::optional<std::size_t> steps;
    if (config.train.stage2_steps > 0) steps = static_cast<std::size_t>(config.train.stage2_steps);
    rep = finetune_stage2(p, d.train, d.val, tc, root.derive("train2"), steps);
    return p;
  }
  if (stage == 3) {
    if (init->head.num_classes != plan.stage2_classes()) {
      throw DataError("stage dependency missing: stage-3 needs stage-2 params");
    }
    EncoderParams p = *init;
    const StageData d = stage3_data(set, plan);
    rep = lmft_stage3(p, d.train, d.val, tc, root.derive("train3"));
    return p;
  }
  throw ConfigError("invalid config: stage must be 1, 2 or 3");
}

std::vector<EmbeddingRecord> embed_features(const EncoderParams& params,
                                            const std::vector<FeatureRecord>& features, int jobs) {
  std::vector<EmbeddingRecord> out(features.size());
  parallel_for(features.size(), jobs, [&](std::size_t i) {
    out[i] = {features[i].first, embed(params, features[i].second)};
  });
  return out;
}

std::string format_evaluation(const TrialScoreSet& labeled, const DcfParams& params) {
  const MetricResult e = eer(labeled);
  const MetricResult d = min_dcf(labeled, params);
  char buf[256];
  std::snprintf(buf, sizeof buf, "EER(%%) %.4f threshold %.6f\nminDCF %.4f threshold %.6f\n",
                100.0 * e.value, e.threshold, d.value, d.threshold);
  return buf;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& pipeline_stage_names() {
  static const std::vector<std::string> names{"synthesize", "featurize", "augment", "train1",
                                              "train2",     "train3",    "embed",   "score",
                                              "fuse",       "eval"};
  return names;
}

std::vector<std::string> parse_stage_list(const std::string& csv) {
  std::vector<std::string> out;
  for (const auto& s : split_csv(csv)) {
    const auto& names = pipeline_stage_names();
    if (std::find(names.begin(), names.end(), s) == names.end()) {
      throw ConfigError("invalid config: unknown stage '" + s + "'");
    }
    out.push_back(s);
  }
  return out;
}

namespace {

void require(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw DataError("stage dependency missing: " + stage + " needs " + path.string());
  }
}

void save_params_atomic(const fs::path& path, const EncoderParams& p) {
  atomic_write(path, [&](const fs::path& tmp) { save_params(tmp, p); });
}

struct Layout {
  fs::path root, data, models, logs, emb, scores, results;
  explicit Layout(const fs::path& out)
      : root(out),
        data(out / "data"),
        models(out / "models"),
        logs(out / "logs"),
        emb(out / "embeddings"),
        scores(out / "scores"),
        results(out / "results") {}
  fs::path score_file(const std::string& system, const std::string& split) const {
    return scores / (system + "." + split + ".txt");
  }
};

void run_train(int stage, const PipelineConfig& config, const Layout& L) {
  const std::string name = "train" + std::to_string(stage);
  require(L.data / "utts.txt", name);
  std::optional<EncoderParams> init;
  if (stage > 1) {
    const fs::path prev = L.models / ("stage" + std::to_string(stage - 1) + ".params");
    require(prev, name);
    init = load_params(prev);
  }
  const SyntheticSpeakerSet set = read_synthetic_set(L.data);
  StageReport report;
  const EncoderParams p =
      train_pipeline_stage(stage, config, set, init ? &*init : nullptr, &report);
  save_params_atomic(L.models / ("stage" + std::to_string(stage) + ".params"), p);
  atomic_write(L.logs / ("stage" + std::to_string(stage) + ".csv"),
               [&](const fs::path& tmp) { write_training_log(tmp, report.log); });
  spdlog::info("{}: {} steps, val acc {:.4f} -> {:.4f}", name, report.steps, report.pre_val_acc,
               report.post_val_acc);
}

fs::path embedding_model(const PipelineConfig& config, const Layout& L) {
  const fs::path s2 = L.models / "stage2.params";
  const fs::path s3 = L.models / "stage3.params";
  if (config.backend.model == "stage3") return s3;
  if (config.backend.model == "stage2") return s2;
  return fs::exists(s3) ? s3 : s2;
}

void run_embed(const PipelineConfig& config, const Layout& L) {
  require(L.data / "utts.txt", "embed");
  const fs::path model = embedding_model(config, L);
  require(model, "embed");
  const EncoderParams params = load_params(model);
  const SyntheticSpeakerSet set = read_synthetic_set(L.data);
  auto write_split = [&](const std::vector<SyntheticUtterance>& utts, const std::string& name) {
    std::vector<FeatureRecord> feats;
    for (const auto& u : utts) {
      if (u.speed_index == 0) feats.push_back({u.id, u.features});
    }
    const auto records = embed_features(params, feats, config.jobs);
    atomic_write(L.emb / (name + ".ffke"),
                 [&](const fs::path& tmp) { write_embedding_archive(tmp, records); });
  };
  write_split(set.train, "train");
  write_split(set.val, "val");
  write_split(set.test, "test");
}

std::map<std::string, std::pair<std::string, std::string>> utterance_info(const fs::path& utts) {
  std::map<std::string, std::pair<std::string, std::string>> info;  // id -> (speaker, domain)
  std::ifstream in(utts);
  std::string id, speaker, domain, split;
  int speed = 0;
  while (in >> id >> speaker >> domain >> speed >> split) info[id] = {speaker, domain};
  return info;
}

void run_score(const PipelineConfig& config, const Layout& L) {
  for (const char* f : {"train.ffke", "val.ffke", "test.ffke"}) require(L.emb / f, "score");
  require(L.data / "dev_trials.txt", "score");
  require(L.data / "eval_trials.txt", "score");
  const auto info = utterance_info(L.data / "utts.txt");

  // Cohort: one center per training speaker. Sub-Mean: target-domain mean.
  EmbeddingStore train_store;
  EmbeddingStore target_store;
  for (const auto& rec : read_embedding_archive(L.emb / "train.ffke")) {
    const auto it = info.find(rec.id);
    if (it == info.end()) throw DataError("embedding for unknown utterance " + rec.id);
    train_store.add(rec.id, rec.values);
    train_store.set_speaker(rec.id, it->second.first);
    if (it->second.second == "target") target_store.add(rec.id, rec.values);
  }
  const Rng root(config.seed);
  std::optional<Vector> mean;
  std::optional<Cohort> cohort;
  auto need_mean = [&] {
    if (!mean) {
      Rng r = root.derive("sub-mean");
      mean = domain_mean(target_store.empty() ? train_store : target_store,
                         config.backend.mean_sample, r);
    }
    return *mean;
  };
  auto need_cohort = [&]() -> const Cohort& {
    if (!cohort) {
      Rng r = root.derive("cohort");
      cohort = build_cohort(train_store, r);
    }
    return *cohort;
  };

  const std::pair<const char*, const char*> splits[] = {{"dev", "val"}, {"eval", "test"}};
  for (const auto& [split, emb_name] : splits) {
    const EmbeddingStore store(read_embedding_archive(L.emb / (std::string(emb_name) + ".ffke")));
    const TrialScoreSet trials = read_trial_list(L.data / (std::string(split) + "_trials.txt"));
    for (const auto& system : config.backend.systems) {
      ScoringOptions opt;
      opt.top_k = config.backend.top_k;
      if (system == "submean" || system == "submean_asnorm") opt.mean = need_mean();
      if (system == "asnorm" || system == "submean_asnorm") opt.cohort = &need_cohort();
      const TrialScoreSet scored = score_trials(trials, store, opt);
      atomic_write(L.score_file(system, split),
                   [&](const fs::path& tmp) { write_score_file(tmp, scored); });
    }
  }
}

void run_fuse(const PipelineConfig& config, const Layout& L) {
  if (config.backend.systems.size() < 2) {
    throw ConfigError("invalid config: [backend] systems needs at least two entries to fuse");
  }
  require(L.data / "dev_trials.txt", "fuse");
  const TrialScoreSet dev_trials = read_trial_list(L.data / "dev_trials.txt");
  std::vector<TrialScoreSet> dev, eval_sets;
  for (const auto& system : config.backend.systems) {
    require(L.score_file(system, "dev"), "fuse");
    require(L.score_file(system, "eval"), "fuse");
    dev.push_back(attach_labels(read_score_file(L.score_file(system, "dev")), dev_trials));
    eval_sets.push_back(read_score_file(L.score_file(system, "eval")));
  }
  const FusionModel model = fit_fusion(dev);
  if (!model.converged) spdlog::warn("fusion: logistic regression hit the iteration limit");
  atomic_write(L.models / "fusion.txt", [&](const fs::path& tmp) { write_fusion_model(tmp, model); });
  const TrialScoreSet fused = fuse(eval_sets, model);
  atomic_write(L.score_file("fused", "eval"),
               [&](const fs::path& tmp) { write_score_file(tmp, fused); });
}

void run_eval(const PipelineConfig& config, const Layout& L) {
  require(L.data / "eval_trials.txt", "eval");
  const TrialScoreSet trials = read_trial_list(L.data / "eval_trials.txt");
  std::vector<std::string> systems = config.backend.systems;
  if (fs::exists(L.score_file("fused", "eval"))) systems.push_back("fused");
  std::string report;
  for (const auto& system : systems) {
    require(L.score_file(system, "eval"), "eval");
    const TrialScoreSet labeled = attach_labels(read_score_file(L.score_file(system, "eval")), trials);
    report += "[" + system + "]\n" + format_evaluation(labeled, config.metrics);
  }
  atomic_write(L.results / "metrics.txt", [&](const fs::path& tmp) {
    std::ofstream out(tmp);
    out << report;
    if (!out) throw DataError("failed writing metrics");
  });
  spdlog::info("eval:\n{}", report);
}

}  // namespace

void run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages) {
  config.validate();
  if (stages.empty()) return;
  const Layout L(config.out_dir);
  fs::create_directories(L.root);
  const std::set<std::string> wanted(stages.begin(), stages.end());
  for (const auto& stage : pipeline_stage_names()) {
    if (!wanted.count(stage)) continue;
    spdlog::info("stage {}", stage);
    if (stage == "synthesize") {
      write_synthetic_set(L.data, synthesize_speakers(config.synthetic, Rng(config.seed).derive("synthetic")));
    } else if (stage == "featurize") {
      if (!config.featurize_manifest) {
        throw ConfigError("invalid config: [frontend] manifest is required for featurize");
      }
      featurize_manifest(*config.featurize_manifest, L.root / "features" / "feats.ffkf",
                         config.frontend, config.apply_cmn, config.jobs);
    } else if (stage == "augment") {
      if (!config.augment.manifest) {
        throw ConfigError("invalid config: [augment] manifest is required for augment");
      }
      augment_manifest(*config.augment.manifest, config.augment, L.root / "augment", config.seed,
                       config.jobs);
    } else if (stage == "train1" || stage == "train2" || stage == "train3") {
      run_train(stage.back() - '0', config, L);
    } else if (stage == "embed") {
      run_embed(config, L);
    } else if (stage == "score") {
      run_score(config, L);
    } else if (stage == "fuse") {
      run_fuse(config, L);
    } else if (stage == "eval") {
      run_eval(config, L);
    }
  }
  write_manifest(L.root);
}

}  // namespace farspk
