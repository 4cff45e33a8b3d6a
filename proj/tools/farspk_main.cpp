#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "farspk/backend.h"
#include "farspk/metrics.h"
#include "farspk/pipeline.h"

namespace fs = std::filesystem;
using namespace farspk;

namespace {

struct Common {
  std::optional<fs::path> config;
  std::optional<uint64_t> seed;
  std::optional<int> jobs;
  std::optional<fs::path> out_dir;
};

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config ? PipelineConfig::from_file(*c.config) : PipelineConfig{};
  if (c.seed) cfg.seed = *c.seed;
  if (c.jobs) cfg.jobs = *c.jobs;
  if (c.out_dir) cfg.out_dir = *c.out_dir;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "pipeline config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "global seed");
  app->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  app->add_option("--out-dir", c.out_dir, "output directory");
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("invalid number '" + item + "'");
    }
  }
  return out;
}

std::vector<TrialScoreSet> read_systems(const std::vector<std::string>& inputs) {
  std::vector<TrialScoreSet> out;
  for (const auto& path : inputs) out.push_back(read_score_file(path));
  return out;
}

void write_scores(const fs::path& out, const TrialScoreSet& scores) {
  atomic_write(out, [&](const fs::path& tmp) { write_score_file(tmp, scores); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"far-field speaker verification toolkit"};
  app.require_subcommand(1);
  Common common;

  // featurize
  auto* featurize = app.add_subcommand("featurize", "log-mel features for a wav manifest");
  add_common(featurize, common);
  fs::path fe_manifest, fe_out;
  bool fe_no_cmn = false;
  featurize->add_option("--manifest", fe_manifest, "utt_id wav_path speaker_id")->required();
  featurize->add_option("--out", fe_out, "feature archive")->required();
  featurize->add_flag("--no-cmn", fe_no_cmn, "skip mean normalization");

  // augment
  auto* aug = app.add_subcommand("augment", "augment a wav manifest");
  add_common(aug, common);
  AugmentSettings aug_settings;
  fs::path aug_manifest;
  bool aug_no_speed = false;
  aug->add_option("--manifest", aug_manifest)->required();
  aug->add_option("--rir-dir", aug_settings.rir_dir);
  aug->add_option("--noise-dir", aug_settings.noise_dir);
  aug->add_option("--music-dir", aug_settings.music_dir);
  aug->add_option("--speech-dir", aug_settings.speech_dir);
  aug->add_flag("--no-speed", aug_no_speed, "skip the 0.9 / 1.1 speed copies");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, common);
  int tr_stage = 1;
  fs::path tr_out;
  std::optional<fs::path> tr_init, tr_log, tr_data;
  train->add_option("--stage", tr_stage)->required()->check(CLI::Range(1, 3));
  train->add_option("--out", tr_out, "params file")->required();
  train->add_option("--init", tr_init, "params from the previous stage");
  train->add_option("--log", tr_log, "training log csv");
  train->add_option("--data", tr_data, "synthetic data dir (synthesized from the seed if absent)");

  // embed
  auto* emb = app.add_subcommand("embed", "extract embeddings");
  add_common(emb, common);
  fs::path em_params, em_features, em_out;
  bool em_text = false;
  emb->add_option("--params", em_params)->required()->check(CLI::ExistingFile);
  emb->add_option("--features", em_features, "feature archive")->required()->check(CLI::ExistingFile);
  emb->add_option("--out", em_out)->required();
  emb->add_flag("--text", em_text, "write text instead of binary");

  // score
  auto* score = app.add_subcommand("score", "score a trial list");
  add_common(score, common);
  fs::path sc_trials, sc_embeddings, sc_out;
  std::optional<fs::path> sc_mean_file, sc_mean_source, sc_cohort, sc_cohort_speakers;
  std::optional<std::size_t> sc_compute_mean;
  bool sc_as_norm = false;
  std::size_t sc_top_k = 300;
  score->add_option("--trials", sc_trials)->required()->check(CLI::ExistingFile);
  score->add_option("--embeddings", sc_embeddings)->required()->check(CLI::ExistingFile);
  auto* opt_mean = score->add_option("--sub-mean", sc_mean_file, "archive holding the mean vector");
  score->add_option("--compute-mean", sc_compute_mean, "estimate the mean from N sampled embeddings")
      ->excludes(opt_mean);
  score->add_option("--mean-source", sc_mean_source, "embeddings for --compute-mean");
  score->add_flag("--as-norm", sc_as_norm);
  score->add_option("--cohort", sc_cohort, "cohort centers (or utterances with --cohort-speakers)");
  score->add_option("--cohort-speakers", sc_cohort_speakers, "utt_id speaker_id per line");
  score->add_option("--top-k", sc_top_k);
  score->add_option("--out", sc_out)->required();

  // fit-fusion
  auto* fit = app.add_subcommand("fit-fusion", "fit logistic-regression fusion weights");
  add_common(fit, common);
  fs::path ff_labels, ff_out;
  std::vector<std::string> ff_inputs;
  fit->add_option("--dev-labels", ff_labels, "labeled trial list")->required()->check(CLI::ExistingFile);
  fit->add_option("--inputs", ff_inputs)->required()->delimiter(',');
  fit->add_option("--out", ff_out, "model file")->required();

  // fuse
  auto* fusecmd = app.add_subcommand("fuse", "fuse score files");
  add_common(fusecmd, common);
  std::optional<std::string> fu_weights;
  std::optional<fs::path> fu_model;
  std::vector<std::string> fu_inputs;
  fs::path fu_out;
  auto* opt_w = fusecmd->add_option("--weights", fu_weights, "w1,w2,...");
  fusecmd->add_option("--model", fu_model)->excludes(opt_w);
  fusecmd->add_option("--inputs", fu_inputs)->required()->delimiter(',');
  fusecmd->add_option("--out", fu_out)->required();

  // eval
  auto* evalcmd = app.add_subcommand("eval", "EER and minDCF");
  add_common(evalcmd, common);
  fs::path ev_scores, ev_trials;
  std::optional<fs::path> ev_det;
  DcfParams dcf;
  evalcmd->add_option("--scores", ev_scores)->required()->check(CLI::ExistingFile);
  evalcmd->add_option("--trials", ev_trials)->required()->check(CLI::ExistingFile);
  evalcmd->add_option("--p-tar", dcf.p_tar);
  evalcmd->add_option("--c-miss", dcf.c_miss);
  evalcmd->add_option("--c-fa", dcf.c_fa);
  evalcmd->add_option("--det", ev_det, "write the DET curve as csv");

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "run pipeline stages from a config");
  add_common(pipe, common);
  std::string pi_stages = "synthesize,train1,train2,embed,score,fuse,eval";
  pipe->add_option("--stages", pi_stages, "comma-separated stage list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (featurize->parsed()) {
      const PipelineConfig cfg = load_config(common);
      featurize_manifest(fe_manifest, fe_out, cfg.frontend, !fe_no_cmn, cfg.jobs);
    } else if (aug->parsed()) {
      const PipelineConfig cfg = load_config(common);
      aug_settings.speed = !aug_no_speed;
      augment_manifest(aug_manifest, aug_settings, cfg.out_dir, cfg.seed, cfg.jobs);
    } else if (train->parsed()) {
      const PipelineConfig cfg = load_config(common);
      if (tr_stage > 1 && !tr_init) throw ConfigError("train --stage " + std::to_string(tr_stage) + " needs --init");
      const SyntheticSpeakerSet set =
          tr_data ? read_synthetic_set(*tr_data)
                  : synthesize_speakers(cfg.synthetic, Rng(cfg.seed).derive("synthetic"));
      std::optional<EncoderParams> init;
      if (tr_init) init = load_params(*tr_init);
      StageReport report;
      const EncoderParams p = train_pipeline_stage(tr_stage, cfg, set, init ? &*init : nullptr, &report);
      atomic_write(tr_out, [&](const fs::path& tmp) { save_params(tmp, p); });
      if (tr_log) atomic_write(*tr_log, [&](const fs::path& tmp) { write_training_log(tmp, report.log); });
      std::printf("steps %zu val_acc %.6f -> %.6f\n", report.steps, report.pre_val_acc, report.post_val_acc);
    } else if (emb->parsed()) {
      const PipelineConfig cfg = load_config(common);
      const EncoderParams params = load_params(em_params);
      const auto records = embed_features(params, read_feature_archive(em_features), cfg.jobs);
      atomic_write(em_out, [&](const fs::path& tmp) {
        em_text ? write_embedding_text(tmp, records) : write_embedding_archive(tmp, records);
      });
    } else if (score->parsed()) {
      const PipelineConfig cfg = load_config(common);
      const EmbeddingStore store(read_embedding_archive(sc_embeddings));
      ScoringOptions opt;
      opt.top_k = sc_top_k;
      if (sc_mean_file) {
        const auto rec = read_embedding_archive(*sc_mean_file);
        if (rec.size() != 1) throw DataError("--sub-mean archive must hold exactly one vector");
        opt.mean = rec.front().values;
      } else if (sc_compute_mean) {
        Rng rng = Rng(cfg.seed).derive("sub-mean");
        opt.mean = sc_mean_source
                       ? domain_mean(EmbeddingStore(read_embedding_archive(*sc_mean_source)),
                                     *sc_compute_mean, rng)
                       : domain_mean(store, *sc_compute_mean, rng);
      }
      std::optional<Cohort> cohort;
      if (sc_as_norm) {
        if (!sc_cohort) throw ConfigError("--as-norm needs --cohort");
        const auto records = read_embedding_archive(*sc_cohort);
        if (sc_cohort_speakers) {
          EmbeddingStore cstore(records);
          std::ifstream in(*sc_cohort_speakers);
          if (!in) throw DataError("cannot open " + sc_cohort_speakers->string());
          std::string utt, spk;
          while (in >> utt >> spk) {
            if (cstore.contains(utt)) cstore.set_speaker(utt, spk);
          }
          Rng rng = Rng(cfg.seed).derive("cohort");
          cohort = build_cohort(cstore, rng);
        } else {
          cohort = cohort_from_records(records);
        }
        opt.cohort = &*cohort;
      } else if (sc_cohort) {
        throw ConfigError("--cohort given without --as-norm");
      }
      write_scores(sc_out, score_trials(read_trial_list(sc_trials), store, opt));
    } else if (fit->parsed()) {
      const TrialScoreSet labels = read_trial_list(ff_labels);
      std::vector<TrialScoreSet> systems;
      for (const auto& s : read_systems(ff_inputs)) systems.push_back(attach_labels(s, labels));
      const FusionModel model = fit_fusion(systems);
      if (!model.converged) spdlog::warn("fusion did not converge in {} iterations", model.iterations);
      atomic_write(ff_out, [&](const fs::path& tmp) { write_fusion_model(tmp, model); });
    } else if (fusecmd->parsed()) {
      FusionModel model;
      if (fu_model) {
        model = read_fusion_model(*fu_model);
      } else if (fu_weights) {
        model.weights = parse_doubles(*fu_weights);
      } else {
        throw ConfigError("fuse needs --weights or --model");
      }
      write_scores(fu_out, fuse(read_systems(fu_inputs), model));
    } else if (evalcmd->parsed()) {
      dcf.validate();
      const TrialScoreSet labeled = attach_labels(read_score_file(ev_scores), read_trial_list(ev_trials));
      std::fputs(format_evaluation(labeled, dcf).c_str(), stdout);
      if (ev_det) {
        const auto det = det_sweep(labeled);
        atomic_write(*ev_det, [&](const fs::path& tmp) { write_det_csv(tmp, det); });
      }
    } else if (pipe->parsed()) {
      if (!common.config) throw ConfigError("pipeline needs --config");
      run_pipeline(load_config(common), parse_stage_list(pi_stages));
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
