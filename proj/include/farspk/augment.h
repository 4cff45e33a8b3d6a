#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "farspk/common.h"
#include "farspk/frontend.h"

namespace farspk {

enum class AugmentKind { kClean, kReverb, kMusic, kNoiseIntervals, kBabble, kSpeed };

const char* to_string(AugmentKind kind);
AugmentKind augment_kind_from_string(const std::string& name);

enum class RirNormalization { kPeak, kNone };

struct AugmentRecipe {
  AugmentKind kind = AugmentKind::kClean;
  double snr_low_db = 0.0;
  double snr_high_db = 0.0;
  double speed_factor = 1.0;
  double interval_s = 1.0;
  int babble_min_talkers = 3;
  int babble_max_talkers = 7;
  // Interval noise: draw a fresh SNR for every interval, or once per
  // recording.
  bool snr_per_interval = true;
  RirNormalization rir_normalization = RirNormalization::kPeak;

  void validate() const;

  static AugmentRecipe reverb();
  static AugmentRecipe music();     // 5-15 dB
  static AugmentRecipe noise();     // 0-15 dB, one-second intervals
  static AugmentRecipe babble();    // 13-20 dB
  static AugmentRecipe speed(double factor);
};

// Corpora the recipes draw from. Any may be empty if the matching recipe
// is never requested.
struct AugmentSources {
  std::vector<Waveform> rirs;
  std::vector<Waveform> noises;
  std::vector<Waveform> music;
  std::vector<Waveform> speech;
};

double mean_power(std::span<const double> samples);

// Linear convolution truncated to the input length.
Waveform apply_rir(const Waveform& wave, const Waveform& rir,
                   RirNormalization norm = RirNormalization::kPeak);

// Interferer read cyclically from a random offset, so it is tiled when
// shorter than `length` and trimmed when longer.
Waveform fit_length(const Waveform& interferer, std::size_t length, Rng& rng);

// wave + g * fit_length(interferer) with g chosen so that the mix has the
// requested SNR. SNR is capped at 100 dB.
Waveform mix_at_snr(const Waveform& wave, const Waveform& interferer,
                    double snr_db, Rng& rng);

struct NoisePlacement {
  std::size_t offset = 0;  // samples
  std::size_t length = 0;  // samples
  std::size_t noise_index = 0;
  double snr_db = 0.0;
};

struct IntervalNoiseResult {
  Waveform wave;
  std::vector<NoisePlacement> placements;
};

IntervalNoiseResult add_interval_noise(const Waveform& wave,
                                       std::span<const Waveform> noises,
                                       double snr_low_db, double snr_high_db,
                                       double interval_s, Rng& rng,
                                       bool snr_per_interval = true);

Waveform add_music(const Waveform& wave, std::span<const Waveform> music,
                   double snr_low_db, double snr_high_db, Rng& rng);

Waveform add_babble(const Waveform& wave, std::span<const Waveform> speech,
                    double snr_low_db, double snr_high_db, int min_talkers,
                    int max_talkers, Rng& rng);

// Resamples by 1/factor with windowed-sinc interpolation (pitch and tempo
// both change). Output length is round(N / factor).
Waveform speed_perturb(const Waveform& wave, double factor);

// If any |sample| > 1, scales the whole signal by 1 / max|sample|.
Waveform rescale_if_clipping(Waveform wave);

// Runs one recipe and applies the clipping policy.
Waveform augment(const Waveform& wave, const AugmentRecipe& recipe,
                 const AugmentSources& sources, Rng& rng);

// Uniform choice among clean, reverb, music, noise and babble.
AugmentRecipe choose_recipe(Rng& rng);

// Class indices for every (speaker, speed factor) pair: all factor-1.0
// classes first, then 0.9, then 1.1.
class SpeakerLabelMap {
 public:
  static constexpr std::array<double, 3> kFactors{1.0, 0.9, 1.1};

  explicit SpeakerLabelMap(std::vector<std::string> base_speakers);

  std::size_t base_speakers() const { return speakers_.size(); }
  std::size_t num_classes() const { return kFactors.size() * speakers_.size(); }

  int class_index(const std::string& speaker, double factor) const;
  // "spk" for factor 1.0, "sp0.9-spk" / "sp1.1-spk" otherwise.
  std::string class_name(int index) const;

  const std::vector<std::string>& speakers() const { return speakers_; }

 private:
  std::vector<std::string> speakers_;
  std::unordered_map<std::string, std::size_t> index_;
};

SpeakerLabelMap expand_speakers(const std::vector<std::string>& base);

}  // namespace farspk
