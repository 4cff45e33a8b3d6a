#include "farspk/augment.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <unordered_set>

#include <spdlog/spdlog.h>
#include <unsupported/Eigen/FFT>

namespace farspk {

namespace {

constexpr double kMaxSnrDb = 100.0;

void require_nonempty(const Waveform& w, const char* what) {
  if (w.samples.empty()) {
    throw DataError(std::string(what) + " is empty");
  }
}

const Waveform& pick(std::span<const Waveform> pool, Rng& rng, const char* what) {
  if (pool.empty()) {
    throw DataError(std::string("no ") + what + " sources");
  }
  return pool[rng.index(pool.size())];
}

}  // namespace

const char* to_string(AugmentKind kind) {
  switch (kind) {
    case AugmentKind::kClean: return "clean";
    case AugmentKind::kReverb: return "reverb";
    case AugmentKind::kMusic: return "music";
    case AugmentKind::kNoiseIntervals: return "noise";
    case AugmentKind::kBabble: return "babble";
    case AugmentKind::kSpeed: return "speed";
  }
  return "?";
}

AugmentKind augment_kind_from_string(const std::string& name) {
  for (auto k : {AugmentKind::kClean, AugmentKind::kReverb, AugmentKind::kMusic,
                 AugmentKind::kNoiseIntervals, AugmentKind::kBabble,
                 AugmentKind::kSpeed}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("invalid config: unknown augmentation kind '" + name + "'");
}

void AugmentRecipe::validate() const {
  if (!(snr_low_db <= snr_high_db)) {
    throw ConfigError("invalid config: snr range low > high");
  }
  if (!(speed_factor > 0.0)) {
    throw ConfigError("invalid factor: speed factor must be positive");
  }
  if (kind == AugmentKind::kNoiseIntervals && !(interval_s > 0.0)) {
    throw ConfigError("invalid config: interval_s must be positive");
  }
  if (kind == AugmentKind::kBabble &&
      (babble_min_talkers < 1 || babble_min_talkers > babble_max_talkers)) {
    throw ConfigError("invalid config: babble talker range");
  }
}

AugmentRecipe AugmentRecipe::reverb() {
  AugmentRecipe r;
  r.kind = AugmentKind::kReverb;
  return r;
}

AugmentRecipe AugmentRecipe::music() {
  AugmentRecipe r;
  r.kind = AugmentKind::kMusic;
  r.snr_low_db = 5.0;
  r.snr_high_db = 15.0;
  return r;
}

AugmentRecipe AugmentRecipe::noise() {
  AugmentRecipe r;
  r.kind = AugmentKind::kNoiseIntervals;
  r.snr_low_db = 0.0;
  r.snr_high_db = 15.0;
  r.interval_s = 1.0;
  return r;
}

AugmentRecipe AugmentRecipe::babble() {
  AugmentRecipe r;
  r.kind = AugmentKind::kBabble;
  r.snr_low_db = 13.0;
  r.snr_high_db = 20.0;
  return r;
}

AugmentRecipe AugmentRecipe::speed(double factor) {
  AugmentRecipe r;
  r.kind = AugmentKind::kSpeed;
  r.speed_factor = factor;
  return r;
}

double mean_power(std::span<const double> samples) {
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (double s : samples) acc += s * s;
  return acc / static_cast<double>(samples.size());
}

Waveform apply_rir(const Waveform& wave, const Waveform& rir,
                   RirNormalization norm) {
  require_nonempty(wave, "waveform");
  require_nonempty(rir, "rir");
  if (wave.sample_rate != rir.sample_rate) {
    throw DataError("rate mismatch: waveform " + std::to_string(wave.sample_rate) +
                    " Hz vs rir " + std::to_string(rir.sample_rate) + " Hz");
  }
  const std::size_t n = wave.samples.size();
  const std::size_t full = n + rir.samples.size() - 1;
  std::size_t size = 1;
  while (size < full) size <<= 1;

  std::vector<double> a(size, 0.0), b(size, 0.0);
  std::copy(wave.samples.begin(), wave.samples.end(), a.begin());
  std::copy(rir.samples.begin(), rir.samples.end(), b.begin());

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> conv;
  fft.inv(conv, fa);

  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.assign(conv.begin(), conv.begin() + static_cast<std::ptrdiff_t>(n));

  if (norm == RirNormalization::kPeak) {
    auto peak = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double s : v) m = std::max(m, std::abs(s));
      return m;
    };
    const double in_peak = peak(wave.samples);
    const double out_peak = peak(out.samples);
    if (out_peak > 0.0) {
      const double g = in_peak / out_peak;
      for (double& s : out.samples) s *= g;
    }
  }
  return out;
}

Waveform fit_length(const Waveform& interferer, std::size_t length, Rng& rng) {
  require_nonempty(interferer, "interferer");
  const std::size_t m = interferer.samples.size();
  const std::size_t start = m > length ? rng.index(m - length + 1) : 0;
  Waveform out;
  out.sample_rate = interferer.sample_rate;
  out.samples.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    out.samples[i] = interferer.samples[(start + i) % m];
  }
  return out;
}

Waveform mix_at_snr(const Waveform& wave, const Waveform& interferer,
                    double snr_db, Rng& rng) {
  require_nonempty(wave, "waveform");
  require_nonempty(interferer, "interferer");
  const Waveform fitted = fit_length(interferer, wave.samples.size(), rng);
  const double p_int = mean_power(fitted.samples);
  if (p_int <= 0.0) {
    throw DataError("silent interferer");
  }
  const double p_wave = mean_power(wave.samples);
  const double snr = std::min(snr_db, kMaxSnrDb);
  const double g = std::sqrt(p_wave / (p_int * std::pow(10.0, snr / 10.0)));

  Waveform out = wave;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] += g * fitted.samples[i];
  }
  return out;
}

IntervalNoiseResult add_interval_noise(const Waveform& wave,
                                       std::span<const Waveform> noises,
                                       double snr_low_db, double snr_high_db,
                                       double interval_s, Rng& rng,
                                       bool snr_per_interval) {
  require_nonempty(wave, "waveform");
  if (noises.empty()) {
    throw DataError("no noise sources");
  }
  if (!(interval_s > 0.0) || snr_low_db > snr_high_db) {
    throw ConfigError("invalid config: interval noise parameters");
  }
  const auto interval =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(interval_s * wave.sample_rate)));

  IntervalNoiseResult result;
  result.wave = wave;
  const double recording_snr = rng.uniform(snr_low_db, snr_high_db);
  for (std::size_t offset = 0; offset < wave.samples.size(); offset += interval) {
    NoisePlacement place;
    place.offset = offset;
    place.length = std::min(interval, wave.samples.size() - offset);
    place.noise_index = rng.index(noises.size());
    place.snr_db = snr_per_interval ? rng.uniform(snr_low_db, snr_high_db)
                                    : recording_snr;

    Waveform segment;
    segment.sample_rate = wave.sample_rate;
    segment.samples.assign(wave.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                           wave.samples.begin() + static_cast<std::ptrdiff_t>(offset + place.length));
    const Waveform mixed = mix_at_snr(segment, noises[place.noise_index], place.snr_db, rng);
    std::copy(mixed.samples.begin(), mixed.samples.end(),
              result.wave.samples.begin() + static_cast<std::ptrdiff_t>(offset));
    result.placements.push_back(place);
  }
  return result;
}

Waveform add_music(const Waveform& wave, std::span<const Waveform> music,
                   double snr_low_db, double snr_high_db, Rng& rng) {
  const Waveform& clip = pick(music, rng, "music");
  return mix_at_snr(wave, clip, rng.uniform(snr_low_db, snr_high_db), rng);
}

Waveform add_babble(const Waveform& wave, std::span<const Waveform> speech,
                    double snr_low_db, double snr_high_db, int min_talkers,
                    int max_talkers, Rng& rng) {
  require_nonempty(wave, "waveform");
  const auto talkers = rng.integer(min_talkers, max_talkers);
  Waveform babble;
  babble.sample_rate = wave.sample_rate;
  babble.samples.assign(wave.samples.size(), 0.0);
  for (int64_t i = 0; i < talkers; ++i) {
    const Waveform fitted = fit_length(pick(speech, rng, "speech"), wave.samples.size(), rng);
    for (std::size_t j = 0; j < babble.samples.size(); ++j) {
      babble.samples[j] += fitted.samples[j];
    }
  }
  return mix_at_snr(wave, babble, rng.uniform(snr_low_db, snr_high_db), rng);
}

Waveform speed_perturb(const Waveform& wave, double factor) {
  if (!(factor > 0.0)) {
    throw ConfigError("invalid factor: " + std::to_string(factor));
  }
  if (factor == 1.0) {
    return wave;
  }
  if (std::abs(factor - 0.9) > 1e-9 && std::abs(factor - 1.1) > 1e-9) {
    spdlog::warn("speed_perturb: unusual factor {}", factor);
  }
  require_nonempty(wave, "waveform");

  constexpr double kZeroCrossings = 16.0;
  const auto n_in = static_cast<std::ptrdiff_t>(wave.samples.size());
  const auto n_out = static_cast<std::size_t>(std::llround(n_in / factor));
  // Anti-alias cutoff relative to the input Nyquist when compressing.
  const double cutoff = std::min(1.0, 1.0 / factor);
  const double half_width = kZeroCrossings / cutoff;

  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double t = static_cast<double>(n) * factor;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(t - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(n_in - 1, static_cast<std::ptrdiff_t>(std::floor(t + half_width)));
    double acc = 0.0;
    for (std::ptrdiff_t k = lo; k <= hi; ++k) {
      const double tau = t - static_cast<double>(k);
      const double x = std::numbers::pi * cutoff * tau;
      const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(x) / x;
      const double window = 0.5 * (1.0 + std::cos(std::numbers::pi * tau / half_width));
      acc += wave.samples[static_cast<std::size_t>(k)] * cutoff * sinc * window;
    }
    out.samples[n] = acc;
  }
  return out;
}

Waveform rescale_if_clipping(Waveform wave) {
  double peak = 0.0;
  for (double s : wave.samples) peak = std::max(peak, std::abs(s));
  if (peak > 1.0) {
    for (double& s : wave.samples) s /= peak;
  }
  return wave;
}

Waveform augment(const Waveform& wave, const AugmentRecipe& recipe,
                 const AugmentSources& sources, Rng& rng) {
  recipe.validate();
  switch (recipe.kind) {
    case AugmentKind::kClean:
      return wave;
    case AugmentKind::kReverb:
      return rescale_if_clipping(apply_rir(
          wave, pick(sources.rirs, rng, "rir"), recipe.rir_normalization));
    case AugmentKind::kMusic:
      return rescale_if_clipping(
          add_music(wave, sources.music, recipe.snr_low_db, recipe.snr_high_db, rng));
    case AugmentKind::kNoiseIntervals:
      return rescale_if_clipping(
          add_interval_noise(wave, sources.noises, recipe.snr_low_db,
                             recipe.snr_high_db, recipe.interval_s, rng,
                             recipe.snr_per_interval)
              .wave);
    case AugmentKind::kBabble:
      return rescale_if_clipping(add_babble(
          wave, sources.speech, recipe.snr_low_db, recipe.snr_high_db,
          recipe.babble_min_talkers, recipe.babble_max_talkers, rng));
    case AugmentKind::kSpeed:
      return rescale_if_clipping(speed_perturb(wave, recipe.speed_factor));
  }
  return wave;
}

AugmentRecipe choose_recipe(Rng& rng) {
  switch (rng.index(5)) {
    case 0: return AugmentRecipe{};
    case 1: return AugmentRecipe::reverb();
    case 2: return AugmentRecipe::music();
    case 3: return AugmentRecipe::noise();
    default: return AugmentRecipe::babble();
  }
}

SpeakerLabelMap::SpeakerLabelMap(std::vector<std::string> base_speakers)
    : speakers_(std::move(base_speakers)) {
  if (speakers_.empty()) {
    throw DataError("empty speaker list");
  }
  for (std::size_t i = 0; i < speakers_.size(); ++i) {
    if (!index_.emplace(speakers_[i], i).second) {
      throw DataError("duplicate speaker: " + speakers_[i]);
    }
  }
}

int SpeakerLabelMap::class_index(const std::string& speaker, double factor) const {
  const auto it = index_.find(speaker);
  if (it == index_.end()) {
    throw DataError("unknown speaker: " + speaker);
  }
  for (std::size_t f = 0; f < kFactors.size(); ++f) {
    if (std::abs(kFactors[f] - factor) < 1e-9) {
      return static_cast<int>(f * speakers_.size() + it->second);
    }
  }
  throw ConfigError("invalid factor: no class for speed factor " + std::to_string(factor));
}

std::string SpeakerLabelMap::class_name(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= num_classes()) {
    throw DataError("class index out of range: " + std::to_string(index));
  }
  const std::size_t f = static_cast<std::size_t>(index) / speakers_.size();
  const std::string& spk = speakers_[static_cast<std::size_t>(index) % speakers_.size()];
  if (f == 0) return spk;
  return (f == 1 ? "sp0.9-" : "sp1.1-") + spk;
}

SpeakerLabelMap expand_speakers(const std::vector<std::string>& base) {
  return SpeakerLabelMap(base);
}

}  // namespace farspk
