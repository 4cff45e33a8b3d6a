#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "farspk/common.h"

namespace farspk {

// Mono PCM audio, amplitudes nominally in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// T x D log filterbank frames. Columns 0..num_mel_bins-1 hold the mel
// energies; the last column holds the frame log energy.
struct FeatureMatrix {
  Matrix frames;
  double frame_shift_s = 0.01;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

struct FrontendConfig {
  int sample_rate = 16000;
  double window_ms = 25.0;
  double shift_ms = 10.0;
  int fft_size = 512;
  int num_mel_bins = 80;
  double low_freq = 20.0;
  double high_freq = 7600.0;
  double preemphasis = 0.97;
  double log_floor = 1e-10;

  int window_samples() const;
  int hop_samples() const;
  int feature_dim() const { return num_mel_bins + 1; }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Center frequency (Hz) of mel bin `bin` for the given config.
double mel_bin_center_hz(const FrontendConfig& config, int bin);

// floor((n - window) / hop) + 1 for n >= window, else 0.
std::size_t num_frames(std::size_t num_samples, const FrontendConfig& config);

// Triangular mel weights, num_mel_bins x (fft_size / 2 + 1).
Matrix mel_filterbank(const FrontendConfig& config);

FeatureMatrix logmel_fbank(const Waveform& wave, const FrontendConfig& config);

// Subtracts each column's mean over time.
FeatureMatrix cmn(const FeatureMatrix& features);

// Fixed-length window of `chunk_len` frames: a random contiguous window when
// the input is long enough, wrap-around tiling otherwise.
FeatureMatrix chunk(const FeatureMatrix& features, std::size_t chunk_len,
                    Rng& rng);

// 16-bit PCM RIFF/WAVE, mono only.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);

// Feature archive: "FFKF", u32 dim, then records of
// (u16 id length, id bytes, u32 T, T*dim little-endian float32).
using FeatureRecord = std::pair<std::string, FeatureMatrix>;

void write_feature_archive(const std::filesystem::path& path,
                           const std::vector<FeatureRecord>& records);
std::vector<FeatureRecord> read_feature_archive(
    const std::filesystem::path& path);

}  // namespace farspk
