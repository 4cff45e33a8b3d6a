#include "farspk/frontend.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "binary_io.h"

namespace farspk {

int FrontendConfig::window_samples() const {
  return static_cast<int>(std::lround(sample_rate * window_ms / 1000.0));
}

int FrontendConfig::hop_samples() const {
  return static_cast<int>(std::lround(sample_rate * shift_ms / 1000.0));
}

void FrontendConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw ConfigError("invalid config: frontend." + what);
  };
  if (sample_rate != 16000) fail("sample_rate must be 16000");
  if (window_samples() < 2) fail("window_ms too small");
  if (hop_samples() < 1) fail("shift_ms too small");
  if (fft_size < window_samples()) fail("fft_size smaller than window");
  if ((fft_size & (fft_size - 1)) != 0) fail("fft_size must be a power of two");
  if (num_mel_bins < 1) fail("num_mel_bins must be positive");
  if (!(low_freq >= 0.0 && low_freq < high_freq && high_freq <= sample_rate / 2.0)) {
    fail("low_freq/high_freq out of range");
  }
  if (!(preemphasis >= 0.0 && preemphasis < 1.0)) fail("preemphasis out of [0,1)");
  if (!(log_floor > 0.0)) fail("log_floor must be positive");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

double mel_bin_center_hz(const FrontendConfig& config, int bin) {
  const double lo = hz_to_mel(config.low_freq);
  const double hi = hz_to_mel(config.high_freq);
  const double delta = (hi - lo) / (config.num_mel_bins + 1);
  return mel_to_hz(lo + (bin + 1) * delta);
}

std::size_t num_frames(std::size_t num_samples, const FrontendConfig& config) {
  const auto window = static_cast<std::size_t>(config.window_samples());
  const auto hop = static_cast<std::size_t>(config.hop_samples());
  if (num_samples < window) {
    return 0;
  }
  return (num_samples - window) / hop + 1;
}

Matrix mel_filterbank(const FrontendConfig& config) {
  const int num_bins = config.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(config.low_freq);
  const double mel_hi = hz_to_mel(config.high_freq);
  const double delta = (mel_hi - mel_lo) / (config.num_mel_bins + 1);

  Matrix weights = Matrix::Zero(config.num_mel_bins, num_bins);
  for (int b = 0; b < config.num_mel_bins; ++b) {
    const double left = mel_lo + b * delta;
    const double center = left + delta;
    const double right = center + delta;
    for (int i = 0; i < num_bins; ++i) {
      const double mel =
          hz_to_mel(static_cast<double>(config.sample_rate) * i / config.fft_size);
      if (mel > left && mel < right) {
        weights(b, i) = mel <= center ? (mel - left) / (center - left)
                                      : (right - mel) / (right - center);
      }
    }
  }
  return weights;
}

FeatureMatrix logmel_fbank(const Waveform& wave, const FrontendConfig& config) {
  config.validate();
  if (wave.sample_rate <= 0 || wave.sample_rate != config.sample_rate) {
    throw ConfigError("invalid config: waveform sample rate " +
                      std::to_string(wave.sample_rate) + ", expected " +
                      std::to_string(config.sample_rate));
  }
  const std::size_t frames = num_frames(wave.samples.size(), config);
  if (frames == 0) {
    throw DataError("audio too short: " + std::to_string(wave.samples.size()) +
                    " samples, need at least " +
                    std::to_string(config.window_samples()));
  }

  const int window = config.window_samples();
  const int hop = config.hop_samples();
  const int num_bins = config.fft_size / 2 + 1;
  const Matrix filters = mel_filterbank(config);

  std::vector<double> hamming(window);
  for (int n = 0; n < window; ++n) {
    hamming[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (window - 1));
  }

  Eigen::FFT<double> fft;
  std::vector<double> frame(config.fft_size, 0.0);
  std::vector<std::complex<double>> spectrum;
  Vector power(num_bins);

  FeatureMatrix out;
  out.frame_shift_s = config.shift_ms / 1000.0;
  out.frames.resize(static_cast<Eigen::Index>(frames), config.feature_dim());

  for (std::size_t t = 0; t < frames; ++t) {
    const double* x = wave.samples.data() + t * hop;

    double energy = 0.0;
    for (int n = 0; n < window; ++n) {
      energy += x[n] * x[n];
    }

    std::fill(frame.begin(), frame.end(), 0.0);
    for (int n = window - 1; n > 0; --n) {
      frame[n] = (x[n] - config.preemphasis * x[n - 1]) * hamming[n];
    }
    frame[0] = (x[0] - config.preemphasis * x[0]) * hamming[0];

    fft.fwd(spectrum, frame);
    for (int k = 0; k < num_bins; ++k) {
      power[k] = std::norm(spectrum[k]);
    }

    const Vector mel = filters * power;
    const auto row = static_cast<Eigen::Index>(t);
    for (int b = 0; b < config.num_mel_bins; ++b) {
      out.frames(row, b) = std::log(std::max(mel[b], config.log_floor));
    }
    out.frames(row, config.num_mel_bins) =
        std::log(std::max(energy, config.log_floor));
  }
  return out;
}

FeatureMatrix cmn(const FeatureMatrix& features) {
  FeatureMatrix out = features;
  if (features.frames.rows() == 0) {
    return out;
  }
  const Eigen::RowVectorXd mean = features.frames.colwise().mean();
  out.frames.rowwise() -= mean;
  return out;
}

FeatureMatrix chunk(const FeatureMatrix& features, std::size_t chunk_len,
                    Rng& rng) {
  if (chunk_len == 0) {
    throw ConfigError("invalid config: chunk_len must be >= 1");
  }
  const auto total = static_cast<std::size_t>(features.frames.rows());
  if (total == 0) {
    throw DataError("cannot chunk an empty feature matrix");
  }
  FeatureMatrix out;
  out.frame_shift_s = features.frame_shift_s;
  const auto len = static_cast<Eigen::Index>(chunk_len);
  if (total >= chunk_len) {
    const auto start =
        static_cast<Eigen::Index>(rng.integer(0, static_cast<int64_t>(total - chunk_len)));
    out.frames = features.frames.middleRows(start, len);
    return out;
  }
  out.frames.resize(len, features.frames.cols());
  for (Eigen::Index i = 0; i < len; ++i) {
    out.frames.row(i) = features.frames.row(i % static_cast<Eigen::Index>(total));
  }
  return out;
}

namespace {

std::string read_tag(std::istream& in) {
  std::string tag(4, '\0');
  in.read(tag.data(), 4);
  if (!in) {
    throw DataError("truncated WAV header");
  }
  return tag;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open WAV file " + path.string());
  }
  const std::string where = " in " + path.string();
  if (read_tag(in) != "RIFF") throw DataError("not a RIFF file" + where);
  detail::get_le<uint32_t>(in);
  if (read_tag(in) != "WAVE") throw DataError("not a WAVE file" + where);

  Waveform wave;
  bool have_fmt = false;
  while (true) {
    const std::string tag = read_tag(in);
    const auto size = detail::get_le<uint32_t>(in);
    if (tag == "fmt ") {
      const auto format = detail::get_le<uint16_t>(in);
      const auto channels = detail::get_le<uint16_t>(in);
      wave.sample_rate = static_cast<int>(detail::get_le<uint32_t>(in));
      detail::get_le<uint32_t>(in);  // byte rate
      detail::get_le<uint16_t>(in);  // block align
      const auto bits = detail::get_le<uint16_t>(in);
      if (format != 1 || bits != 16) {
        throw DataError("only 16-bit PCM WAV is supported" + where);
      }
      if (channels != 1) {
        throw DataError("only mono WAV is supported" + where);
      }
      in.ignore(size - 16 + (size & 1));
      have_fmt = true;
    } else if (tag == "data") {
      if (!have_fmt) throw DataError("data chunk before fmt chunk" + where);
      const std::size_t count = size / 2;
      wave.samples.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        wave.samples[i] = detail::get_le<int16_t>(in) / 32768.0;
      }
      return wave;
    } else {
      in.ignore(size + (size & 1));
    }
  }
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write WAV file " + path.string());
  }
  const auto data_bytes = static_cast<uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  detail::put_le<uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  detail::put_le<uint32_t>(out, 16);
  detail::put_le<uint16_t>(out, 1);
  detail::put_le<uint16_t>(out, 1);
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(wave.sample_rate));
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(wave.sample_rate * 2));
  detail::put_le<uint16_t>(out, 2);
  detail::put_le<uint16_t>(out, 16);
  out.write("data", 4);
  detail::put_le<uint32_t>(out, data_bytes);
  for (double s : wave.samples) {
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    detail::put_le<int16_t>(out, static_cast<int16_t>(scaled));
  }
  if (!out) {
    throw DataError("failed writing WAV file " + path.string());
  }
}

void write_feature_archive(const std::filesystem::path& path,
                           const std::vector<FeatureRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write feature archive " + path.string());
  }
  const auto dim = records.empty() ? 0u
                                   : static_cast<uint32_t>(records.front().second.dim());
  out.write("FFKF", 4);
  detail::put_le<uint32_t>(out, dim);
  for (const auto& [id, feats] : records) {
    if (static_cast<uint32_t>(feats.dim()) != dim) {
      throw DataError("feature archive dim mismatch for " + id);
    }
    detail::put_id(out, id);
    detail::put_le<uint32_t>(out, static_cast<uint32_t>(feats.num_frames()));
    for (Eigen::Index t = 0; t < feats.frames.rows(); ++t) {
      for (Eigen::Index d = 0; d < feats.frames.cols(); ++d) {
        detail::put_f32(out, feats.frames(t, d));
      }
    }
  }
  if (!out) {
    throw DataError("failed writing feature archive " + path.string());
  }
}

std::vector<FeatureRecord> read_feature_archive(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open feature archive " + path.string());
  }
  detail::expect_magic(in, "FFKF", path.string());
  const auto dim = detail::get_le<uint32_t>(in);
  std::vector<FeatureRecord> records;
  while (in.peek() != std::char_traits<char>::eof()) {
    FeatureRecord rec;
    rec.first = detail::get_id(in);
    const auto frames = detail::get_le<uint32_t>(in);
    rec.second.frames.resize(frames, dim);
    for (uint32_t t = 0; t < frames; ++t) {
      for (uint32_t d = 0; d < dim; ++d) {
        rec.second.frames(t, d) = detail::get_f32(in);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace farspk
