#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "farspk/frontend.h"

using namespace farspk;

namespace {

// Brute-force reference: direct DFT sums and filter triangles evaluated
// straight from the mel formula. Shares no code with the frontend.
Matrix oracle_fbank(const std::vector<double>& x, int num_mel) {
  const int sr = 16000, win = 400, hop = 160, nfft = 512;
  const double lo = 2595.0 * std::log10(1.0 + 20.0 / 700.0);
  const double hi = 2595.0 * std::log10(1.0 + 7600.0 / 700.0);
  const double step = (hi - lo) / (num_mel + 1);
  const int frames = (static_cast<int>(x.size()) - win) / hop + 1;
  Matrix out(frames, num_mel + 1);
  for (int t = 0; t < frames; ++t) {
    std::vector<double> f(win);
    double energy = 0;
    for (int n = 0; n < win; ++n) {
      const double s = x[t * hop + n];
      energy += s * s;
      const double prev = n == 0 ? s : x[t * hop + n - 1];
      f[n] = (s - 0.97 * prev) *
             (0.54 - 0.46 * std::cos(2 * std::numbers::pi * n / (win - 1)));
    }
    std::vector<double> power(nfft / 2 + 1);
    for (int k = 0; k <= nfft / 2; ++k) {
      std::complex<double> acc = 0;
      for (int n = 0; n < win; ++n) {
        acc += f[n] * std::polar(1.0, -2 * std::numbers::pi * k * n / nfft);
      }
      power[k] = std::norm(acc);
    }
    for (int b = 0; b < num_mel; ++b) {
      double e = 0;
      for (int k = 0; k <= nfft / 2; ++k) {
        const double m = 2595.0 * std::log10(1.0 + (sr * k / double(nfft)) / 700.0);
        const double l = lo + b * step, c = l + step, r = c + step;
        double w = 0;
        if (m > l && m <= c) w = (m - l) / step;
        if (m > c && m < r) w = (r - m) / step;
        e += w * power[k];
      }
      out(t, b) = std::log(std::max(e, 1e-10));
    }
    out(t, num_mel) = std::log(std::max(energy, 1e-10));
  }
  return out;
}

Waveform sine(double hz, std::size_t n, double amp = 0.5) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * i / 16000.0);
  }
  return w;
}

}  // namespace

TEST(Frontend, FrameCountForOneSecond) {
  Waveform w;
  w.samples.assign(16000, 0.1);
  const auto f = logmel_fbank(w, FrontendConfig{});
  EXPECT_EQ(f.num_frames(), 98);
  EXPECT_EQ(f.dim(), 81);
}

TEST(Frontend, FrameCountPropertyOverRandomLengths) {
  Rng rng(7);
  FrontendConfig cfg;
  for (int i = 0; i < 50; ++i) {
    const auto n = static_cast<std::size_t>(rng.integer(400, 5000));
    Waveform w;
    w.samples.resize(n);
    for (auto& s : w.samples) s = rng.uniform(-0.5, 0.5);
    const auto f = logmel_fbank(w, cfg);
    EXPECT_EQ(static_cast<std::size_t>(f.num_frames()), (n - 400) / 160 + 1) << n;
  }
}

TEST(Frontend, MatchesBruteForceDftOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    Waveform w;
    w.samples.resize(1600);  // 100 ms
    for (auto& s : w.samples) s = rng.uniform(-0.8, 0.8);
    const auto got = logmel_fbank(w, FrontendConfig{}).frames;
    const Matrix want = oracle_fbank(w.samples, 80);
    ASSERT_EQ(got.rows(), want.rows());
    ASSERT_EQ(got.cols(), want.cols());
    for (Eigen::Index i = 0; i < got.rows(); ++i) {
      for (Eigen::Index j = 0; j < got.cols(); ++j) {
        const double rel = std::abs(got(i, j) - want(i, j)) /
                           std::max(1.0, std::abs(want(i, j)));
        EXPECT_LT(rel, 1e-4) << i << "," << j;
      }
    }
  }
}

TEST(Frontend, SineAtBinCenterPeaksInThatBin) {
  FrontendConfig cfg;
  for (int bin : {20, 35, 50, 65, 79}) {
    const Waveform w = sine(mel_bin_center_hz(cfg, bin), 4000);
    const Eigen::RowVectorXd mean_row =
        logmel_fbank(w, cfg).frames.leftCols(80).colwise().mean();
    Eigen::Index got = 0;
    mean_row.maxCoeff(&got);

    const Eigen::RowVectorXd oracle_row =
        oracle_fbank(w.samples, 80).leftCols(80).colwise().mean();
    Eigen::Index want = 0;
    oracle_row.maxCoeff(&want);

    EXPECT_EQ(got, want);
    EXPECT_EQ(got, bin);
  }
}

TEST(Frontend, SilenceHitsLogFloor) {
  Waveform w;
  w.samples.assign(2000, 0.0);
  const auto f = logmel_fbank(w, FrontendConfig{});
  EXPECT_TRUE((f.frames.array() == std::log(1e-10)).all());
}

TEST(Frontend, RejectsShortAudioAndBadRates) {
  Waveform w;
  w.samples.assign(399, 0.1);
  EXPECT_THROW(logmel_fbank(w, FrontendConfig{}), DataError);
  w.samples.assign(1000, 0.1);
  w.sample_rate = 0;
  EXPECT_THROW(logmel_fbank(w, FrontendConfig{}), ConfigError);
  w.sample_rate = 8000;
  EXPECT_THROW(logmel_fbank(w, FrontendConfig{}), ConfigError);
  try {
    Waveform short_wave;
    short_wave.samples.assign(10, 0.0);
    logmel_fbank(short_wave, FrontendConfig{});
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("audio too short"), std::string::npos);
  }
}

TEST(Cmn, HandExample) {
  FeatureMatrix f;
  f.frames.resize(2, 2);
  f.frames << 1, 3, 3, 1;
  const auto out = cmn(f);
  Matrix want(2, 2);
  want << -1, 1, 1, -1;
  EXPECT_TRUE(out.frames.isApprox(want));
}

TEST(Cmn, ZeroMeansAndIdempotent) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    FeatureMatrix f;
    f.frames = Matrix::Random(rng.integer(1, 30), 81) * 10.0;
    const auto once = cmn(f);
    EXPECT_LT(once.frames.colwise().mean().cwiseAbs().maxCoeff(), 1e-6);
    const auto twice = cmn(once);
    EXPECT_LT((twice.frames - once.frames).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Cmn, ConstantAndSingleFrameGiveZero) {
  FeatureMatrix f;
  f.frames = Matrix::Constant(5, 4, 2.5);
  EXPECT_TRUE(cmn(f).frames.isZero(0));
  f.frames = Matrix::Random(1, 4);
  EXPECT_TRUE(cmn(f).frames.isZero(0));
}

TEST(Chunk, ExactLengthIsIdentity) {
  FeatureMatrix f;
  f.frames = Matrix::Random(200, 3);
  Rng rng(1);
  EXPECT_EQ(chunk(f, 200, rng).frames, f.frames);
}

TEST(Chunk, LongInputGivesContiguousWindowInBounds) {
  FeatureMatrix f;
  f.frames.resize(500, 1);
  for (int i = 0; i < 500; ++i) f.frames(i, 0) = i;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    Rng a(seed), b(seed);
    const auto x = chunk(f, 200, a);
    const auto y = chunk(f, 200, b);
    EXPECT_EQ(x.frames, y.frames);
    const double start = x.frames(0, 0);
    EXPECT_GE(start, 0);
    EXPECT_LE(start, 300);
    for (int i = 0; i < 200; ++i) EXPECT_EQ(x.frames(i, 0), start + i);
  }
}

TEST(Chunk, ShortInputTiles) {
  FeatureMatrix f;
  f.frames = Matrix::Random(150, 4);
  Rng rng(5);
  const auto out = chunk(f, 200, rng);
  ASSERT_EQ(out.num_frames(), 200);
  EXPECT_EQ(out.frames.topRows(150), f.frames);
  EXPECT_EQ(out.frames.middleRows(150, 50), f.frames.topRows(50));
}

TEST(Chunk, ZeroLengthRejected) {
  FeatureMatrix f;
  f.frames = Matrix::Random(10, 2);
  Rng rng(0);
  EXPECT_THROW(chunk(f, 0, rng), ConfigError);
}

TEST(FeatureArchive, RoundTripsAtFloatPrecision) {
  const auto path = std::filesystem::temp_directory_path() / "farspk_feats.ffkf";
  std::vector<FeatureRecord> recs;
  for (int i = 0; i < 3; ++i) {
    FeatureMatrix f;
    f.frames = Matrix::Random(5 + i, 81);
    recs.emplace_back("utt" + std::to_string(i), f);
  }
  write_feature_archive(path, recs);
  const auto back = read_feature_archive(path);
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].first, recs[i].first);
    EXPECT_LT((back[i].second.frames - recs[i].second.frames).cwiseAbs().maxCoeff(), 1e-6);
  }
  std::filesystem::remove(path);
}

TEST(Wav, RoundTripsSixteenBitPcm) {
  const auto path = std::filesystem::temp_directory_path() / "farspk_test.wav";
  Waveform w = sine(440.0, 1234, 0.7);
  write_wav(path, w);
  const auto back = read_wav(path);
  EXPECT_EQ(back.sample_rate, 16000);
  ASSERT_EQ(back.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    EXPECT_NEAR(back.samples[i], w.samples[i], 1.0 / 32768.0);
  }
  std::filesystem::remove(path);
}
