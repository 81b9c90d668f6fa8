#include "stet/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "stet/errors.hpp"
#include "stet/log.hpp"
#include "stet/rng.hpp"

namespace stet {

MinMaxParams fit_minmax(std::span<const Recording> recordings) {
  if (recordings.empty()) throw DegenerateError("fit_minmax: no recordings");
  const std::size_t c = recordings.front().channels();
  MinMaxParams p;
  p.min.assign(c, std::numeric_limits<double>::infinity());
  p.max.assign(c, -std::numeric_limits<double>::infinity());
  for (const auto& rec : recordings) {
    if (rec.channels() != c) {
      throw DimensionError("fit_minmax: channel count " + std::to_string(rec.channels()) +
                           " differs from " + std::to_string(c));
    }
    for (std::size_t r = 0; r < rec.samples.rows; ++r) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        p.min[ch] = std::min(p.min[ch], rec.samples(r, ch));
        p.max[ch] = std::max(p.max[ch], rec.samples(r, ch));
      }
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(p.max[ch] > p.min[ch])) {
      throw DegenerateError("minmax: channel " + std::to_string(ch) + " is constant");
    }
  }
  return p;
}

Recording minmax_normalize(const Recording& rec, const MinMaxParams& params) {
  const std::size_t c = rec.channels();
  if (params.min.size() != c || params.max.size() != c) {
    throw DimensionError("minmax_normalize: parameters cover " + std::to_string(params.min.size()) +
                         " channels, recording has " + std::to_string(c));
  }
  Recording out = rec;
  for (std::size_t r = 0; r < rec.samples.rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double span = params.max[ch] - params.min[ch];
      const double v = 2.0 * (rec.samples(r, ch) - params.min[ch]) / span - 1.0;
      out.samples(r, ch) = std::clamp(v, -1.0, 1.0);
    }
  }
  return out;
}

Recording minmax_normalize(const Recording& rec) {
  return minmax_normalize(rec, fit_minmax(std::span<const Recording>(&rec, 1)));
}

double mulaw(double x, double mu) {
  return std::copysign(std::log1p(mu * std::abs(x)) / std::log1p(mu), x);
}

Recording mulaw_normalize(const Recording& rec, double mu) {
  if (!(mu > 0.0)) throw ConfigError("mu-law: mu must be positive, got " + std::to_string(mu));
  Recording out = rec;
  for (double& v : out.samples.values) {
    if (!(std::abs(v) <= 1.0)) {
      throw RangeError("mu-law: input " + std::to_string(v) +
                       " outside [-1, 1]; apply min-max normalization first");
    }
    v = mulaw(v, mu);
  }
  return out;
}

std::size_t window_length_samples(const SegmentOptions& options, double sample_rate_hz) {
  if (!(options.window_ms > options.overlap_ms) || options.overlap_ms < 0.0) {
    throw ConfigError("segmentation: need window_ms > overlap_ms >= 0");
  }
  if (!(sample_rate_hz > 0.0)) throw ConfigError("segmentation: sample rate must be positive");
  const auto len = static_cast<std::size_t>(std::llround(options.window_ms * sample_rate_hz / 1000.0));
  if (len < 2) throw ConfigError("segmentation: window shorter than 2 samples");
  return len;
}

std::size_t window_stride_samples(const SegmentOptions& options, double sample_rate_hz) {
  const std::size_t len = window_length_samples(options, sample_rate_hz);
  const auto overlap =
      static_cast<std::size_t>(std::llround(options.overlap_ms * sample_rate_hz / 1000.0));
  const std::size_t stride =
      options.stride == StrideMode::WindowMinusOverlap ? len - std::min(overlap, len) : overlap;
  if (stride == 0) throw ConfigError("segmentation: stride rounds to 0 samples");
  return stride;
}

std::vector<SignalSequence> segment_windows(const Recording& rec, const SegmentOptions& options,
                                            std::size_t recording_index) {
  const std::size_t len = window_length_samples(options, rec.sample_rate_hz);
  const std::size_t stride = window_stride_samples(options, rec.sample_rate_hz);
  std::vector<SignalSequence> out;
  const std::size_t n = rec.samples.rows;
  if (n < len) {
    warn("segment_windows: recording '" + rec.subject_id + "' has " + std::to_string(n) +
         " samples, shorter than one window of " + std::to_string(len));
    return out;
  }
  const std::size_t c = rec.channels();
  const std::size_t joints = rec.trajectory.cols;
  for (std::size_t start = 0; start + len <= n; start += stride) {
    SignalSequence seq;
    seq.values = Matrix(len, c);
    std::copy_n(rec.samples.values.begin() + static_cast<long>(start * c), len * c,
                seq.values.values.begin());
    seq.label = rec.label;
    if (rec.is_regression()) {
      seq.trajectory = Matrix(len, joints);
      std::copy_n(rec.trajectory.values.begin() + static_cast<long>(start * joints), len * joints,
                  seq.trajectory.values.begin());
    }
    seq.recording = recording_index;
    seq.start = start;
    out.push_back(std::move(seq));
  }
  return out;
}

std::string_view to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::AdditiveGaussian:
      return "additive";
    case NoiseMode::MultiplicativeGaussian:
      return "multiplicative";
    case NoiseMode::SignalLoss:
      return "signal_loss";
  }
  return "unknown";
}

NoiseMode parse_noise_mode(std::string_view name) {
  if (name == "additive") return NoiseMode::AdditiveGaussian;
  if (name == "multiplicative") return NoiseMode::MultiplicativeGaussian;
  if (name == "signal_loss") return NoiseMode::SignalLoss;
  throw ConfigError("unknown noise mode '" + std::string(name) +
                    "' (expected additive, multiplicative or signal_loss)");
}

void NoiseSpec::validate() const {
  if (!(intensity >= 0.0)) throw ConfigError("noise intensity must be >= 0");
  if (mode == NoiseMode::SignalLoss && intensity > 1.0) {
    throw ConfigError("signal-loss probability must be <= 1, got " + std::to_string(intensity));
  }
}

Matrix inject_noise(const Matrix& x, const NoiseSpec& spec) {
  spec.validate();
  Matrix out = x;
  if (spec.intensity == 0.0) return out;
  Rng rng(spec.seed);
  switch (spec.mode) {
    case NoiseMode::AdditiveGaussian:
      for (double& v : out.values) v += spec.intensity * rng.normal();
      break;
    case NoiseMode::MultiplicativeGaussian:
      for (double& v : out.values) v *= 1.0 + spec.intensity * rng.normal();
      break;
    case NoiseMode::SignalLoss:
      for (double& v : out.values) {
        if (rng.uniform() < spec.intensity) v = 0.0;
      }
      break;
  }
  return out;
}

SignalSequence inject_noise(const SignalSequence& x, const NoiseSpec& spec) {
  SignalSequence out = x;
  out.values = inject_noise(x.values, spec);
  return out;
}

namespace {

struct Bump {
  double center;
  double width;
  double amplitude;
};

// Zero-mean unit-variance AR(1) noise; coefficient 0.3 keeps it band-limited.
std::vector<double> carrier(std::size_t n, Rng& rng) {
  constexpr double a = 0.3;
  const double b = std::sqrt(1.0 - a * a);
  std::vector<double> z(n);
  double prev = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    prev = a * prev + b * rng.normal();
    z[i] = prev;
  }
  return z;
}

constexpr double kBaseline = 0.12;
constexpr double kSensorNoise = 0.02;

}  // namespace

std::vector<Recording> generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.n_channels == 0 || spec.t < 8) throw ConfigError("synthetic dataset: c >= 1 and t >= 8");
  if (2 * spec.twin_pairs > spec.n_classes) {
    throw ConfigError("synthetic dataset: too many twin pairs for the class count");
  }
  Rng class_rng = Rng(spec.seed).split(0);
  const double t = static_cast<double>(spec.t);

  // envelopes[class][channel] -> bumps
  std::vector<std::vector<std::vector<Bump>>> envelopes(spec.n_classes,
                                                        std::vector<std::vector<Bump>>(spec.n_channels));
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    std::vector<std::size_t> active;
    if (spec.disjoint_channels) {
      for (std::size_t ch = 0; ch < spec.n_channels; ++ch) {
        if (ch % spec.n_classes == k) active.push_back(ch);
      }
    } else {
      std::vector<std::size_t> order(spec.n_channels);
      for (std::size_t ch = 0; ch < spec.n_channels; ++ch) order[ch] = ch;
      class_rng.shuffle(std::span<std::size_t>(order));
      const std::size_t count = std::max<std::size_t>(1, spec.n_channels / 2);
      active.assign(order.begin(), order.begin() + static_cast<long>(count));
    }
    for (std::size_t ch : active) {
      const std::size_t n_bumps = 1 + class_rng.below(2);
      for (std::size_t b = 0; b < n_bumps; ++b) {
        envelopes[k][ch].push_back({class_rng.uniform(0.15, 0.85) * t,
                                    class_rng.uniform(0.08, 0.22) * t,
                                    class_rng.uniform(0.6, 1.2)});
      }
    }
  }
  for (std::size_t p = 0; p < spec.twin_pairs; ++p) {
    const std::size_t a = 2 * p, b = 2 * p + 1;
    envelopes[b] = envelopes[a];
    // Same burst on the same channel, at mirrored positions.
    const std::size_t ch = class_rng.below(spec.n_channels);
    const double width = std::max(1.0, t / 16.0);
    envelopes[a][ch].push_back({0.3 * t, width, 1.6});
    envelopes[b][ch].push_back({0.7 * t, width, 1.6});
  }

  std::vector<Recording> out;
  out.reserve(spec.n_classes * spec.samples_per_class);
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      Rng rng = Rng(spec.seed).split(1 + k * 1000003ULL + s);
      Recording rec;
      rec.sample_rate_hz = spec.sample_rate_hz;
      rec.label = static_cast<int>(k);
      rec.subject_id = "synthetic";
      rec.samples = Matrix(spec.t, spec.n_channels);
      const double shift = static_cast<double>(rng.below(5)) - 2.0;
      for (std::size_t ch = 0; ch < spec.n_channels; ++ch) {
        const double gain = std::exp(0.15 * rng.normal());
        const auto z = carrier(spec.t, rng);
        for (std::size_t i = 0; i < spec.t; ++i) {
          const double tau = static_cast<double>(i) - shift;
          double env = kBaseline;
          for (const Bump& bump : envelopes[k][ch]) {
            const double d = (tau - bump.center) / bump.width;
            env += bump.amplitude * std::exp(-0.5 * d * d);
          }
          rec.samples(i, ch) = gain * env * z[i] + kSensorNoise * rng.normal();
        }
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::vector<Recording> generate_synthetic_regression(const SyntheticRegressionSpec& spec) {
  if (spec.n_channels == 0 || spec.n_joints == 0 || spec.n_recordings == 0) {
    throw ConfigError("synthetic regression: channels, joints and recordings must be positive");
  }
  Rng setup = Rng(spec.seed).split(0);
  // Each channel is driven by one or two joints.
  Matrix drive(spec.n_channels, spec.n_joints);
  for (std::size_t ch = 0; ch < spec.n_channels; ++ch) {
    drive(ch, ch % spec.n_joints) = setup.uniform(0.6, 1.2);
    if (spec.n_joints > 1 && setup.uniform() < 0.5) {
      drive(ch, setup.below(spec.n_joints)) += setup.uniform(0.2, 0.5);
    }
  }
  std::vector<Recording> out;
  for (std::size_t r = 0; r < spec.n_recordings; ++r) {
    Rng rng = Rng(spec.seed).split(1 + r);
    Recording rec;
    rec.sample_rate_hz = spec.sample_rate_hz;
    rec.subject_id = "session_" + std::to_string(r);
    rec.samples = Matrix(spec.n_samples, spec.n_channels);
    rec.trajectory = Matrix(spec.n_samples, spec.n_joints);
    for (std::size_t j = 0; j < spec.n_joints; ++j) {
      double f[3], amp[3], phase[3];
      for (int q = 0; q < 3; ++q) {
        f[q] = rng.uniform(0.08, 0.35);
        amp[q] = rng.uniform(6.0, 14.0);
        phase[q] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const double sec = static_cast<double>(i) / spec.sample_rate_hz;
        double angle = 45.0;
        for (int q = 0; q < 3; ++q) angle += amp[q] * std::sin(2.0 * std::numbers::pi * f[q] * sec + phase[q]);
        rec.trajectory(i, j) = angle;
      }
    }
    for (std::size_t ch = 0; ch < spec.n_channels; ++ch) {
      const auto z = carrier(spec.n_samples, rng);
      for (std::size_t i = 0; i < spec.n_samples; ++i) {
        double env = kBaseline;
        for (std::size_t j = 0; j < spec.n_joints; ++j) {
          // Angles span roughly [0, 90] degrees.
          env += drive(ch, j) * std::clamp(rec.trajectory(i, j) / 90.0, 0.0, 1.0);
        }
        rec.samples(i, ch) = env * z[i] + kSensorNoise * rng.normal();
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace stet
