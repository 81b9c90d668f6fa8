#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stet/matrix.hpp"

namespace stet {

// One continuous multi-sensor capture. Classification recordings carry a
// gesture id in `label`; regression recordings carry a per-sample joint-angle
// trajectory (degrees) and label = -1.
struct Recording {
  Matrix samples;  // n_samples x c
  double sample_rate_hz = 1000.0;
  int label = -1;
  Matrix trajectory;  // n_samples x n_joints, empty for classification
  std::string subject_id;

  bool is_regression() const { return !trajectory.empty(); }
  std::size_t channels() const { return samples.cols; }
};

// A t x c model input cut from a recording.
struct SignalSequence {
  Matrix values;
  int label = -1;
  Matrix trajectory;  // t x n_joints slice, regression only
  std::size_t recording = 0;
  std::size_t start = 0;
};

// Per-channel affine map to [-1, 1], fitted on the training split only.
struct MinMaxParams {
  std::vector<double> min;
  std::vector<double> max;
};

MinMaxParams fit_minmax(std::span<const Recording> recordings);
// Values outside the fitted range (unseen data) are clipped to [-1, 1].
Recording minmax_normalize(const Recording& rec, const MinMaxParams& params);
// Fits on `rec` itself.
Recording minmax_normalize(const Recording& rec);

double mulaw(double x, double mu);
// sign(x) ln(1 + mu|x|) / ln(1 + mu) entrywise; requires |x| <= 1.
Recording mulaw_normalize(const Recording& rec, double mu = 255.0);

enum class StrideMode {
  WindowMinusOverlap,  // stride = window - overlap (default)
  OverlapIsStride,     // stride = overlap
};

struct SegmentOptions {
  double window_ms = 200.0;
  double overlap_ms = 10.0;
  StrideMode stride = StrideMode::WindowMinusOverlap;
};

std::size_t window_length_samples(const SegmentOptions& options, double sample_rate_hz);
std::size_t window_stride_samples(const SegmentOptions& options, double sample_rate_hz);
// Trailing partial windows are dropped. A recording shorter than one window
// yields no windows and a warning.
std::vector<SignalSequence> segment_windows(const Recording& rec, const SegmentOptions& options,
                                            std::size_t recording_index = 0);

enum class NoiseMode { AdditiveGaussian, MultiplicativeGaussian, SignalLoss };

std::string_view to_string(NoiseMode mode);
NoiseMode parse_noise_mode(std::string_view name);

struct NoiseSpec {
  NoiseMode mode = NoiseMode::AdditiveGaussian;
  double intensity = 0.0;  // sigma, or drop probability for SignalLoss
  std::uint64_t seed = 0;

  void validate() const;
};

Matrix inject_noise(const Matrix& x, const NoiseSpec& spec);
SignalSequence inject_noise(const SignalSequence& x, const NoiseSpec& spec);

struct SyntheticSpec {
  std::size_t n_classes = 8;
  std::size_t n_channels = 8;
  std::size_t t = 64;
  std::size_t samples_per_class = 200;
  std::uint64_t seed = 7;
  double sample_rate_hz = 320.0;
  // Class pairs (0,1), (2,3), ... that share envelopes and differ only by the
  // position of one short burst.
  std::size_t twin_pairs = 1;
  // Class k activates only channels with index % n_classes == k.
  bool disjoint_channels = false;
};

// Each recording is one gesture trial of exactly t samples: per-channel
// activation envelopes (smooth bumps fixed per class) modulating band-limited
// zero-mean noise, with per-trial gain and timing jitter.
std::vector<Recording> generate_synthetic_dataset(const SyntheticSpec& spec);

struct SyntheticRegressionSpec {
  std::size_t n_channels = 8;
  std::size_t n_joints = 2;
  std::size_t n_recordings = 7;
  std::size_t n_samples = 4800;
  double sample_rate_hz = 320.0;
  std::uint64_t seed = 11;
};

// Sessions with smooth joint-angle trajectories (degrees) driving the
// envelopes of the sensor channels.
std::vector<Recording> generate_synthetic_regression(const SyntheticRegressionSpec& spec);

}  // namespace stet
