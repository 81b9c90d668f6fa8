#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stet/matrix.hpp"
#include "stet/signal.hpp"

namespace stet {

inline constexpr int kReportSchemaVersion = 1;

// Assigns every class id a category name.
struct CategoryMap {
  std::vector<std::string> category_of_class;

  // Four gesture groups (single-finger, multi-finger, wrist, rest) spread
  // over the classes in contiguous blocks.
  static CategoryMap grouped(std::size_t n_classes);
  const std::string& category(int class_id) const;
};

struct CategoryAccuracy {
  std::string name;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return static_cast<double>(correct) / static_cast<double>(total); }
};

struct AccuracyReport {
  // Only categories with at least one sample appear.
  std::vector<CategoryAccuracy> categories;
  std::size_t correct = 0;
  std::size_t total = 0;
  double overall = 0.0;

  std::optional<double> category(const std::string& name) const;
};

AccuracyReport accuracy(std::span<const int> predictions, std::span<const int> labels,
                        const CategoryMap& map);

// Sample standard deviation (n - 1 denominator).
double std_across_runs(std::span<const double> runs);

// Rows are samples, columns joints. Each statistic is computed per joint and
// averaged over joints.
double pcc(const Matrix& y_true, const Matrix& y_pred);
double rmse(const Matrix& y_true, const Matrix& y_pred);
double nrmse(const Matrix& y_true, const Matrix& y_pred);
// Mean of |y''| / (1 + y'^2)^1.5 over interior points, central differences
// with samples `step` apart (unit index spacing by default).
double avg_curvature(const Matrix& y, double step = 1.0);

double drop_rate(double acc_raw, double acc_noise);

struct NoiseRow {
  NoiseMode mode = NoiseMode::AdditiveGaussian;
  double intensity = 0.0;
  double accuracy = 0.0;
  double drop_rate = 0.0;
  bool operator==(const NoiseRow&) const = default;
};

struct MetricsReport {
  std::string task = "classify";
  // Free-form provenance: optimizer, seeds, init source, decoder mode.
  std::map<std::string, std::string> header;
  std::optional<AccuracyReport> accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> run_accuracies;
  std::optional<double> std_value;
  std::string std_axis = "seeds";
  std::optional<double> pcc, rmse, nrmse, kappa, kappa_truth;
  std::optional<double> clean_accuracy;
  std::vector<NoiseRow> noise;
};

// Versioned JSON document; doubles are printed with round-trip precision.
std::string report_to_json(const MetricsReport& report);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
// mode,intensity,accuracy,drop_rate
void write_noise_csv(const std::filesystem::path& path, const std::vector<NoiseRow>& rows);

}  // namespace stet
