#include "stet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "stet/errors.hpp"

namespace stet {

namespace {

const std::vector<std::string>& group_names() {
  static const std::vector<std::string> names{"single-finger", "multi-finger", "wrist", "rest"};
  return names;
}

void require_same(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError(std::string(what) + ": shapes differ");
  }
  if (a.cols == 0) throw DimensionError(std::string(what) + ": no joints");
}

}  // namespace

CategoryMap CategoryMap::grouped(std::size_t n_classes) {
  CategoryMap map;
  const auto& names = group_names();
  for (std::size_t k = 0; k < n_classes; ++k) {
    map.category_of_class.push_back(names[k * names.size() / n_classes]);
  }
  return map;
}

const std::string& CategoryMap::category(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= category_of_class.size()) {
    throw MappingError("class id " + std::to_string(class_id) + " has no category");
  }
  return category_of_class[static_cast<std::size_t>(class_id)];
}

std::optional<double> AccuracyReport::category(const std::string& name) const {
  for (const auto& c : categories) {
    if (c.name == name) return c.accuracy();
  }
  return std::nullopt;
}

AccuracyReport accuracy(std::span<const int> predictions, std::span<const int> labels,
                        const CategoryMap& map) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw InsufficientDataError("accuracy: no samples");
  // Known groups first, then any custom names in first-seen order.
  std::vector<std::string> order = group_names();
  for (const auto& name : map.category_of_class) {
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  }
  std::vector<CategoryAccuracy> acc(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) acc[i].name = order[i];
  AccuracyReport report;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string& cat = map.category(labels[i]);
    const bool hit = predictions[i] == labels[i];
    auto& slot = *std::find_if(acc.begin(), acc.end(), [&](const auto& a) { return a.name == cat; });
    ++slot.total;
    slot.correct += hit;
    report.correct += hit;
  }
  report.total = labels.size();
  report.overall = static_cast<double>(report.correct) / static_cast<double>(report.total);
  for (auto& a : acc) {
    if (a.total) report.categories.push_back(std::move(a));
  }
  return report;
}

double std_across_runs(std::span<const double> runs) {
  if (runs.size() < 2) throw InsufficientDataError("std_across_runs: need at least 2 runs");
  double mean = 0.0;
  for (double r : runs) mean += r;
  mean /= static_cast<double>(runs.size());
  double ss = 0.0;
  for (double r : runs) ss += (r - mean) * (r - mean);
  return std::sqrt(ss / static_cast<double>(runs.size() - 1));
}

double pcc(const Matrix& y_true, const Matrix& y_pred) {
  require_same(y_true, y_pred, "pcc");
  if (y_true.rows < 2) throw InsufficientDataError("pcc: need at least 2 points");
  const double n = static_cast<double>(y_true.rows);
  double total = 0.0;
  for (std::size_t j = 0; j < y_true.cols; ++j) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < y_true.rows; ++i) {
      ma += y_true(i, j);
      mb += y_pred(i, j);
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < y_true.rows; ++i) {
      const double a = y_true(i, j) - ma, b = y_pred(i, j) - mb;
      sab += a * b;
      saa += a * a;
      sbb += b * b;
    }
    if (saa == 0.0 || sbb == 0.0) {
      throw DegenerateError("pcc: joint " + std::to_string(j) + " has zero variance");
    }
    total += sab / std::sqrt(saa * sbb);
  }
  return total / static_cast<double>(y_true.cols);
}

namespace {

double joint_rmse(const Matrix& a, const Matrix& b, std::size_t j) {
  double ss = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double d = a(i, j) - b(i, j);
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(a.rows));
}

}  // namespace

double rmse(const Matrix& y_true, const Matrix& y_pred) {
  require_same(y_true, y_pred, "rmse");
  if (y_true.rows == 0) throw InsufficientDataError("rmse: no points");
  double total = 0.0;
  for (std::size_t j = 0; j < y_true.cols; ++j) total += joint_rmse(y_true, y_pred, j);
  return total / static_cast<double>(y_true.cols);
}

double nrmse(const Matrix& y_true, const Matrix& y_pred) {
  require_same(y_true, y_pred, "nrmse");
  if (y_true.rows == 0) throw InsufficientDataError("nrmse: no points");
  double total = 0.0;
  for (std::size_t j = 0; j < y_true.cols; ++j) {
    const auto col = y_true.column(j);
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    const double range = *hi - *lo;
    if (range == 0.0) throw DegenerateError("nrmse: joint " + std::to_string(j) + " is flat");
    total += joint_rmse(y_true, y_pred, j) / range;
  }
  return total / static_cast<double>(y_true.cols);
}

double avg_curvature(const Matrix& y, double step) {
  if (y.rows < 3) throw InsufficientDataError("avg_curvature: need at least 3 points");
  if (!(step > 0.0)) throw RangeError("avg_curvature: step must be positive");
  if (y.cols == 0) throw DimensionError("avg_curvature: no joints");
  double total = 0.0;
  for (std::size_t j = 0; j < y.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 1; i + 1 < y.rows; ++i) {
      const double d1 = (y(i + 1, j) - y(i - 1, j)) / (2.0 * step);
      const double d2 = (y(i + 1, j) - 2.0 * y(i, j) + y(i - 1, j)) / (step * step);
      s += std::abs(d2) / std::pow(1.0 + d1 * d1, 1.5);
    }
    total += s / static_cast<double>(y.rows - 2);
  }
  return total / static_cast<double>(y.cols);
}

double drop_rate(double acc_raw, double acc_noise) {
  if (acc_raw == 0.0) throw DegenerateError("drop_rate: clean accuracy is zero");
  return (acc_raw - acc_noise) / acc_raw;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["task"] = report.task;
  j["header"] = report.header;
  if (report.accuracy) {
    nlohmann::ordered_json acc;
    for (const auto& c : report.accuracy->categories) {
      acc[c.name] = {{"accuracy", c.accuracy()}, {"correct", c.correct}, {"total", c.total}};
    }
    acc["overall"] = {{"accuracy", report.accuracy->overall},
                      {"correct", report.accuracy->correct},
                      {"total", report.accuracy->total}};
    j["accuracy"] = acc;
  }
  if (!report.confusion.empty()) j["confusion"] = report.confusion;
  if (!report.run_accuracies.empty()) j["run_accuracies"] = report.run_accuracies;
  if (report.std_value) j["std"] = {{"value", *report.std_value}, {"axis", report.std_axis}};
  const auto opt = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  opt("pcc", report.pcc);
  opt("rmse", report.rmse);
  opt("nrmse", report.nrmse);
  opt("kappa", report.kappa);
  opt("kappa_truth", report.kappa_truth);
  opt("clean_accuracy", report.clean_accuracy);
  if (!report.noise.empty()) {
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : report.noise) {
      rows.push_back({{"mode", std::string(to_string(r.mode))},
                      {"intensity", r.intensity},
                      {"accuracy", r.accuracy},
                      {"drop_rate", r.drop_rate}});
    }
    j["noise"] = rows;
  }
  return j.dump(2);
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write report " + path.string());
  os << report_to_json(report) << '\n';
}

void write_noise_csv(const std::filesystem::path& path, const std::vector<NoiseRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "mode,intensity,accuracy,drop_rate\n";
  for (const auto& r : rows) {
    os << to_string(r.mode) << ',' << r.intensity << ',' << r.accuracy << ',' << r.drop_rate << '\n';
  }
}

}  // namespace stet
