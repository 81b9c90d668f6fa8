#include "stet/dataset_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "stet/binary_io.hpp"
#include "stet/errors.hpp"
#include "stet/log.hpp"

namespace stet {

namespace {

constexpr char kRawMagic[8] = {'S', 'T', 'E', 'T', 'R', 'A', 'W', '\0'};
constexpr std::uint32_t kRawVersion = 1;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& cell, std::size_t line, const std::string& column) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  while (begin < end && *begin == ' ') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("non-numeric value '" + cell + "' in column " + column, line);
  }
  return value;
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<Recording> load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset " + path.string(), 0);
  std::vector<Recording> out;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) {
    warn("load_dataset: " + path.string() + " is empty");
    return out;
  }
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  if (header.size() < 4 || header[0] != "subject" || header[1] != "label" || header[2] != "rate") {
    throw ParseError("malformed header: expected subject,label,rate,channel_0,...", line_no);
  }
  std::size_t channels = 0, joints = 0;
  for (std::size_t i = 3; i < header.size(); ++i) {
    if (header[i] == "channel_" + std::to_string(channels) && joints == 0) {
      ++channels;
    } else if (header[i] == "joint_" + std::to_string(joints)) {
      ++joints;
    } else {
      throw ParseError("malformed header column '" + header[i] + "'", line_no);
    }
  }
  if (channels == 0) throw ParseError("header declares no channel columns", line_no);
  const std::size_t width = 3 + channels + joints;

  Recording current;
  std::vector<double> samples, traj;
  std::size_t rows = 0;
  const auto flush = [&]() {
    if (rows == 0) return;
    current.samples.rows = rows;
    current.samples.cols = channels;
    current.samples.values = std::move(samples);
    if (joints) {
      current.trajectory.rows = rows;
      current.trajectory.cols = joints;
      current.trajectory.values = std::move(traj);
    }
    out.push_back(std::move(current));
    current = Recording{};
    samples.clear();
    traj.clear();
    rows = 0;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != width) {
      throw ParseError("expected " + std::to_string(width) + " columns, found " +
                           std::to_string(cells.size()),
                       line_no);
    }
    const double label = parse_number(cells[1], line_no, "label");
    const double rate = parse_number(cells[2], line_no, "rate");
    if (rows == 0) {
      current.subject_id = cells[0];
      current.label = static_cast<int>(label);
      current.sample_rate_hz = rate;
    } else if (cells[0] != current.subject_id || static_cast<int>(label) != current.label ||
               rate != current.sample_rate_hz) {
      throw ParseError("subject/label/rate changed inside a recording (missing blank line?)",
                       line_no);
    }
    for (std::size_t c = 0; c < channels; ++c) {
      samples.push_back(parse_number(cells[3 + c], line_no, header[3 + c]));
    }
    for (std::size_t j = 0; j < joints; ++j) {
      traj.push_back(parse_number(cells[3 + channels + j], line_no, header[3 + channels + j]));
    }
    ++rows;
  }
  flush();
  if (out.empty()) warn("load_dataset: " + path.string() + " contains no samples");
  return out;
}

void save_csv(const std::filesystem::path& path, const std::vector<Recording>& recs) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write dataset " + path.string());
  if (recs.empty()) return;
  const std::size_t channels = recs.front().channels();
  const std::size_t joints = recs.front().trajectory.cols;
  os << "subject,label,rate";
  for (std::size_t c = 0; c < channels; ++c) os << ",channel_" << c;
  for (std::size_t j = 0; j < joints; ++j) os << ",joint_" << j;
  os << '\n';
  for (std::size_t r = 0; r < recs.size(); ++r) {
    const Recording& rec = recs[r];
    if (rec.channels() != channels || rec.trajectory.cols != joints) {
      throw DimensionError("save_dataset: recordings disagree on channel/joint count");
    }
    if (r) os << '\n';
    for (std::size_t i = 0; i < rec.samples.rows; ++i) {
      os << rec.subject_id << ',' << rec.label << ',' << format_number(rec.sample_rate_hz);
      for (std::size_t c = 0; c < channels; ++c) os << ',' << format_number(rec.samples(i, c));
      for (std::size_t j = 0; j < joints; ++j) os << ',' << format_number(rec.trajectory(i, j));
      os << '\n';
    }
  }
}

std::vector<Recording> load_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset " + path.string(), 0);
  char magic[8];
  if (!in.read(magic, 8)) {
    warn("load_dataset: " + path.string() + " is empty");
    return {};
  }
  if (!std::equal(magic, magic + 8, kRawMagic)) throw ParseError("bad raw-f64 magic bytes", 0);
  const auto version = binary::read<std::uint32_t>(in, "version");
  if (version != kRawVersion) {
    throw ParseError("unsupported raw-f64 version " + std::to_string(version), 0);
  }
  const auto count = binary::read<std::uint32_t>(in, "recording count");
  std::vector<Recording> out;
  out.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    Recording rec;
    const auto channels = binary::read<std::uint32_t>(in, "channel count");
    const auto joints = binary::read<std::uint32_t>(in, "joint count");
    const auto n = binary::read<std::uint64_t>(in, "sample count");
    rec.sample_rate_hz = binary::read<double>(in, "rate");
    rec.label = binary::read<std::int32_t>(in, "label");
    rec.subject_id = binary::read_string(in, "subject");
    rec.samples = Matrix(n, channels);
    for (double& v : rec.samples.values) v = binary::read<double>(in, "samples");
    if (joints) {
      rec.trajectory = Matrix(n, joints);
      for (double& v : rec.trajectory.values) v = binary::read<double>(in, "trajectory");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void save_raw(const std::filesystem::path& path, const std::vector<Recording>& recs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write dataset " + path.string());
  os.write(kRawMagic, 8);
  binary::write<std::uint32_t>(os, kRawVersion);
  binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(recs.size()));
  for (const Recording& rec : recs) {
    binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(rec.channels()));
    binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(rec.trajectory.cols));
    binary::write<std::uint64_t>(os, rec.samples.rows);
    binary::write<double>(os, rec.sample_rate_hz);
    binary::write<std::int32_t>(os, rec.label);
    binary::write_string(os, rec.subject_id);
    for (double v : rec.samples.values) binary::write<double>(os, v);
    for (double v : rec.trajectory.values) binary::write<double>(os, v);
  }
}

}  // namespace

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "csv") return DatasetFormat::Csv;
  if (name == "raw-f64" || name == "raw") return DatasetFormat::RawF64;
  throw ConfigError("unknown dataset format '" + std::string(name) + "' (expected csv or raw-f64)");
}

DatasetFormat dataset_format_for(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? DatasetFormat::Csv : DatasetFormat::RawF64;
}

std::vector<Recording> load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  return format == DatasetFormat::Csv ? load_csv(path) : load_raw(path);
}

void save_dataset(const std::filesystem::path& path, const std::vector<Recording>& recordings,
                  DatasetFormat format) {
  if (format == DatasetFormat::Csv) {
    save_csv(path, recordings);
  } else {
    save_raw(path, recordings);
  }
}

}  // namespace stet
