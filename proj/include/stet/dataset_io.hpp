#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "stet/signal.hpp"

namespace stet {

enum class DatasetFormat { Csv, RawF64 };

DatasetFormat parse_dataset_format(std::string_view name);
// Picks the format from the extension: .csv, otherwise raw-f64.
DatasetFormat dataset_format_for(const std::filesystem::path& path);

// csv: header `subject,label,rate,channel_0..channel_{c-1}` optionally
// followed by `joint_0..joint_{k-1}` for regression trajectories; one sample
// per row; a blank line ends a recording.
//
// raw-f64 (all little-endian):
//   magic "STETRAW\0", u32 version (1), u32 recording count, then per recording
//   u32 channels, u32 joints, u64 samples, f64 rate, i32 label,
//   u32 subject length + bytes, samples x channels f64, samples x joints f64.
std::vector<Recording> load_dataset(const std::filesystem::path& path, DatasetFormat format);
void save_dataset(const std::filesystem::path& path, const std::vector<Recording>& recordings,
                  DatasetFormat format);

}  // namespace stet
