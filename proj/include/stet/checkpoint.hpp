#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stet/errors.hpp"
#include "stet/model.hpp"

// Binary checkpoint container, all integers and floats little-endian:
//
//   char[8]  "STETCKPT"
//   u32      version (1)
//   u32      config field count, then per field: string key, string value
//   u32      metadata entry count, then per entry: string key, string value
//   u32      tensor count, then per tensor:
//              string name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//
// Strings are a u32 byte length followed by the bytes. Parameter tensors are
// stored under their ParameterStore names; optimizer state uses the
// "opt.m/<name>" and "opt.v/<name>" prefixes.
namespace stet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

// Raised when a checkpoint's model config differs from the expected one. The
// message lists each differing field by name.
class ConfigMismatchError : public ConfigError {
 public:
  explicit ConfigMismatchError(const std::string& diff)
      : ConfigError("checkpoint config mismatch:\n" + diff), diff_(diff) {}
  const std::string& diff() const { return diff_; }

 private:
  std::string diff_;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshot of a model's parameters (deep copies) plus metadata.
Checkpoint make_checkpoint(const StetModel& model, std::map<std::string, std::string> metadata = {});

// Copies every parameter of `model` from the checkpoint. Throws
// ConfigMismatchError if the configs differ, ConfigError if a tensor is missing.
void restore_parameters(StetModel& model, const Checkpoint& ckpt);

}  // namespace stet
