#include "stet/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "stet/binary_io.hpp"
#include "stet/errors.hpp"

namespace stet {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os.write(kMagic, 8);
  binary::write<std::uint32_t>(os, kCheckpointVersion);
  const auto fields = ckpt.config.fields();
  binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(fields.size()));
  for (const auto& [k, v] : fields) {
    binary::write_string(os, k);
    binary::write_string(os, v);
  }
  binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    binary::write_string(os, k);
    binary::write_string(os, v);
  }
  binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    binary::write_string(os, name);
    binary::write<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) binary::write<std::uint64_t>(os, d);
    for (double v : t.data()) binary::write<double>(os, v);
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string(), 0);
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) {
    throw ParseError(path.string() + " is not a checkpoint (bad magic)", 0);
  }
  const auto version = binary::read<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 0);
  }
  Checkpoint ckpt;
  std::vector<std::pair<std::string, std::string>> fields(binary::read<std::uint32_t>(in, "config"));
  for (auto& [k, v] : fields) {
    k = binary::read_string(in, "config key");
    v = binary::read_string(in, "config value");
  }
  ckpt.config = ModelConfig::from_fields(fields);
  const auto n_meta = binary::read<std::uint32_t>(in, "metadata");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = binary::read_string(in, "metadata key");
    ckpt.metadata[k] = binary::read_string(in, "metadata value");
  }
  const auto n_tensors = binary::read<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = binary::read_string(in, "tensor name");
    const auto rank = binary::read<std::uint32_t>(in, "tensor rank");
    if (rank > kMaxRank) throw ParseError("tensor '" + name + "' has implausible rank", 0);
    Shape shape(rank);
    for (auto& d : shape) d = binary::read<std::uint64_t>(in, "tensor dims");
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data()) v = binary::read<double>(in, "tensor data");
    ckpt.tensors.emplace_back(std::move(name), t);
  }
  return ckpt;
}

Checkpoint make_checkpoint(const StetModel& model, std::map<std::string, std::string> metadata) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.metadata = std::move(metadata);
  for (const auto& [name, t] : model.parameters().entries()) ckpt.tensors.emplace_back(name, t.clone());
  return ckpt;
}

void restore_parameters(StetModel& model, const Checkpoint& ckpt) {
  const std::string diff = diff_configs(model.config(), ckpt.config);
  if (!diff.empty()) throw ConfigMismatchError(diff);
  for (const auto& [name, t] : model.parameters().entries()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    if (src->shape() != t.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()));
    }
    Tensor dst = t;
    std::copy(src->data().begin(), src->data().end(), dst.data().begin());
  }
}

}  // namespace stet
