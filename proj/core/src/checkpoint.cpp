#include "mimdit/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "mimdit/config.hpp"
#include "mimdit/errors.hpp"

namespace mimdit {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'M', 'D'};

ModelConfig read_header(std::istream& in, const std::string& path) {
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw PersistenceError(path, "not a checkpoint file (bad magic)");
  }
  const auto version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw PersistenceError(path, "unsupported checkpoint version " + std::to_string(version));
  }
  try {
    return parse_model_config(read_string(in));
  } catch (const PersistenceError&) {
    throw;
  } catch (const Error& e) {
    throw PersistenceError(path, std::string("bad stored config: ") + e.what());
  }
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError(path, "cannot open checkpoint");
  return in;
}

}  // namespace

void save_checkpoint(const std::string& path, MiMDiT& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  out.write(kMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_string(out, format_model_config(model.config()));
  const ParameterList params = model.parameters();
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    write_string(out, name);
    write_tensor(out, *tensor);
  }
  if (!out) throw PersistenceError(path, "write failed");
}

ModelConfig read_checkpoint_config(const std::string& path) {
  auto in = open_input(path);
  try {
    return read_header(in, path);
  } catch (const PersistenceError& e) {
    if (e.path() == path) throw;
    throw PersistenceError(path, e.what());
  }
}

MiMDiT load_checkpoint(const std::string& path) {
  auto in = open_input(path);
  try {
    const ModelConfig config = read_header(in, path);
    MiMDiT model = MiMDiT::init(config, 0);
    ParameterList params = model.parameters();
    const auto count = read_u32(in);
    if (count != params.size()) {
      throw PersistenceError(path, "expected " + std::to_string(params.size()) +
                                       " tensors, found " + std::to_string(count));
    }
    for (auto& [name, tensor] : params) {
      const std::string stored = read_string(in);
      if (stored != name) {
        throw PersistenceError(path, "expected tensor '" + name + "', found '" + stored + "'");
      }
      Tensor value = read_tensor(in);
      if (value.shape() != tensor->shape()) {
        throw PersistenceError(path, "tensor '" + name + "' has shape " +
                                         shape_to_string(value.shape()) + ", expected " +
                                         shape_to_string(tensor->shape()));
      }
      std::copy(value.data().begin(), value.data().end(), tensor->data().begin());
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw PersistenceError(path, "trailing bytes after tensor table");
    }
    return model;
  } catch (const PersistenceError& e) {
    if (e.path() == path) throw;
    throw PersistenceError(path, e.what());
  }
}

MiMDiT load_checkpoint(const std::string& path, const ModelConfig& expected) {
  const ModelConfig stored = read_checkpoint_config(path);
  const auto diff = differing_fields(model_fields(expected), model_fields(stored));
  if (!diff.empty()) {
    std::string names;
    for (const auto& d : diff) names += (names.empty() ? "" : ", ") + d;
    throw ContractError("checkpoint " + path + " config differs in: " + names);
  }
  return load_checkpoint(path);
}

}  // namespace mimdit
