#include "mimdit/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "mimdit/errors.hpp"
#include "mimdit/text.hpp"

namespace mimdit {

namespace {

constexpr std::uint64_t kHeldoutSalt = 0x68656c646f7574ULL;

using FieldMap = std::map<std::string, std::string>;

std::string join_kinds(const std::vector<DegradationKind>& kinds) {
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += ',';
    out += degradation_name(kinds[i]);
  }
  return out;
}

std::string join_mechanisms(const std::array<Mechanism, MiMConfig::group_count>& ms) {
  std::string out;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    if (i) out += ',';
    out += mechanism_name(ms[i]);
  }
  return out;
}

bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigurationError("expected true/false, got '" + std::string(text) + "'");
}

const std::string& field(const FieldMap& fields, const std::string& key) {
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigurationError("missing config field " + key);
  return it->second;
}

std::size_t size_field(const FieldMap& f, const std::string& key) {
  try {
    return static_cast<std::size_t>(parse_u64(field(f, key)));
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigurationError(key + ": " + e.what());
  }
}

double double_field(const FieldMap& f, const std::string& key) {
  try {
    return parse_double(field(f, key));
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigurationError(key + ": " + e.what());
  }
}

template <typename Fn>
auto enum_field(const FieldMap& f, const std::string& key, Fn parse) {
  try {
    return parse(field(f, key));
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigurationError(key + ": " + e.what());
  }
}

ModelConfig model_from_fields(const FieldMap& f) {
  ModelConfig m;
  m.mim.model_dim = size_field(f, "model.dim");
  m.mim.block_count = size_field(f, "model.blocks");
  m.mim.sub_expert_count = size_field(f, "model.sub_experts");
  m.mim.top_k = size_field(f, "model.top_k");
  m.mim.window = size_field(f, "model.window");
  m.mim.heads = size_field(f, "model.heads");
  m.mim.se_reduction = size_field(f, "model.se_reduction");
  const auto names = split_list(field(f, "model.mechanisms"), ',');
  if (names.size() != MiMConfig::group_count) {
    throw ConfigurationError("model.mechanisms must list exactly 4 mechanisms");
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    m.mim.mechanisms[i] = enum_field(f, "model.mechanisms", [&](const std::string&) {
      return parse_mechanism(names[i]);
    });
  }
  m.mim.inter = enum_field(f, "model.inter", [](const std::string& s) {
    return parse_inter_routing(s);
  });
  m.mim.intra = enum_field(f, "model.intra", [](const std::string& s) {
    return parse_intra_routing(s);
  });
  m.mim.residual = parse_bool(field(f, "model.residual"));
  m.mim.balance_coefficient = double_field(f, "model.balance_coefficient");
  m.image_height = size_field(f, "model.image_height");
  m.image_width = size_field(f, "model.image_width");
  m.channels = size_field(f, "model.channels");
  m.patch = size_field(f, "model.patch");
  m.text_tokens = size_field(f, "model.text_tokens");
  m.mlp_ratio = size_field(f, "model.mlp_ratio");
  return m;
}

FieldMap to_map(const ConfigFields& fields) { return FieldMap(fields.begin(), fields.end()); }

/// Parses INI text into "section.key" pairs, rejecting keys not in `schema`.
FieldMap parse_fields(std::string_view text, const ConfigFields& schema) {
  FieldMap fields = to_map(schema);
  std::set<std::string> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find_first_of("#;"); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigurationError(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigurationError(where + "expected key = value");
    if (section.empty()) throw ConfigurationError(where + "key outside a section");
    const std::string key = section + "." + std::string(trim(line.substr(0, eq)));
    if (!fields.contains(key)) throw ConfigurationError(where + "unknown key " + key);
    if (!seen.insert(key).second) throw ConfigurationError(where + "duplicate key " + key);
    fields[key] = std::string(trim(line.substr(eq + 1)));
  }
  return fields;
}

std::string format_fields(const ConfigFields& fields) {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : fields) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) os << '\n';
      os << '[' << s << "]\n";
      section = s;
    }
    os << key.substr(dot + 1) << " = " << value << '\n';
  }
  return os.str();
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_intra: return "no_intra";
    case Variant::spatial_only: return "spatial_only";
    case Variant::channel_only: return "channel_only";
    case Variant::swin_only: return "swin_only";
    case Variant::se_only: return "se_only";
    case Variant::sparse_inter_sparse_intra: return "sparse_inter_sparse_intra";
    case Variant::sparse_inter_dense_intra: return "sparse_inter_dense_intra";
  }
  return "unknown";
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> variants{
      Variant::full,     Variant::no_intra, Variant::spatial_only,
      Variant::channel_only, Variant::swin_only, Variant::se_only,
      Variant::sparse_inter_sparse_intra, Variant::sparse_inter_dense_intra};
  return variants;
}

Variant parse_variant(std::string_view name) {
  for (auto v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigurationError("unknown variant '" + std::string(name) + "'");
}

std::vector<Variant> parse_variant_list(std::string_view names) {
  std::vector<Variant> out;
  for (const auto& n : split_list(names, ',')) out.push_back(parse_variant(n));
  if (out.empty()) throw ConfigurationError("variant list is empty");
  return out;
}

ModelConfig apply_variant(const ModelConfig& base, Variant variant) {
  ModelConfig m = base;
  auto single_mechanism = [&](Mechanism mech) { m.mim.mechanisms.fill(mech); };
  switch (variant) {
    case Variant::full:
      break;
    case Variant::no_intra:
      m.mim.sub_expert_count = 1;
      m.mim.top_k = 1;
      m.mim.intra = IntraRouting::single;
      break;
    case Variant::spatial_only: single_mechanism(Mechanism::spatial); break;
    case Variant::channel_only: single_mechanism(Mechanism::channel); break;
    case Variant::swin_only: single_mechanism(Mechanism::swin); break;
    case Variant::se_only: single_mechanism(Mechanism::se); break;
    case Variant::sparse_inter_sparse_intra:
      m.mim.inter = InterRouting::sparse_top1;
      m.mim.intra = IntraRouting::sparse;
      break;
    case Variant::sparse_inter_dense_intra:
      m.mim.inter = InterRouting::sparse_top1;
      m.mim.intra = IntraRouting::dense_uniform;
      break;
  }
  return m;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigurationError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigurationError("train.batch_size must be >= 1");
  if (log_every < 1) throw ConfigurationError("train.log_every must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigurationError("train.beta1 must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigurationError("train.beta2 must be in [0,1)");
  if (!(epsilon > 0.0)) throw ConfigurationError("train.epsilon must be > 0");
  if (!(t_min >= 0.0 && t_min <= t_max && t_max <= 1.0)) {
    throw ConfigurationError("train.t_min/t_max must satisfy 0 <= t_min <= t_max <= 1");
  }
}

void DataConfig::validate() const {
  if (count < 1) throw ConfigurationError("data.count must be >= 1");
  if (kinds.empty()) throw ConfigurationError("data.kinds must not be empty");
  if (!(severity_min >= 0.0 && severity_min <= severity_max && severity_max <= 1.0)) {
    throw ConfigurationError("data severities must satisfy 0 <= min <= max <= 1");
  }
}

ModelConfig ExperimentConfig::effective_model() const { return apply_variant(model, variant); }

DatasetOptions ExperimentConfig::dataset_options(bool heldout) const {
  DatasetOptions o;
  o.count = heldout ? std::max<std::size_t>(1, data.heldout_count) : data.count;
  o.kinds = data.kinds;
  o.severity_min = data.severity_min;
  o.severity_max = data.severity_max;
  o.height = model.image_height;
  o.width = model.image_width;
  o.channels = model.channels;
  o.seed = heldout ? seed ^ kHeldoutSalt : seed;
  return o;
}

void ExperimentConfig::validate() const {
  try {
    effective_model().validate();
    sampler.validate();
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigurationError(e.what());
  }
  train.validate();
  data.validate();
}

ConfigFields model_fields(const ModelConfig& m) {
  return {
      {"model.dim", std::to_string(m.mim.model_dim)},
      {"model.blocks", std::to_string(m.mim.block_count)},
      {"model.sub_experts", std::to_string(m.mim.sub_expert_count)},
      {"model.top_k", std::to_string(m.mim.top_k)},
      {"model.window", std::to_string(m.mim.window)},
      {"model.heads", std::to_string(m.mim.heads)},
      {"model.se_reduction", std::to_string(m.mim.se_reduction)},
      {"model.mechanisms", join_mechanisms(m.mim.mechanisms)},
      {"model.inter", std::string(inter_routing_name(m.mim.inter))},
      {"model.intra", std::string(intra_routing_name(m.mim.intra))},
      {"model.residual", m.mim.residual ? "true" : "false"},
      {"model.balance_coefficient", format_double(m.mim.balance_coefficient)},
      {"model.image_height", std::to_string(m.image_height)},
      {"model.image_width", std::to_string(m.image_width)},
      {"model.channels", std::to_string(m.channels)},
      {"model.patch", std::to_string(m.patch)},
      {"model.text_tokens", std::to_string(m.text_tokens)},
      {"model.mlp_ratio", std::to_string(m.mlp_ratio)},
  };
}

ConfigFields experiment_fields(const ExperimentConfig& c) {
  ConfigFields f = model_fields(c.model);
  const ConfigFields rest{
      {"sampler.steps", std::to_string(c.sampler.steps)},
      {"train.learning_rate", format_double(c.train.learning_rate)},
      {"train.steps", std::to_string(c.train.steps)},
      {"train.batch_size", std::to_string(c.train.batch_size)},
      {"train.log_every", std::to_string(c.train.log_every)},
      {"train.beta1", format_double(c.train.beta1)},
      {"train.beta2", format_double(c.train.beta2)},
      {"train.epsilon", format_double(c.train.epsilon)},
      {"train.t_min", format_double(c.train.t_min)},
      {"train.t_max", format_double(c.train.t_max)},
      {"data.path", c.data.path},
      {"data.count", std::to_string(c.data.count)},
      {"data.heldout_count", std::to_string(c.data.heldout_count)},
      {"data.kinds", join_kinds(c.data.kinds)},
      {"data.severity_min", format_double(c.data.severity_min)},
      {"data.severity_max", format_double(c.data.severity_max)},
      {"experiment.seed", std::to_string(c.seed)},
      {"experiment.variant", std::string(variant_name(c.variant))},
  };
  f.insert(f.end(), rest.begin(), rest.end());
  return f;
}

std::string format_config(const ExperimentConfig& config) {
  return format_fields(experiment_fields(config));
}

ExperimentConfig parse_config(std::string_view text) {
  const FieldMap f = parse_fields(text, experiment_fields(ExperimentConfig{}));
  ExperimentConfig c;
  c.model = model_from_fields(f);
  c.sampler.steps = size_field(f, "sampler.steps");
  c.train.learning_rate = double_field(f, "train.learning_rate");
  c.train.steps = size_field(f, "train.steps");
  c.train.batch_size = size_field(f, "train.batch_size");
  c.train.log_every = size_field(f, "train.log_every");
  c.train.beta1 = double_field(f, "train.beta1");
  c.train.beta2 = double_field(f, "train.beta2");
  c.train.epsilon = double_field(f, "train.epsilon");
  c.train.t_min = double_field(f, "train.t_min");
  c.train.t_max = double_field(f, "train.t_max");
  c.data.path = field(f, "data.path");
  c.data.count = size_field(f, "data.count");
  c.data.heldout_count = size_field(f, "data.heldout_count");
  c.data.kinds = enum_field(f, "data.kinds", [](const std::string& s) {
    return parse_degradation_list(s);
  });
  c.data.severity_min = double_field(f, "data.severity_min");
  c.data.severity_max = double_field(f, "data.severity_max");
  c.seed = parse_u64(field(f, "experiment.seed"));
  c.variant = parse_variant(field(f, "experiment.variant"));
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError(path, "cannot open config");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

void save_config(const std::string& path, const ExperimentConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path, "cannot open for writing");
  out << format_config(config);
  if (!out) throw PersistenceError(path, "write failed");
}

std::string format_model_config(const ModelConfig& model) {
  return format_fields(model_fields(model));
}

ModelConfig parse_model_config(std::string_view text) {
  const FieldMap f = parse_fields(text, model_fields(ModelConfig{}));
  ModelConfig m = model_from_fields(f);
  try {
    m.validate();
  } catch (const ConfigurationError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigurationError(e.what());
  }
  return m;
}

std::vector<std::string> differing_fields(const ConfigFields& a, const ConfigFields& b) {
  const FieldMap mb = to_map(b);
  std::vector<std::string> out;
  for (const auto& [key, value] : a) {
    auto it = mb.find(key);
    if (it == mb.end() || it->second != value) out.push_back(key);
  }
  for (const auto& [key, value] : b) {
    if (std::none_of(a.begin(), a.end(), [&](const auto& kv) { return kv.first == key; })) {
      out.push_back(key);
    }
  }
  return out;
}

}  // namespace mimdit
