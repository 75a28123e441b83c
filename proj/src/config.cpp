#include "threemt/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "threemt/errors.hpp"

namespace threemt {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& item : split(v, ',')) out.push_back(to_double(key, item));
  return out;
}

std::array<std::size_t, 3> to_shape(const std::string& key, const std::string& v) {
  std::vector<std::string> parts = split(v, 'x');
  if (parts.size() == 1) parts = split(v, ',');
  if (parts.size() != 3) throw ConfigError(key + ": expected DxHxW, got '" + v + "'");
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) out[a] = to_uint(key, parts[a]);
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_uint(k, v); }},
      {"output_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      {"model.d", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d = to_uint(k, v); }},
      {"model.heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.heads = to_uint(k, v); }},
      {"model.scale_full_dim",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.scale_full_dim = to_bool(k, v); }},
      {"image.stem_channels",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image.stem_channels = to_uint(k, v); }},
      {"image.block_channels",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const std::vector<std::string> parts = split(v, ',');
         if (parts.size() != 4) throw ConfigError(k + ": expected 4 comma-separated widths");
         for (int i = 0; i < 4; ++i) c.model.image.block_channels[i] = to_uint(k, parts[i]);
       }},
      {"image.encoder_layers",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image.encoder_layers = to_uint(k, v); }},
      {"image.encoder_heads",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image.encoder_heads = to_uint(k, v); }},
      {"image.norm",
       [](RunConfig& c, const std::string&, const std::string& v) { c.model.image.norm = volume_norm_from_string(v); }},
      {"train.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.epochs = to_uint(k, v); }},
      {"train.batch_size",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = to_uint(k, v); }},
      {"train.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam.lr = to_double(k, v); }},
      {"train.beta1", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam.beta1 = to_double(k, v); }},
      {"train.beta2", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam.beta2 = to_double(k, v); }},
      {"train.eps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam.eps = to_double(k, v); }},
      {"train.aux_loss_weight",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.aux_loss_weight = to_double(k, v); }},
      {"train.noise_sigma",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.noise_sigma = to_double(k, v); }},
      {"train.flip_axis", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.flip_axis = to_uint(k, v); }},
      {"train.flip_prob", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.flip_prob = to_double(k, v); }},
      {"p_mdrop", [](RunConfig& c, const std::string& k, const std::string& v) { c.p_mdrop = to_double(k, v); }},
      {"split.train", [](RunConfig& c, const std::string& k, const std::string& v) { c.split.train = to_double(k, v); }},
      {"split.val", [](RunConfig& c, const std::string& k, const std::string& v) { c.split.val = to_double(k, v); }},
      {"split.test", [](RunConfig& c, const std::string& k, const std::string& v) { c.split.test = to_double(k, v); }},
      {"split.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.split.seed = to_uint(k, v); }},
      {"data.source",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "synthetic") {
           c.data.kind = DataSource::Kind::Synthetic;
         } else if (v == "csv") {
           c.data.kind = DataSource::Kind::Csv;
         } else {
           throw ConfigError(k + ": expected synthetic or csv, got '" + v + "'");
         }
       }},
      {"data.csv", [](RunConfig& c, const std::string&, const std::string& v) { c.data.csv = v; }},
      {"data.features",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         std::erase_if(c.data.schema, [](const ModalitySpec& s) { return s.kind != ModalityKind::Image; });
         for (const std::string& item : split(v, ',')) {
           const std::vector<std::string> parts = split(item, ':');
           const ModalityKind kind = parts.size() >= 2 ? modality_kind_from_string(parts[1]) : ModalityKind::Image;
           if (parts.size() == 2 && kind == ModalityKind::Ordinal) {
             c.data.schema.push_back(ModalitySpec::ordinal(parts[0]));
           } else if (parts.size() == 3 && kind == ModalityKind::Categorical) {
             c.data.schema.push_back(ModalitySpec::categorical(parts[0], to_uint(k, parts[2])));
           } else {
             throw ConfigError(k + ": expected name:ordinal or name:categorical:<vocab>, got '" + item + "'");
           }
         }
       }},
      {"data.image",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         std::erase_if(c.data.schema, [](const ModalitySpec& s) { return s.kind == ModalityKind::Image; });
         const std::vector<std::string> parts = split(v, ':');
         if (parts.size() != 2) throw ConfigError(k + ": expected name:DxHxW, got '" + v + "'");
         c.data.schema.insert(c.data.schema.begin(), ModalitySpec::image(parts[0], to_shape(k, parts[1])));
       }},
      {"synthetic.n_samples",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.n_samples = to_uint(k, v); }},
      {"synthetic.n_ordinal",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.n_ordinal = to_uint(k, v); }},
      {"synthetic.n_categorical",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.n_categorical = to_uint(k, v); }},
      {"synthetic.with_volume",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.with_volume = to_bool(k, v); }},
      {"synthetic.volume_shape",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.volume_shape = to_shape(k, v); }},
      {"synthetic.ordinal_separation",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.ordinal_separation = to_doubles(k, v); }},
      {"synthetic.categorical_separation",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.synthetic.categorical_separation = to_doubles(k, v);
       }},
      {"synthetic.volume_separation",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.volume_separation = to_double(k, v); }},
      {"synthetic.ordinal_missing",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.ordinal_missing = to_doubles(k, v); }},
      {"synthetic.categorical_missing",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.categorical_missing = to_doubles(k, v); }},
      {"synthetic.volume_missing",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.volume_missing = to_double(k, v); }},
      {"synthetic.records_per_patient",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.synthetic.records_per_patient = to_uint(k, v);
       }},
      {"synthetic.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.seed = to_uint(k, v); }},
  };
  return table;
}

std::string join_keys() {
  std::string out;
  for (const std::string& k : accepted_config_keys()) out += (out.empty() ? "" : ", ") + k;
  return out;
}

}  // namespace

std::vector<std::string> accepted_config_keys() {
  std::vector<std::string> keys{"preset"};
  for (const auto& [k, _] : setters()) keys.push_back(k);
  keys.push_back("p_mdrop.<modality>");
  return keys;
}

std::vector<std::string> preset_names() { return {"informative", "separable"}; }

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  SyntheticTaskConfig& s = c.data.synthetic;
  if (name == "separable") {
    s.n_samples = 1500;
    s.n_ordinal = 2;
    s.n_categorical = 1;
    s.ordinal_separation = {3.0};
    s.categorical_separation = {0.9};
    s.volume_separation = 3.0;
    c.split = {0.6, 0.2, 0.2, 0};
    c.train.epochs = 20;
  } else if (name == "informative") {
    s.n_samples = 800;
    s.n_ordinal = 4;
    s.n_categorical = 1;
    // A dominant volume next to weak clinical features: the regime where a
    // model trained without dropout can lean on the volume alone.
    s.ordinal_separation = {0.3};
    s.categorical_separation = {0.3};
    s.volume_separation = 3.0;
    c.split = {0.625, 0.125, 0.25, 0};
    c.train.epochs = 20;
  } else {
    std::string names;
    for (const std::string& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + std::string(name) + "' (accepted: " + names + ")");
  }
  return c;
}

RunConfig parse_run_config_text(std::string_view text, const fs::path& base_dir) {
  struct Line {
    std::size_t number;
    std::string key, value;
  };
  std::vector<Line> lines;
  std::set<std::string> seen;
  std::string preset;
  std::istringstream in{std::string(text)};
  std::string raw;
  for (std::size_t number = 1; std::getline(in, raw); ++number) {
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
    }
    Line l{number, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (!seen.insert(l.key).second) {
      throw ConfigError("config line " + std::to_string(number) + ": duplicate key '" + l.key + "'");
    }
    if (l.key == "preset") {
      preset = l.value;
    } else {
      lines.push_back(std::move(l));
    }
  }

  RunConfig c = preset.empty() ? RunConfig{} : preset_config(preset);
  for (const Line& l : lines) {
    try {
      if (l.key.rfind("p_mdrop.", 0) == 0 && l.key.size() > 8) {
        c.p_mdrop_overrides[l.key.substr(8)] = to_double(l.key, l.value);
        continue;
      }
      auto it = setters().find(l.key);
      if (it == setters().end()) throw ConfigError("unknown key '" + l.key + "' (accepted: " + join_keys() + ")");
      it->second(c, l.key, l.value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(l.number) + ": " + e.what());
    }
  }

  if (!seen.count("split.seed")) c.split.seed = c.seed;
  if (!seen.count("synthetic.seed")) c.data.synthetic.seed = c.seed;
  c.model.seed = c.seed;
  c.train.seed = c.seed;
  if (c.data.kind == DataSource::Kind::Csv) {
    if (c.data.csv.empty()) throw ConfigError("data.source = csv needs data.csv");
    if (c.data.schema.empty()) throw ConfigError("data.source = csv needs data.features and/or data.image");
    if (c.data.csv.is_relative()) c.data.csv = base_dir / c.data.csv;
  }
  if (!(c.p_mdrop >= 0.0 && c.p_mdrop <= 1.0)) throw ConfigError("p_mdrop must lie in [0, 1]");
  validate(c.train);
  return c;
}

RunConfig parse_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig c = parse_run_config_text(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) c.output_dir = env;
  return c;
}

std::vector<ModalitySpec> resolve_specs(const RunConfig& config) {
  std::vector<ModalitySpec> specs =
      config.data.kind == DataSource::Kind::Synthetic ? synthetic_schema(config.data.synthetic) : config.data.schema;
  for (ModalitySpec& s : specs) s.p_mdrop = config.p_mdrop;
  for (const auto& [name, p] : config.p_mdrop_overrides) {
    auto it = std::find_if(specs.begin(), specs.end(), [&](const ModalitySpec& s) { return s.name == name; });
    if (it == specs.end()) {
      std::string names;
      for (const ModalitySpec& s : specs) names += (names.empty() ? "" : ", ") + s.name;
      throw ConfigError("p_mdrop." + name + ": no such modality (schema: " + names + ")");
    }
    it->p_mdrop = p;
  }
  validate_specs(specs);
  return specs;
}

Dataset load_run_dataset(const RunConfig& config) {
  const std::vector<ModalitySpec> specs = resolve_specs(config);
  Dataset data = config.data.kind == DataSource::Kind::Synthetic ? generate_synthetic(config.data.synthetic).dataset
                                                                 : load_dataset(config.data.csv, specs);
  data.schema = specs;
  return data;
}

}  // namespace threemt
