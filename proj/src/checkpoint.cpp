#include "threemt/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "byteio.hpp"
#include "threemt/errors.hpp"

namespace threemt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json metadata(const ThreeMTModel<float>& model) {
  const ModelConfig& c = model.config();
  json meta;
  meta["d"] = c.d;
  meta["heads"] = c.heads;
  meta["scale_full_dim"] = c.scale_full_dim;
  meta["seed"] = c.seed;
  meta["image"] = {{"stem_channels", c.image.stem_channels},
                   {"block_channels", c.image.block_channels},
                   {"encoder_layers", c.image.encoder_layers},
                   {"encoder_heads", c.image.encoder_heads},
                   {"norm", to_string(c.image.norm)}};
  json mods = json::array();
  for (std::size_t m = 0; m < model.specs().size(); ++m) {
    const ModalitySpec& s = model.specs()[m];
    json j{{"name", s.name}, {"kind", to_string(s.kind)}, {"p_mdrop", s.p_mdrop}};
    if (s.kind == ModalityKind::Categorical) j["vocab_size"] = s.vocab_size;
    if (s.kind == ModalityKind::Image) j["volume_shape"] = s.volume_shape;
    if (const auto* ord = std::get_if<OrdinalEmbedder<float>>(&model.embedder(m)); ord && ord->fitted()) {
      j["mean"] = ord->mean();
      j["std"] = ord->std();
    }
    mods.push_back(std::move(j));
  }
  meta["modalities"] = std::move(mods);
  return meta;
}

ThreeMTModel<float> model_from_metadata(const json& meta) {
  ModelConfig c;
  c.d = meta.at("d").get<std::size_t>();
  c.heads = meta.at("heads").get<std::size_t>();
  c.scale_full_dim = meta.at("scale_full_dim").get<bool>();
  c.seed = meta.at("seed").get<std::uint64_t>();
  const json& img = meta.at("image");
  c.image.stem_channels = img.at("stem_channels").get<std::size_t>();
  c.image.block_channels = img.at("block_channels").get<std::array<std::size_t, 4>>();
  c.image.encoder_layers = img.at("encoder_layers").get<std::size_t>();
  c.image.encoder_heads = img.at("encoder_heads").get<std::size_t>();
  c.image.norm = volume_norm_from_string(img.at("norm").get<std::string>());
  std::vector<ModalitySpec> specs;
  for (const json& j : meta.at("modalities")) {
    ModalitySpec s;
    s.name = j.at("name").get<std::string>();
    s.kind = modality_kind_from_string(j.at("kind").get<std::string>());
    s.p_mdrop = j.at("p_mdrop").get<double>();
    if (s.kind == ModalityKind::Categorical) s.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (s.kind == ModalityKind::Image) s.volume_shape = j.at("volume_shape").get<std::array<std::size_t, 3>>();
    specs.push_back(std::move(s));
  }
  ThreeMTModel<float> model(specs, c);
  const json& mods = meta.at("modalities");
  for (std::size_t m = 0; m < specs.size(); ++m) {
    auto* ord = std::get_if<OrdinalEmbedder<float>>(&model.embedder(m));
    if (ord && mods[m].contains("mean")) ord->set_normalization(mods[m].at("mean").get<double>(), mods[m].at("std").get<double>());
  }
  return model;
}

}  // namespace

void save_checkpoint(const fs::path& path, const ThreeMTModel<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string meta = metadata(model).dump();
  os.write("3MT1", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (const Parameter<float>* p : model.parameters()) {
    detail::put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p->value.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

ThreeMTModel<float> load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError(path.string() + ": truncated checkpoint");
  };
  auto u32 = [&] {
    need(4);
    const std::uint32_t v = detail::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  auto str = [&](std::size_t n) {
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  };
  if (bytes.size() < 4 || str(4) != "3MT1") throw FormatError(path.string() + ": not a checkpoint (magic 3MT1 expected)");
  if (const std::uint32_t v = u32(); v != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  }
  ThreeMTModel<float> model;
  try {
    model = model_from_metadata(json::parse(str(u32())));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": bad checkpoint metadata: " + e.what());
  }

  std::map<std::string, Parameter<float>*> by_name;
  for (Parameter<float>* p : model.parameters()) by_name[p->name] = p;
  std::map<std::string, bool> seen;
  while (pos < bytes.size()) {
    const std::string name = str(u32());
    const std::uint32_t rank = u32();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32());
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": unexpected parameter '" + name + "'");
    if (seen[name]) throw FormatError(path.string() + ": duplicate parameter '" + name + "'");
    seen[name] = true;
    Parameter<float>& p = *it->second;
    if (shape != p.value.shape()) {
      throw FormatError(path.string() + ": parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(p.value.shape()));
    }
    need(4 * p.value.numel());
    for (float& v : p.value.storage()) v = std::bit_cast<float>(u32());
  }
  for (const auto& [name, p] : by_name) {
    if (!seen[name]) throw FormatError(path.string() + ": missing parameter '" + name + "'");
  }
  return model;
}

}  // namespace threemt
