#include "threemt/modality.hpp"

#include <set>

#include "threemt/errors.hpp"

namespace threemt {

std::string to_string(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::Categorical:
      return "categorical";
    case ModalityKind::Ordinal:
      return "ordinal";
    case ModalityKind::Image:
      return "image";
  }
  return "unknown";
}

ModalityKind modality_kind_from_string(const std::string& text) {
  if (text == "categorical") return ModalityKind::Categorical;
  if (text == "ordinal") return ModalityKind::Ordinal;
  if (text == "image") return ModalityKind::Image;
  throw ConfigError("unknown modality kind '" + text + "' (accepted: categorical, ordinal, image)");
}

ModalitySpec ModalitySpec::categorical(std::string name, std::size_t vocab_size, double p_mdrop) {
  ModalitySpec s;
  s.name = std::move(name);
  s.kind = ModalityKind::Categorical;
  s.vocab_size = vocab_size;
  s.p_mdrop = p_mdrop;
  return s;
}

ModalitySpec ModalitySpec::ordinal(std::string name, double p_mdrop) {
  ModalitySpec s;
  s.name = std::move(name);
  s.kind = ModalityKind::Ordinal;
  s.p_mdrop = p_mdrop;
  return s;
}

ModalitySpec ModalitySpec::image(std::string name, std::array<std::size_t, 3> shape, double p_mdrop) {
  ModalitySpec s;
  s.name = std::move(name);
  s.kind = ModalityKind::Image;
  s.volume_shape = shape;
  s.p_mdrop = p_mdrop;
  return s;
}

void validate_specs(const std::vector<ModalitySpec>& specs) {
  if (specs.empty()) throw ConfigError("a model needs at least one modality");
  std::set<std::string> seen;
  for (const ModalitySpec& s : specs) {
    if (s.name.empty()) throw ConfigError("modality names must be non-empty");
    if (!seen.insert(s.name).second) throw ConfigError("duplicate modality name '" + s.name + "'");
    if (!(s.p_mdrop >= 0.0 && s.p_mdrop <= 1.0)) {
      throw ConfigError("p_mdrop for '" + s.name + "' must lie in [0, 1]");
    }
    if (s.kind == ModalityKind::Categorical && s.vocab_size == 0) {
      throw ConfigError("categorical modality '" + s.name + "' needs vocab_size >= 1");
    }
  }
}

}  // namespace threemt
