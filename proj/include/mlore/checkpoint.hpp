#pragma once

#include <set>
#include <string>
#include <vector>

#include "mlore/decoder.hpp"
#include "mlore/io.hpp"

namespace mlore {

inline constexpr const char* kCheckpointMagic = "MLORECK1";

/// Everything needed to rebuild a model before its tensors are loaded.
struct ModelHeader {
  ModelConfig config;
  DecoderKind kind = DecoderKind::mlore;
  std::size_t backbone_width = 32;
  std::size_t image_size = 64;
  std::size_t iterations = 0;  // training steps applied so far
};

/// Parameters and BatchNorm buffers as float32 planes named by ParamList.
template <typename T>
void save_checkpoint(MultiTaskModel<T>& model, std::size_t iterations, const std::string& path) {
  ParamList<T> p = model.parameters();
  Container c;
  c.meta = {{"format", "mlore-checkpoint"},
            {"version", 1},
            {"config", model.cfg.to_json()},
            {"decoder", decoder_kind_name(model.kind)},
            {"backbone_width", model.backbone_width},
            {"image_size", model.image_size},
            {"iterations", iterations}};
  std::set<std::string> names;
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    if (!names.insert(name).second) throw std::logic_error("duplicate tensor name " + name);
    std::vector<float> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<float>(t[i]);
    const Shape& s = t.shape();
    c.planes.push_back(make_float_plane(name, {s[0], s[1], s[2], s[3]}, v));
  };
  for (const auto& [name, v] : p.params) add(name, v.value());
  for (const auto& [name, t] : p.buffers) add(name, *t);
  write_container(path, kCheckpointMagic, c);
}

inline ModelHeader read_header(const Container& c, const std::string& path) {
  try {
    ModelHeader h;
    h.config = ModelConfig::from_json(c.meta.at("config"));
    h.kind = parse_decoder_kind(c.meta.at("decoder").get<std::string>());
    h.backbone_width = c.meta.at("backbone_width").get<std::size_t>();
    h.image_size = c.meta.at("image_size").get<std::size_t>();
    h.iterations = c.meta.at("iterations").get<std::size_t>();
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad checkpoint manifest: " + e.what());
  }
}

template <typename T>
struct LoadedModel {
  ModelHeader header;
  MultiTaskModel<T> model;
};

template <typename T>
LoadedModel<T> load_checkpoint(const std::string& path) {
  const Container c = read_container(path, kCheckpointMagic);
  LoadedModel<T> out{read_header(c, path), {}};
  const ModelHeader& h = out.header;
  out.model = MultiTaskModel<T>(h.config, h.kind, h.backbone_width, h.image_size);
  ParamList<T> p = out.model.parameters();
  auto load = [&](const std::string& name, Tensor<T>& t) {
    const Plane& pl = c.plane(name);
    const Shape& s = t.shape();
    if (pl.shape != std::vector<std::size_t>{s[0], s[1], s[2], s[3]}) {
      throw ContractError(path + ": tensor " + name + " has shape " + nlohmann::json(pl.shape).dump() +
                          ", model expects " + to_string(s));
    }
    const std::vector<float> v = float_values(pl);
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
  };
  for (auto& [name, v] : p.params) load(name, v.mutable_value());
  for (auto& [name, t] : p.buffers) load(name, *t);
  if (c.planes.size() != p.params.size() + p.buffers.size()) {
    throw ContractError(path + ": checkpoint holds tensors the model does not have");
  }
  return out;
}

}  // namespace mlore
