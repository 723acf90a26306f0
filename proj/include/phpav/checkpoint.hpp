#ifndef PHPAV_CHECKPOINT_HPP
#define PHPAV_CHECKPOINT_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "phpav/array_io.hpp"
#include "phpav/engine.hpp"

// Stage checkpoints: a directory holding one JSON manifest plus one binary
// file per named array (little-endian float32 payloads). The manifest records
// the full engine configuration, the task order and stage, registered tasks,
// the frozen-backbone fingerprint, and a digest per array so corruption is
// detected on load and named. Writes go to "<dir>.tmp" and are renamed into
// place, so an interrupted save never leaves a half-written checkpoint under
// the final name.

namespace phpav {

inline constexpr long kCheckpointFormatVersion = 1;

namespace detail {

inline std::string array_file_name(const std::string& name) {
  std::string flat = name;
  size_t pos = 0;
  while ((pos = flat.find('/', pos)) != std::string::npos) {
    flat.replace(pos, 1, "__");
    pos += 2;
  }
  return flat + ".bin";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& dir, PhpModel<T>& model, Adam<T>* opt,
                     const std::vector<std::string>& order, long stage) {
  namespace fs = std::filesystem;
  fs::path final_dir(dir);
  if (final_dir.has_parent_path() && !fs::exists(final_dir.parent_path()))
    throw io_error("checkpoint parent directory does not exist: " +
                   final_dir.parent_path().string());
  fs::path tmp = final_dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  ParamRegistry<T> reg = model.full_registry();
  nlohmann::json params = nlohmann::json::object();
  for (auto& [name, t] : reg.entries) {
    std::string file = detail::array_file_name(name);
    write_array(tmp / file, *t);
    params[name] = {{"file", file}, {"digest", array_digest(*t)}, {"shape", t->shape}};
  }

  nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                          {"config", engine_config_to_json(model.cfg)},
                          {"order", order},
                          {"stage", stage},
                          {"task", order.at(static_cast<size_t>(stage))},
                          {"registered", model.registered},
                          {"backbone_fingerprint", model.encoder.fingerprint()},
                          {"component_fingerprint", model.component_fingerprint()},
                          {"params", params}};

  if (opt) {
    nlohmann::json moments = nlohmann::json::object();
    for (auto& [name, mv] : opt->state()) {
      std::string base = detail::array_file_name(name);
      base.resize(base.size() - 4);  // strip .bin
      std::string mf = base + ".adam_m.bin", vf = base + ".adam_v.bin";
      write_array(tmp / mf, mv.first);
      write_array(tmp / vf, mv.second);
      moments[name] = {{"m_file", mf},
                       {"v_file", vf},
                       {"m_digest", array_digest(mv.first)},
                       {"v_digest", array_digest(mv.second)}};
    }
    manifest["optimizer"] = {{"timestep", opt->timestep()}, {"moments", moments}};
  }

  write_json(tmp / "manifest.json", manifest);
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

inline nlohmann::json read_checkpoint_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path p = fs::path(dir) / "manifest.json";
  if (!fs::exists(p)) throw io_error("checkpoint manifest missing: " + p.string());
  nlohmann::json m = read_json(p);
  for (const char* key :
       {"format_version", "config", "order", "stage", "task", "registered",
        "backbone_fingerprint", "params"})
    if (!m.contains(key)) throw io_error(std::string("checkpoint manifest missing field: ") + key);
  if (m.at("format_version").get<long>() != kCheckpointFormatVersion)
    throw io_error("unsupported checkpoint format version: " +
                   m.at("format_version").dump());
  return m;
}

// Restore every named array listed in the manifest into the registry,
// verifying file shape and digest; errors name the offending array.
template <typename T>
void restore_arrays(const std::string& dir, const nlohmann::json& manifest,
                    ParamRegistry<T>& reg) {
  namespace fs = std::filesystem;
  const auto& params = manifest.at("params");
  std::map<std::string, Tensor<T>*> live;
  for (auto& [name, t] : reg.entries) live[name] = t;
  for (const auto& [name, t] : live)
    if (!params.contains(name)) throw io_error("checkpoint is missing array: " + name);
  for (auto it = params.begin(); it != params.end(); ++it) {
    auto lt = live.find(it.key());
    if (lt == live.end()) throw io_error("checkpoint has unexpected array: " + it.key());
    fs::path file = fs::path(dir) / it.value().at("file").get<std::string>();
    Tensor<T> loaded;
    try {
      loaded = read_array<T>(file);
    } catch (const io_error& e) {
      throw io_error("checkpoint array unreadable: " + it.key() + " (" + e.what() + ")");
    }
    if (loaded.shape != lt->second->shape)
      throw io_error("checkpoint array shape mismatch: " + it.key() + " (file " +
                     loaded.shape_str() + ", model " + lt->second->shape_str() + ")");
    if (array_digest(loaded) != it.value().at("digest").get<std::string>())
      throw io_error("checkpoint array corrupt (digest mismatch): " + it.key());
    *lt->second = std::move(loaded);
  }
}

// Rebuild a model exactly as checkpointed: same config, same registration
// order, arrays restored bit-exactly.
template <typename T>
PhpModel<T> load_model_checkpoint(const std::string& dir) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  EngineConfig cfg = engine_config_from_json(manifest.at("config"));
  PhpModel<T> model = PhpModel<T>::create(cfg);
  for (const auto& id : manifest.at("registered"))
    model.register_task(id.get<std::string>());
  ParamRegistry<T> reg = model.full_registry();
  restore_arrays(dir, manifest, reg);
  if (model.encoder.fingerprint() !=
      manifest.at("backbone_fingerprint").get<std::string>())
    throw io_error("checkpoint backbone fingerprint does not match rebuilt encoder");
  return model;
}

template <typename T>
Adam<T> load_optimizer_checkpoint(const std::string& dir, const AdamConfig& cfg) {
  namespace fs = std::filesystem;
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  if (!manifest.contains("optimizer"))
    throw io_error("checkpoint has no optimizer state: " + dir);
  const auto& o = manifest.at("optimizer");
  Adam<T> opt(cfg);
  opt.set_timestep(o.at("timestep").get<long>());
  for (auto it = o.at("moments").begin(); it != o.at("moments").end(); ++it) {
    Tensor<T> m = read_array<T>(fs::path(dir) / it.value().at("m_file").get<std::string>());
    Tensor<T> v = read_array<T>(fs::path(dir) / it.value().at("v_file").get<std::string>());
    if (array_digest(m) != it.value().at("m_digest").get<std::string>() ||
        array_digest(v) != it.value().at("v_digest").get<std::string>())
      throw io_error("checkpoint optimizer moment corrupt: " + it.key());
    opt.state()[it.key()] = {std::move(m), std::move(v)};
  }
  return opt;
}

template <typename T>
void Engine<T>::save_stage_checkpoint(const std::string& dir, Adam<T>& opt,
                                      const std::vector<std::string>& order, long stage) {
  save_checkpoint(dir, model_, &opt, order, stage);
}

template <typename T>
void Engine<T>::restore(const std::string& dir) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  if (manifest.at("config") != engine_config_to_json(cfg_))
    throw validation_error("checkpoint config does not match engine config");
  model_ = load_model_checkpoint<T>(dir);
}

}  // namespace phpav

#endif
