#ifndef PHPAV_ENGINE_HPP
#define PHPAV_ENGINE_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "phpav/array_io.hpp"
#include "phpav/encoder.hpp"
#include "phpav/heads.hpp"
#include "phpav/optim.hpp"
#include "phpav/synthetic.hpp"
#include "phpav/tma.hpp"
#include "phpav/tmdg.hpp"
#include "phpav/tmi.hpp"

// Incremental-learning engine: trains the three adapter components over a
// task order against the frozen dual encoder, with the freezing policy
//   stage t trains exactly { gating adapter (task-shared), task t's prompt
//   pool + generator, task t's deep prompts, task t's heads, the two global
//   log-temperatures }
// and evaluates every seen task with its own components after each stage.
//
// Placement assigns each component to one encoder depth band (bijective).
// Prompt-injecting components refresh their rows at every layer of their own
// band (drop last injection, re-inject) and their final injection persists
// into deeper bands, so a later band sees base rows + all earlier-band
// prompt rows. The gating adapter rescales tokens without changing counts.

namespace phpav {

// ----- configuration -----

struct PlacementConfig {
  Band tma = Band::shallow;   // gating adapter
  Band tmdg = Band::middle;   // generated prompt adapter
  Band tmi = Band::deep;      // fixed per-layer deep prompts

  void validate() const {
    if (tma == tmdg || tma == tmi || tmdg == tmi)
      throw validation_error("placement must assign the three components to distinct bands");
  }

  // "S-M-D" = bands of (gating, generated-prompt, fixed-prompt) in that order.
  static PlacementConfig parse(const std::string& s) {
    if (s.size() != 5 || s[1] != '-' || s[3] != '-')
      throw validation_error("placement must look like S-M-D, got: " + s);
    auto b = [&](char c) {
      switch (c) {
        case 'S': return Band::shallow;
        case 'M': return Band::middle;
        case 'D': return Band::deep;
      }
      throw validation_error(std::string("unknown band letter: ") + c);
    };
    PlacementConfig p{b(s[0]), b(s[2]), b(s[4])};
    p.validate();
    return p;
  }

  std::string str() const {
    auto c = [](Band b) {
      switch (b) {
        case Band::shallow: return 'S';
        case Band::middle: return 'M';
        case Band::deep: return 'D';
      }
      return '?';
    };
    return std::string{c(tma), '-', c(tmdg), '-', c(tmi)};
  }
};

struct ComponentMask {
  bool tma = true, tmdg = true, tmi = true;

  // "tma,tmdg,tmi" in any order; "all" or "" = everything; "none" = nothing.
  static ComponentMask parse(const std::string& s) {
    ComponentMask m{false, false, false};
    if (s.empty() || s == "all") return ComponentMask{};
    if (s == "none") return m;
    size_t pos = 0;
    while (pos <= s.size()) {
      size_t comma = s.find(',', pos);
      std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (tok == "tma") m.tma = true;
      else if (tok == "tmdg") m.tmdg = true;
      else if (tok == "tmi") m.tmi = true;
      else throw validation_error("unknown component: " + tok);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return m;
  }

  std::string str() const {
    std::string s;
    if (tma) s += "tma";
    if (tmdg) s += std::string(s.empty() ? "" : ",") + "tmdg";
    if (tmi) s += std::string(s.empty() ? "" : ",") + "tmi";
    return s.empty() ? "none" : s;
  }
};

struct TrainConfig {
  long batch_size = 3;
  long epochs_per_task = 10;
  double lr = 3e-4;
  double weight_decay = 2e-4;
  uint64_t seed = 7;

  void validate() const {
    if (batch_size < 1 || epochs_per_task < 1) throw validation_error("train: counts must be positive");
    if (lr <= 0 || weight_decay < 0) throw validation_error("train: bad lr/weight_decay");
  }
};

struct ComponentSizes {
  long tmdg_pool = 10;  // pool rows L
  long tmdg_n = 4;      // generated prompt rows per injection
  long tmi_m = 4;       // fixed prompt rows per layer

  void validate() const {
    if (tmdg_pool < 1 || tmdg_n < 1 || tmi_m < 1)
      throw validation_error("component sizes must be positive");
    if (tmdg_pool < tmdg_n)
      std::fprintf(stderr,
                   "warning: prompt pool (%ld) smaller than generated rows (%ld); "
                   "generated prompts will be heavily correlated\n",
                   tmdg_pool, tmdg_n);
  }
};

struct EngineConfig {
  EncoderConfig encoder;
  std::vector<TaskSpec> tasks;
  TrainConfig train;
  PlacementConfig placement;
  ComponentMask components;
  ComponentSizes sizes;

  const TaskSpec& task(const std::string& id) const {
    for (const auto& t : tasks)
      if (t.task_id == id) return t;
    throw validation_error("unknown task: " + id);
  }

  void validate() const {
    encoder.validate();
    train.validate();
    placement.validate();
    sizes.validate();
    if (tasks.empty()) throw validation_error("config declares no tasks");
    std::set<std::string> ids;
    for (const auto& t : tasks) {
      t.validate();
      if (!ids.insert(t.task_id).second) throw validation_error("duplicate task id: " + t.task_id);
      if (t.base_channels != encoder.video_channels || t.base_channels != encoder.audio_channels)
        throw validation_error("task " + t.task_id + " channel count does not match encoder");
      if (t.video_tokens() != tasks[0].video_tokens() || t.audio_tokens() != tasks[0].audio_tokens())
        throw validation_error("all tasks must share token geometry (gating adapter dims)");
      if (encoder.embed_dim < t.num_classes)
        throw validation_error("embed_dim must be >= num_classes for class text embeddings");
    }
    auto band_layers = [&](Band b) {
      switch (b) {
        case Band::shallow: return encoder.shallow_layers;
        case Band::middle: return encoder.middle_layers;
        case Band::deep: return encoder.deep_layers;
      }
      return 0L;
    };
    if (components.tma && band_layers(placement.tma) < 1)
      throw validation_error("gating adapter placed in an empty band");
    if (components.tmdg && band_layers(placement.tmdg) < 1)
      throw validation_error("generated-prompt adapter placed in an empty band");
    if (components.tmi && band_layers(placement.tmi) < 1)
      throw validation_error("fixed prompts placed in an empty band");
  }
};

// ----- config (de)serialization, reused by checkpoints and the CLI -----

inline nlohmann::json engine_config_to_json(const EngineConfig& c) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : c.tasks) tasks.push_back(detail::spec_to_json(t));
  return nlohmann::json{
      {"encoder",
       {{"embed_dim", c.encoder.embed_dim},
        {"shallow_layers", c.encoder.shallow_layers},
        {"middle_layers", c.encoder.middle_layers},
        {"deep_layers", c.encoder.deep_layers},
        {"video_channels", c.encoder.video_channels},
        {"audio_channels", c.encoder.audio_channels},
        {"seed", c.encoder.seed}}},
      {"tasks", tasks},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"epochs_per_task", c.train.epochs_per_task},
        {"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"seed", c.train.seed}}},
      {"placement", c.placement.str()},
      {"components", c.components.str()},
      {"sizes",
       {{"tmdg_pool", c.sizes.tmdg_pool}, {"tmdg_n", c.sizes.tmdg_n}, {"tmi_m", c.sizes.tmi_m}}}};
}

inline EngineConfig engine_config_from_json(const nlohmann::json& j) {
  EngineConfig c;
  const auto& e = j.at("encoder");
  c.encoder.embed_dim = e.at("embed_dim").get<long>();
  c.encoder.shallow_layers = e.at("shallow_layers").get<long>();
  c.encoder.middle_layers = e.at("middle_layers").get<long>();
  c.encoder.deep_layers = e.at("deep_layers").get<long>();
  c.encoder.video_channels = e.at("video_channels").get<long>();
  c.encoder.audio_channels = e.at("audio_channels").get<long>();
  c.encoder.seed = e.at("seed").get<uint64_t>();
  c.tasks.clear();
  for (const auto& t : j.at("tasks")) c.tasks.push_back(detail::spec_from_json(t));
  const auto& tr = j.at("train");
  c.train.batch_size = tr.at("batch_size").get<long>();
  c.train.epochs_per_task = tr.at("epochs_per_task").get<long>();
  c.train.lr = tr.at("lr").get<double>();
  c.train.weight_decay = tr.at("weight_decay").get<double>();
  c.train.seed = tr.at("seed").get<uint64_t>();
  c.placement = PlacementConfig::parse(j.at("placement").get<std::string>());
  c.components = ComponentMask::parse(j.at("components").get<std::string>());
  const auto& s = j.at("sizes");
  c.sizes.tmdg_pool = s.at("tmdg_pool").get<long>();
  c.sizes.tmdg_n = s.at("tmdg_n").get<long>();
  c.sizes.tmi_m = s.at("tmi_m").get<long>();
  return c;
}

// The pinned default desk-scale suite: three synthetic tasks mirroring the
// three benchmark flavors (temporal single-label, multi-label, composite QA).
inline std::vector<TaskSpec> default_tasks() {
  TaskSpec ave;
  ave.task_id = "AVE";
  ave.flavor = TaskFlavor::single_label_temporal;
  ave.num_classes = 4;
  ave.seed = 101;
  TaskSpec avvp;
  avvp.task_id = "AVVP";
  avvp.flavor = TaskFlavor::multi_label;
  avvp.num_classes = 4;
  avvp.seed = 202;
  TaskSpec avqa;
  avqa.task_id = "AVQA";
  avqa.flavor = TaskFlavor::qa_style;
  avqa.num_classes = 6;
  avqa.seed = 303;
  return {ave, avvp, avqa};
}

inline EngineConfig default_engine_config() {
  EngineConfig c;
  c.tasks = default_tasks();
  return c;
}

// ----- model state -----

namespace detail {

inline int band_index(Band b) {
  switch (b) {
    case Band::shallow: return 0;
    case Band::middle: return 1;
    case Band::deep: return 2;
  }
  return -1;
}

inline long band_start(const EncoderConfig& e, Band b) {
  switch (b) {
    case Band::shallow: return 0;
    case Band::middle: return e.shallow_layers;
    case Band::deep: return e.shallow_layers + e.middle_layers;
  }
  return 0;
}

inline long band_layer_count(const EncoderConfig& e, Band b) {
  switch (b) {
    case Band::shallow: return e.shallow_layers;
    case Band::middle: return e.middle_layers;
    case Band::deep: return e.deep_layers;
  }
  return 0;
}

// prompt rows injected by enabled components placed at bands strictly before b
inline long prompt_rows_before(const PlacementConfig& p, const ComponentMask& m,
                               const ComponentSizes& s, Band b) {
  long rows = 0;
  if (m.tmdg && band_index(p.tmdg) < band_index(b)) rows += s.tmdg_n;
  if (m.tmi && band_index(p.tmi) < band_index(b)) rows += s.tmi_m;
  return rows;
}

}  // namespace detail

template <typename T>
struct PhpModel {
  EngineConfig cfg;
  FrozenDualEncoder<T> encoder;
  TmaParams<T> tma;
  TmdgAttn<T> tmdg_attn;
  std::map<std::string, TmdgTask<T>> tmdg_tasks;
  TmiBank<T> tmi;
  std::map<std::string, HeadParams<T>> heads;
  Tensor<T> log_tau_v, log_tau_a;
  std::vector<std::string> registered;  // task registration order

  static PhpModel create(const EngineConfig& cfg) {
    cfg.validate();
    PhpModel m;
    m.cfg = cfg;
    m.encoder = FrozenDualEncoder<T>::create(cfg.encoder);
    const long D = cfg.encoder.embed_dim;
    TmaDims dims;
    dims.c_v = dims.c_a = D;
    dims.d_rnn = D;  // recurrent hidden size pinned to the channel width
    dims.rows_v = cfg.tasks[0].video_tokens() +
                  detail::prompt_rows_before(cfg.placement, cfg.components, cfg.sizes, cfg.placement.tma);
    dims.rows_a = cfg.tasks[0].audio_tokens() +
                  detail::prompt_rows_before(cfg.placement, cfg.components, cfg.sizes, cfg.placement.tma);
    m.tma = TmaParams<T>::init(dims, cfg.encoder.seed);
    m.tmdg_attn = TmdgAttn<T>::init(D, cfg.encoder.seed);
    if (cfg.components.tmi)
      m.tmi.configure(cfg.sizes.tmi_m, D, detail::band_layer_count(cfg.encoder, cfg.placement.tmi),
                      cfg.encoder.seed);
    m.log_tau_v = init_log_scale<T>();
    m.log_tau_a = init_log_scale<T>();
    return m;
  }

  bool has_task(const std::string& id) const { return heads.count(id) > 0; }

  void register_task(const std::string& id) {
    cfg.task(id);  // must be a declared task
    if (has_task(id)) throw validation_error("task already registered: " + id);
    if (cfg.components.tmdg)
      tmdg_tasks.emplace(id, TmdgTask<T>::init(cfg.sizes.tmdg_pool, cfg.sizes.tmdg_n,
                                               cfg.encoder.embed_dim, cfg.encoder.seed, id));
    if (cfg.components.tmi) tmi.register_task(id);
    heads.emplace(id, HeadParams<T>::init(cfg.encoder.embed_dim, cfg.encoder.embed_dim,
                                          cfg.encoder.seed, id));
    registered.push_back(id);
  }

  // The exact trainable set of a stage training `id`.
  ParamRegistry<T> trainable_registry(const std::string& id) {
    if (!has_task(id)) throw validation_error("task not registered: " + id);
    ParamRegistry<T> reg;
    if (cfg.components.tma) tma.register_params(reg, "tma");
    if (cfg.components.tmdg) tmdg_tasks.at(id).register_params(reg, "tmdg/" + id);
    if (cfg.components.tmi) tmi.register_params(reg, id, "tmi");
    heads.at(id).register_params(reg, "heads/" + id);
    reg.add("tau/v", &log_tau_v);
    reg.add("tau/a", &log_tau_a);
    return reg;
  }

  // Everything the model owns beyond the frozen backbone, for checkpointing.
  ParamRegistry<T> full_registry() {
    ParamRegistry<T> reg;
    tma.register_params(reg, "tma");
    for (const auto& id : registered) {
      if (cfg.components.tmdg) tmdg_tasks.at(id).register_params(reg, "tmdg/" + id);
      if (cfg.components.tmi) tmi.register_params(reg, id, "tmi");
      heads.at(id).register_params(reg, "heads/" + id);
    }
    reg.add("tau/v", &log_tau_v);
    reg.add("tau/a", &log_tau_a);
    return reg;
  }

  std::string fingerprint_of(ParamRegistry<T>& reg) const {
    std::map<std::string, const Tensor<T>*> m;
    for (auto& [name, t] : reg.entries) m[name] = t;
    return fingerprint_arrays(m);
  }

  std::string tma_fingerprint() {
    ParamRegistry<T> reg;
    tma.register_params(reg, "tma");
    return fingerprint_of(reg);
  }

  std::string component_fingerprint() {
    ParamRegistry<T> reg = full_registry();
    return fingerprint_of(reg);
  }
};

// One forward pass's bound component vars for a single task.
template <typename T>
struct TaskVars {
  bool tma_on = false, tmdg_on = false, tmi_on = false;
  TmaVars<T> tma;
  TmdgVars<T> tmdg;
  TmiVars<T> tmi;
  HeadVars<T> heads;
  Var<T> log_tau_v, log_tau_a;
};

// Push order matches trainable_registry() so gradients can also be consumed
// positionally; the optimizer nevertheless routes by name.
template <typename T>
TaskVars<T> push_task_vars(VarBinding<T>& vb, PhpModel<T>& model, const std::string& id) {
  if (!model.has_task(id)) throw validation_error("task not registered: " + id);
  TaskVars<T> tv;
  tv.tma_on = model.cfg.components.tma;
  tv.tmdg_on = model.cfg.components.tmdg;
  tv.tmi_on = model.cfg.components.tmi;
  if (tv.tma_on) tv.tma = TmaVars<T>::push(vb, model.tma, "tma");
  if (tv.tmdg_on)
    tv.tmdg = TmdgVars<T>::push(vb, model.tmdg_tasks.at(id), model.tmdg_attn, "tmdg/" + id);
  if (tv.tmi_on) tv.tmi = TmiVars<T>::push(vb, model.tmi, id, "tmi");
  tv.heads = HeadVars<T>::push(vb, model.heads.at(id), "heads/" + id);
  tv.log_tau_v = vb.param("tau/v", model.log_tau_v);
  tv.log_tau_a = vb.param("tau/a", model.log_tau_a);
  return tv;
}

// Per-clip hook set implementing placement. Components refresh (drop + re-add)
// their prompt rows at each layer of their own band; one segment stack per
// clip tracks who owns the current leading rows. Bands are visited shallow to
// deep and each band hosts at most one component, so the owner of the current
// band's rows is always on top of the stack.
template <typename T>
HookSet<T> make_hooks(const EngineConfig& cfg, const TaskVars<T>& tv) {
  auto stack = std::make_shared<std::vector<std::pair<Band, long>>>();
  PlacementConfig place = cfg.placement;
  EncoderConfig enc = cfg.encoder;
  HookSet<T> h;
  h.pre_layer = [place, enc, tv, stack](Graph<T>& g, long layer, Band band, StreamState<T>& sv,
                                        StreamState<T>& sa) {
    if (!stack->empty() && stack->back().first == band) {
      long n = stack->back().second;
      stack->pop_back();
      sv.tokens = drop_rows3(sv.tokens, n);
      sv.prompt_rows -= n;
      sa.tokens = drop_rows3(sa.tokens, n);
      sa.prompt_rows -= n;
    }
    if (tv.tma_on && band == place.tma) tma_apply(g, tv.tma, sv, sa);
    if (tv.tmdg_on && band == place.tmdg) {
      long n = tmdg_apply_stream(g, tv.tmdg, sv);
      tmdg_apply_stream(g, tv.tmdg, sa);
      stack->push_back({band, n});
    }
    if (tv.tmi_on && band == place.tmi) {
      long band_layer = layer - detail::band_start(enc, band);
      tmi_apply(tv.tmi, band_layer, sv, sa);
      stack->push_back({band, tv.tmi.layers[size_t(band_layer)].first.val().dim(0)});
    }
  };
  return h;
}

// ----- results -----

struct SequenceResult {
  std::vector<std::string> order;
  // acc[s][k] = accuracy (percent) of task order[k] evaluated after stage s,
  // defined for k <= s (lower-triangular).
  std::vector<std::vector<double>> acc;
  std::vector<std::string> checkpoints;  // stage checkpoint dirs, if written
};

inline std::string order_label(const std::vector<std::string>& order, const char* sep = ">") {
  std::string s;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i) s += sep;
    s += order[i];
  }
  return s;
}

inline nlohmann::json sequence_result_to_json(const SequenceResult& r) {
  return nlohmann::json{{"order", r.order}, {"acc", r.acc}, {"checkpoints", r.checkpoints}};
}

inline SequenceResult sequence_result_from_json(const nlohmann::json& j) {
  SequenceResult r;
  r.order = j.at("order").get<std::vector<std::string>>();
  r.acc = j.at("acc").get<std::vector<std::vector<double>>>();
  if (j.contains("checkpoints"))
    r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  if (r.acc.size() != r.order.size())
    throw validation_error("sequence result: stage count does not match order length");
  for (size_t s = 0; s < r.acc.size(); ++s)
    if (r.acc[s].size() != s + 1)
      throw validation_error("sequence result: accuracy matrix is not lower-triangular");
  return r;
}

// ----- engine -----

template <typename T>
class Engine {
public:
  explicit Engine(EngineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& spec : cfg_.tasks) data_.emplace(spec.task_id, make_task(spec));
    model_ = PhpModel<T>::create(cfg_);
  }

  const EngineConfig& config() const { return cfg_; }
  PhpModel<T>& model() { return model_; }
  const TaskDataset& dataset(const std::string& id) const {
    auto it = data_.find(id);
    if (it == data_.end()) throw validation_error("unknown task: " + id);
    return it->second;
  }
  std::string backbone_fingerprint() const { return model_.encoder.fingerprint(); }

  // Sorted trainable-parameter names recorded at each stage of the last run.
  const std::vector<std::vector<std::string>>& ledger_history() const { return ledger_history_; }

  // Fresh model, then train the order stage by stage; evaluates every seen
  // task after each stage. checkpoint_root != "" writes one atomic
  // checkpoint directory per stage.
  SequenceResult run_sequence(const std::vector<std::string>& order,
                              const std::string& checkpoint_root = "") {
    if (order.empty()) throw validation_error("empty task order");
    std::set<std::string> seen;
    for (const auto& id : order) {
      cfg_.task(id);
      if (!seen.insert(id).second) throw validation_error("duplicate task in order: " + id);
    }
    model_ = PhpModel<T>::create(cfg_);
    ledger_history_.clear();
    if (!checkpoint_root.empty()) std::filesystem::create_directories(checkpoint_root);
    SequenceResult res;
    res.order = order;
    for (size_t s = 0; s < order.size(); ++s) {
      model_.register_task(order[s]);
      Adam<T> opt = train_stage(order[s], static_cast<long>(s));
      std::vector<double> row;
      for (size_t k = 0; k <= s; ++k) row.push_back(evaluate(order[k]));
      res.acc.push_back(std::move(row));
      if (!checkpoint_root.empty()) {
        std::string dir = checkpoint_root + "/stage" + std::to_string(s) + "_" + order[s];
        save_stage_checkpoint(dir, opt, order, static_cast<long>(s));
        res.checkpoints.push_back(dir);
      }
    }
    return res;
  }

  // Identical pipeline with an order of length 1.
  double single_task_baseline(const std::string& id) {
    SequenceResult r = run_sequence({id});
    return r.acc[0][0];
  }

  // Replace the engine's model with one restored from a stage checkpoint
  // written under the same configuration.
  void restore(const std::string& dir);

  // Test-split accuracy of `id` under the current model (its own components).
  double evaluate(const std::string& id) {
    if (!model_.has_task(id)) throw validation_error("evaluating unregistered task: " + id);
    const TaskSpec& spec = cfg_.task(id);
    const auto& clips = data_.at(id).test;
    Tensor<T> class_emb = cast_tensor<T>(class_text_embeddings(spec, cfg_.encoder.embed_dim));
    // project class text rows once per evaluation
    Tensor<T> class_tv, class_ta;
    {
      Graph<T> g;
      g.recording = false;
      VarBinding<T> vb(g, /*trainable=*/false);
      HeadVars<T> hv = HeadVars<T>::push(vb, model_.heads.at(id), "heads/" + id);
      class_tv = mlp2_project(g.input(class_emb), hv.mlp_tv).val();
      class_ta = mlp2_project(g.input(class_emb), hv.mlp_ta).val();
    }
    long correct = 0;
    for (const AVClip& clip : clips) {
      Graph<T> g;
      g.recording = false;
      VarBinding<T> vb(g, /*trainable=*/false);
      TaskVars<T> tv = push_task_vars(vb, model_, id);
      HookSet<T> hooks = make_hooks(cfg_, tv);
      auto fwd = model_.encoder.forward(g, cast_tensor<T>(clip.video), cast_tensor<T>(clip.audio),
                                        hooks);
      Tensor<T> f_v = mlp2_project(fwd.video_embed, tv.heads.mlp_v).val();
      Tensor<T> f_a = mlp2_project(fwd.audio_embed, tv.heads.mlp_a).val();
      auto logits = fused_class_logits(f_v, f_a, class_tv, class_ta);
      if (spec.flavor == TaskFlavor::multi_label) {
        auto mask = predict_multi(logits);
        if (mask == clip.label_multi) ++correct;  // subset accuracy: exact mask
      } else {
        if (predict_single(logits) == clip.label) ++correct;
      }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(clips.size());
  }

private:
  // Train one stage; returns the optimizer for checkpointing.
  Adam<T> train_stage(const std::string& id, long stage) {
    const TaskSpec& spec = cfg_.task(id);
    const auto& clips = data_.at(id).train;
    ParamRegistry<T> reg = model_.trainable_registry(id);
    AdamConfig ocfg;
    ocfg.lr = cfg_.train.lr;
    ocfg.weight_decay = cfg_.train.weight_decay;
    Adam<T> opt(ocfg);  // fresh moments per task: the schedule restarts too
    Tensor<float> class_emb = class_text_embeddings(spec, cfg_.encoder.embed_dim);

    const long B = cfg_.train.batch_size;
    const long n = static_cast<long>(clips.size());
    const long batches = (n + B - 1) / B;
    const long total_steps = cfg_.train.epochs_per_task * batches;
    long step = 0;
    bool ledger_checked = false;
    for (long epoch = 0; epoch < cfg_.train.epochs_per_task; ++epoch) {
      std::vector<long> idx(static_cast<size_t>(n));
      for (long i = 0; i < n; ++i) idx[size_t(i)] = i;
      Rng r = Rng::derive(cfg_.train.seed, "shuffle:" + id + ":stage" + std::to_string(stage) +
                                               ":epoch" + std::to_string(epoch));
      // Fisher-Yates with the derived stream
      for (long i = n - 1; i > 0; --i) {
        long j = static_cast<long>(r.next_u64() % static_cast<uint64_t>(i + 1));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
      }
      for (long b = 0; b < batches; ++b) {
        long lo = b * B, hi = std::min(n, lo + B);
        Graph<T> g;
        VarBinding<T> vb(g);
        TaskVars<T> tv = push_task_vars(vb, model_, id);
        Var<T> fv_rows, fa_rows;
        Tensor<T> tv_targets({hi - lo, cfg_.encoder.embed_dim});
        for (long i = lo; i < hi; ++i) {
          const AVClip& clip = clips[size_t(idx[size_t(i)])];
          HookSet<T> hooks = make_hooks(cfg_, tv);
          auto fwd = model_.encoder.forward(g, cast_tensor<T>(clip.video),
                                            cast_tensor<T>(clip.audio), hooks);
          fv_rows = (i == lo) ? fwd.video_embed : concat_rows(fv_rows, fwd.video_embed);
          fa_rows = (i == lo) ? fwd.audio_embed : concat_rows(fa_rows, fwd.audio_embed);
          Tensor<T> t = cast_tensor<T>(label_target_embedding(spec, clip, class_emb));
          for (long d = 0; d < cfg_.encoder.embed_dim; ++d) tv_targets.at(i - lo, d) = t.at(0, d);
        }
        auto f_v = mlp2_project(fv_rows, tv.heads.mlp_v);
        auto f_a = mlp2_project(fa_rows, tv.heads.mlp_a);
        auto targets = g.input(tv_targets);
        auto t_v = mlp2_project(targets, tv.heads.mlp_tv);
        auto t_a = mlp2_project(targets, tv.heads.mlp_ta);
        auto loss = add(contrastive_loss(f_v, t_v, tv.log_tau_v),
                        contrastive_loss(f_a, t_a, tv.log_tau_a));
        g.backward(loss);
        if (!ledger_checked) {
          assert_ledger(g, vb, reg);
          ledger_checked = true;
        }
        double lr = cosine_lr(cfg_.train.lr, step, total_steps);
        opt.begin_step();
        for (const auto& [name, var] : vb.bound()) {
          Tensor<T>* w = reg.find(name);
          if (!w) throw validation_error("trained parameter missing from stage registry: " + name);
          opt.update(name, *w, g.grad(var), lr);
        }
        ++step;
      }
    }
    return opt;
  }

  // The freezing ledger, asserted on the tape itself each stage: the bound
  // name set must equal the declared trainable set, every declared parameter
  // must be reachable from the loss, and no other graph leaf may be a
  // parameter.
  void assert_ledger(Graph<T>& g, const VarBinding<T>& vb, const ParamRegistry<T>& reg) {
    std::set<std::string> bound_names, declared;
    for (const auto& [name, var] : vb.bound()) bound_names.insert(name);
    for (const auto& [name, t] : reg.entries) declared.insert(name);
    if (bound_names != declared) {
      std::string msg = "trainable ledger mismatch; bound={";
      for (const auto& s : bound_names) msg += s + ",";
      msg += "} declared={";
      for (const auto& s : declared) msg += s + ",";
      msg += "}";
      throw validation_error(msg);
    }
    long leaf_params = 0;
    for (size_t i = 0; i < g.size(); ++i) {
      auto& n = g.node(static_cast<int>(i));
      if (n.needs_grad && !n.back) ++leaf_params;
    }
    if (leaf_params != static_cast<long>(vb.bound().size()))
      throw validation_error("graph has untracked trainable leaves: " +
                             std::to_string(leaf_params) + " vs " +
                             std::to_string(vb.bound().size()));
    for (const auto& [name, var] : vb.bound())
      if (g.grad(var).numel() == 0)
        throw validation_error("declared trainable parameter received no gradient: " + name);
    std::vector<std::string> sorted(declared.begin(), declared.end());
    ledger_history_.push_back(std::move(sorted));
  }

  void save_stage_checkpoint(const std::string& dir, Adam<T>& opt,
                             const std::vector<std::string>& order, long stage);

  EngineConfig cfg_;
  PhpModel<T> model_;
  std::map<std::string, TaskDataset> data_;
  std::vector<std::vector<std::string>> ledger_history_;
};

}  // namespace phpav

#include "phpav/checkpoint.hpp"

#endif
