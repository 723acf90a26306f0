#ifndef PHPAV_CLI_HPP
#define PHPAV_CLI_HPP

// Command-line front end: generate | run | report | ablate | baseline.
//
// One JSON config file drives everything; flags and PHP_-prefixed environment
// variables override it. Every command takes an exclusive lock on its output
// directory, writes deterministically (no timestamps), and records a run
// manifest (full config, seeds, code version, fingerprints) sufficient to
// reproduce the run bit-exactly.
//
// Exit codes: 0 success, 1 validation error (bad input/config), 2 runtime
// failure (I/O and everything else).

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "phpav/engine.hpp"
#include "phpav/metrics.hpp"
#include "phpav/plots.hpp"

namespace phpav {

inline constexpr const char* kCodeVersion = "0.1.0";

// ----- experiment configuration -----

struct ExperimentConfig {
  EngineConfig engine;
  std::vector<std::vector<std::string>> orders;
  std::string output_dir = "out";

  void validate() const {
    engine.validate();
    if (output_dir.empty()) throw validation_error("experiment: output_dir must not be empty");
    if (orders.empty()) throw validation_error("experiment: at least one task order required");
    std::set<std::string> declared;
    for (const auto& t : engine.tasks) declared.insert(t.task_id);
    for (const auto& order : orders) {
      std::set<std::string> seen(order.begin(), order.end());
      if (order.size() != declared.size() || seen != declared)
        throw validation_error("experiment: order '" + order_label(order) +
                               "' is not a permutation of the declared task ids");
    }
  }
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json j = engine_config_to_json(c.engine);
  j["orders"] = c.orders;
  j["output_dir"] = c.output_dir;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.engine = engine_config_from_json(j);
  c.orders = j.at("orders").get<std::vector<std::vector<std::string>>>();
  c.output_dir = j.at("output_dir").get<std::string>();
  return c;
}

// Every permutation of the declared tasks, in index-lexicographic sequence.
inline std::vector<std::vector<std::string>> all_orders(const std::vector<TaskSpec>& tasks) {
  std::vector<long> idx(tasks.size());
  std::iota(idx.begin(), idx.end(), 0L);
  std::vector<std::vector<std::string>> orders;
  do {
    std::vector<std::string> o;
    for (long i : idx) o.push_back(tasks[static_cast<size_t>(i)].task_id);
    orders.push_back(std::move(o));
  } while (std::next_permutation(idx.begin(), idx.end()));
  return orders;
}

inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.engine = default_engine_config();
  c.orders = all_orders(c.engine.tasks);
  return c;
}

// ----- small helpers -----

namespace detail {

inline std::string file_label(const std::vector<std::string>& order) {
  return order_label(order, "_");
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t k = s.find(sep, pos);
    out.push_back(s.substr(pos, k == std::string::npos ? std::string::npos : k - pos));
    if (k == std::string::npos) break;
    pos = k + 1;
  }
  return out;
}

inline std::vector<std::vector<std::string>> parse_orders_flag(const std::string& s) {
  std::vector<std::vector<std::string>> orders;
  for (const std::string& part : split_on(s, ';')) {
    std::vector<std::string> order = split_on(part, ',');
    for (const auto& id : order)
      if (id.empty()) throw validation_error("--orders: empty task id in '" + part + "'");
    orders.push_back(std::move(order));
  }
  return orders;
}

inline uint64_t parse_seed(const std::string& s) {
  try {
    size_t used = 0;
    unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    throw validation_error("--seed: not an unsigned integer: " + s);
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open for write: " + path.string());
  f << text;
  if (!f) throw io_error("short write: " + path.string());
}

// Exclusive lock on an output directory (one writer per output_dir).
class LockFile {
 public:
  explicit LockFile(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw io_error("output dir is locked by another process (remove to override): " + path_);
    ::close(fd);
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  std::string path_;
};

}  // namespace detail

// Recorded after every command; skipped when an identical manifest is already
// on disk so reruns of an up-to-date command perform no writes.
inline void write_run_manifest(const ExperimentConfig& cfg, const std::string& verb,
                               const nlohmann::json& extra) {
  nlohmann::json seeds{{"train", cfg.engine.train.seed}, {"encoder", cfg.engine.encoder.seed}};
  nlohmann::json data = nlohmann::json::object();
  for (const auto& t : cfg.engine.tasks) data[t.task_id] = t.seed;
  seeds["data"] = data;
  nlohmann::json m{{"command", verb},
                   {"code_version", kCodeVersion},
                   {"config", experiment_config_to_json(cfg)},
                   {"seeds", seeds}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  fs::path dir = fs::path(cfg.output_dir) / "manifests";
  fs::create_directories(dir);
  fs::path path = dir / (verb + ".json");
  if (fs::exists(path)) {
    try {
      if (read_json(path) == m) return;
    } catch (const std::exception&) {
    }
  }
  write_json(path, m);
}

// ----- generate -----

// Digests of the packed arrays a dataset would be saved as.
inline std::map<std::string, std::string> dataset_digests(const TaskDataset& ds) {
  std::map<std::string, std::string> d;
  detail::for_each_split(ds, [&](const std::string& split, const std::vector<AVClip>& clips) {
    if (clips.empty()) return;
    d[split + "_video"] = array_digest(detail::pack_clips(clips, true));
    d[split + "_audio"] = array_digest(detail::pack_clips(clips, false));
    d[split + "_labels"] = array_digest(detail::pack_labels(ds.spec, clips));
    if (ds.spec.flavor == TaskFlavor::qa_style) {
      Tensor<float> q({static_cast<long>(clips.size()), 1});
      for (long i = 0; i < q.dim(0); ++i)
        q.at(i, 0) = static_cast<float>(clips[static_cast<size_t>(i)].question_id);
      d[split + "_questions"] = array_digest(q);
    }
  });
  return d;
}

// True when the on-disk dataset matches both the configured task (manifest
// digests equal the regenerated data) and itself (files verify against the
// manifest).
inline bool dataset_up_to_date(const TaskDataset& ds, const fs::path& root) {
  fs::path mf = root / ds.spec.task_id / "manifest.json";
  if (!fs::exists(mf)) return false;
  nlohmann::json manifest;
  try {
    manifest = read_json(mf);
  } catch (const std::exception&) {
    return false;
  }
  if (manifest.value("format_version", 0) != 1) return false;
  if (!manifest.contains("spec") || !manifest.contains("arrays")) return false;
  if (manifest.at("spec") != detail::spec_to_json(ds.spec)) return false;
  auto want = dataset_digests(ds);
  const auto& arrays = manifest.at("arrays");
  if (arrays.size() != want.size()) return false;
  for (const auto& [name, digest] : want) {
    if (!arrays.contains(name)) return false;
    if (arrays.at(name).value("digest", std::string()) != digest) return false;
  }
  try {
    (void)load_dataset(root, ds.spec.task_id);  // digest-verifies the files
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

inline void cmd_generate(const ExperimentConfig& cfg) {
  fs::path out(cfg.output_dir);
  if (!out.parent_path().empty() && !fs::exists(out.parent_path()))
    throw io_error("output_dir parent does not exist: " + out.parent_path().string());
  detail::LockFile lock(cfg.output_dir);
  fs::path root = out / "datasets";
  fs::create_directories(root);
  nlohmann::json digests = nlohmann::json::object();
  long wrote = 0;
  for (const auto& spec : cfg.engine.tasks) {
    TaskDataset ds = make_task(spec);
    if (dataset_up_to_date(ds, root)) {
      std::cout << "generate: " << spec.task_id << " up to date\n";
    } else {
      save_dataset(ds, root);
      std::cout << "generate: wrote " << spec.task_id << "\n";
      ++wrote;
    }
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [k, v] : dataset_digests(ds)) d[k] = v;
    digests[spec.task_id] = d;
  }
  if (wrote == 0) std::cout << "generate: all datasets up to date\n";
  write_run_manifest(cfg, "generate", {{"datasets", digests}});
}

// ----- run -----

inline void require_datasets(const ExperimentConfig& cfg) {
  fs::path root = fs::path(cfg.output_dir) / "datasets";
  for (const auto& spec : cfg.engine.tasks) {
    fs::path mf = root / spec.task_id / "manifest.json";
    if (!fs::exists(mf))
      throw validation_error("datasets not generated for task '" + spec.task_id +
                             "' (run generate first)");
    nlohmann::json manifest = read_json(mf);
    if (!manifest.contains("spec") || manifest.at("spec") != detail::spec_to_json(spec))
      throw validation_error("on-disk dataset does not match the config for task '" +
                             spec.task_id + "' (re-run generate)");
  }
}

inline void cmd_run(const ExperimentConfig& cfg) {
  detail::LockFile lock(cfg.output_dir);
  require_datasets(cfg);
  Engine<float> eng(cfg.engine);
  nlohmann::json fingerprints{{"backbone", eng.backbone_fingerprint()}};
  nlohmann::json per_order = nlohmann::json::object();
  fs::path results = fs::path(cfg.output_dir) / "results";
  for (const auto& order : cfg.orders) {
    std::string label = detail::file_label(order);
    fs::path dir = results / label;
    fs::create_directories(dir);
    SequenceResult r = eng.run_sequence(order, (dir / "checkpoints").string());
    nlohmann::json rj = sequence_result_to_json(r);
    rj["order_label"] = order_label(order);
    write_json(dir / "result.json", rj);
    per_order[label] = eng.model().component_fingerprint();
    std::cout << "run: " << order_label(order) << " final-stage accuracies:";
    for (double a : r.acc.back()) std::cout << ' ' << format2(a);
    std::cout << "\n";
  }
  fingerprints["components_after_order"] = per_order;
  write_run_manifest(cfg, "run", {{"fingerprints", fingerprints}});
}

// ----- report -----

inline void cmd_report(const ExperimentConfig& cfg) {
  detail::LockFile lock(cfg.output_dir);
  fs::path results = fs::path(cfg.output_dir) / "results";
  std::vector<fs::path> result_files;
  if (fs::exists(results))
    for (const auto& entry : fs::directory_iterator(results)) {
      fs::path f = entry.path() / "result.json";
      if (fs::exists(f)) result_files.push_back(f);
    }
  std::sort(result_files.begin(), result_files.end());
  if (result_files.empty())
    throw validation_error("report: no sequence results under " + results.string());
  std::vector<SequenceResult> rs;
  for (const auto& f : result_files) rs.push_back(sequence_result_from_json(read_json(f)));
  MetricsTable table = compute_metrics_table(rs);
  fs::path rep = fs::path(cfg.output_dir) / "report";
  fs::create_directories(rep);
  detail::write_text(rep / "metrics.csv", render_metrics_csv(table));
  write_json(rep / "metrics.json", render_metrics_json(table));
  detail::write_text(rep / "stage_matrices.csv", render_stage_matrices(rs));
  for (const auto& r : rs)
    detail::write_text(rep / ("plot_" + detail::file_label(r.order) + ".svg"),
                       render_accuracy_svg(r));
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& f : result_files) inputs.push_back(f.string());
  write_run_manifest(cfg, "report", {{"inputs", inputs}});
  std::cout << "report: aggregated " << rs.size() << " orders into " << rep.string() << "\n";
}

// ----- ablate -----

// Component-mask rows in the canonical study scheme: no components, each
// alone, each pair, all three.
inline std::vector<std::pair<std::string, ComponentMask>> canonical_mask_rows() {
  auto m = [](bool a, bool g, bool i) { return ComponentMask{a, g, i}; };
  return {{"Row 1", m(false, false, false)},
          {"Row 2", m(true, false, false)},
          {"Row 3", m(false, true, false)},
          {"Row 4", m(false, false, true)},
          {"Row 5", m(true, true, false)},
          {"Row 6", m(true, false, true)},
          {"Row 7", m(false, true, true)},
          {"Row 8", m(true, true, true)}};
}

// Placement rows in the canonical study scheme; the default S-M-D is row 6.
inline std::vector<std::pair<std::string, PlacementConfig>> canonical_placement_rows() {
  static const char* rows[] = {"D-M-S", "M-D-S", "D-S-M", "M-S-D", "S-D-M", "S-M-D"};
  std::vector<std::pair<std::string, PlacementConfig>> out;
  for (int i = 0; i < 6; ++i)
    out.emplace_back("Row " + std::to_string(i + 1), PlacementConfig::parse(rows[i]));
  return out;
}

inline MetricsTable run_orders_metrics(const EngineConfig& ec,
                                       const std::vector<std::vector<std::string>>& orders) {
  Engine<float> eng(ec);
  std::vector<SequenceResult> rs;
  for (const auto& order : orders) rs.push_back(eng.run_sequence(order));
  return compute_metrics_table(rs);
}

inline std::string metrics_row_csv(const MetricsTable& t) {
  return format2(t.agg_a_mean) + "," + format2(t.agg_a_final) + "," + format2(t.agg_f_mean) +
         "," + format2(t.agg_a_single) + "," + format2(t.agg_a_multi) + "," + format2(t.diff);
}

inline void cmd_ablate(const ExperimentConfig& cfg, bool do_masks, bool do_placements,
                       const std::vector<std::pair<std::string, ComponentMask>>& mask_rows,
                       const std::vector<std::pair<std::string, PlacementConfig>>& placement_rows) {
  detail::LockFile lock(cfg.output_dir);
  fs::path dir = fs::path(cfg.output_dir) / "ablation";
  fs::create_directories(dir);
  if (do_masks) {
    std::string csv = "row,components,A_mean,A_final,F_mean,A_single,A_multi,Diff\n";
    for (const auto& [label, mask] : mask_rows) {
      EngineConfig ec = cfg.engine;
      ec.components = mask;
      MetricsTable t = run_orders_metrics(ec, cfg.orders);
      csv += label + "," + csv_quote(mask.str()) + "," + metrics_row_csv(t) + "\n";
      std::cout << "ablate: components " << label << " (" << mask.str() << ") done\n";
    }
    detail::write_text(dir / "components.csv", csv);
  }
  if (do_placements) {
    std::string csv = "row,tma,tmdg,tmi,A_mean,A_final,F_mean,A_single,A_multi,Diff\n";
    for (const auto& [label, pl] : placement_rows) {
      EngineConfig ec = cfg.engine;
      ec.placement = pl;
      MetricsTable t = run_orders_metrics(ec, cfg.orders);
      std::string s = pl.str();  // "X-Y-Z" = bands of (tma, tmdg, tmi)
      csv += label + "," + s.substr(0, 1) + "," + s.substr(2, 1) + "," + s.substr(4, 1) + "," +
             metrics_row_csv(t) + "\n";
      std::cout << "ablate: placement " << label << " (" << s << ") done\n";
    }
    detail::write_text(dir / "placement.csv", csv);
  }
  write_run_manifest(cfg, "ablate",
                     {{"component_rows", do_masks ? mask_rows.size() : size_t{0}},
                      {"placement_rows", do_placements ? placement_rows.size() : size_t{0}}});
}

// ----- baseline -----

inline void cmd_baseline(const ExperimentConfig& cfg) {
  detail::LockFile lock(cfg.output_dir);
  fs::path dir = fs::path(cfg.output_dir) / "baselines";
  fs::create_directories(dir);
  Engine<float> eng(cfg.engine);
  nlohmann::json all = nlohmann::json::object();
  for (const auto& spec : cfg.engine.tasks) {
    double acc = eng.single_task_baseline(spec.task_id);
    write_json(dir / (spec.task_id + ".json"),
               nlohmann::json{{"task", spec.task_id}, {"accuracy", acc}});
    all[spec.task_id] = acc;
    std::cout << "baseline: " << spec.task_id << " " << format2(acc) << "\n";
  }
  write_run_manifest(cfg, "baseline", {{"baselines", all}});
}

// ----- entry point -----

inline int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"audio-visual incremental prompt-learning experiment engine"};
  app.require_subcommand(1);

  std::string config_path, orders_flag, seed_flag, placement_flag, components_flag, out_flag;
  auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", config_path, "JSON experiment config file")->envname("PHP_CONFIG");
    sc->add_option("--orders", orders_flag,
                   "task orders: comma-separated ids, ';' between orders")
        ->envname("PHP_ORDERS");
    sc->add_option("--seed", seed_flag, "training seed override")->envname("PHP_SEED");
    sc->add_option("--placement", placement_flag,
                   "band placement like S-M-D (ablate: ';' list of rows, or 'all')")
        ->envname("PHP_PLACEMENT");
    sc->add_option("--components", components_flag,
                   "component mask like tma,tmdg (ablate: ';' list of rows, or 'all')")
        ->envname("PHP_COMPONENTS");
    sc->add_option("--out", out_flag, "output directory override")->envname("PHP_OUT");
  };
  CLI::App* sc_generate = app.add_subcommand("generate", "materialize the synthetic datasets");
  CLI::App* sc_run = app.add_subcommand("run", "train all configured task orders");
  CLI::App* sc_report = app.add_subcommand("report", "aggregate results into tables and plots");
  CLI::App* sc_ablate = app.add_subcommand("ablate", "component-mask and placement studies");
  CLI::App* sc_baseline = app.add_subcommand("baseline", "single-task reference runs");
  for (CLI::App* sc : {sc_generate, sc_run, sc_report, sc_ablate, sc_baseline}) add_common(sc);

  std::vector<const char*> argv;
  argv.push_back("phpav");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    ExperimentConfig cfg = config_path.empty()
                               ? default_experiment_config()
                               : experiment_config_from_json(read_json(config_path));
    if (!out_flag.empty()) cfg.output_dir = out_flag;
    if (!seed_flag.empty()) cfg.engine.train.seed = detail::parse_seed(seed_flag);
    if (!orders_flag.empty()) cfg.orders = detail::parse_orders_flag(orders_flag);
    if (!sc_ablate->parsed()) {
      if (!placement_flag.empty()) cfg.engine.placement = PlacementConfig::parse(placement_flag);
      if (!components_flag.empty()) cfg.engine.components = ComponentMask::parse(components_flag);
    }
    cfg.validate();

    if (sc_generate->parsed()) {
      cmd_generate(cfg);
    } else if (sc_run->parsed()) {
      cmd_run(cfg);
    } else if (sc_report->parsed()) {
      cmd_report(cfg);
    } else if (sc_baseline->parsed()) {
      cmd_baseline(cfg);
    } else if (sc_ablate->parsed()) {
      auto mask_rows = canonical_mask_rows();
      auto placement_rows = canonical_placement_rows();
      if (!components_flag.empty() && components_flag != "all") {
        mask_rows.clear();
        int i = 1;
        for (const std::string& part : detail::split_on(components_flag, ';'))
          mask_rows.emplace_back("Row " + std::to_string(i++), ComponentMask::parse(part));
      }
      if (!placement_flag.empty() && placement_flag != "all") {
        placement_rows.clear();
        int i = 1;
        for (const std::string& part : detail::split_on(placement_flag, ';'))
          placement_rows.emplace_back("Row " + std::to_string(i++), PlacementConfig::parse(part));
      }
      bool do_masks = !components_flag.empty() || placement_flag.empty();
      bool do_placements = !placement_flag.empty() || components_flag.empty();
      cmd_ablate(cfg, do_masks, do_placements, mask_rows, placement_rows);
    }
    return 0;
  } catch (const validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace phpav

#endif
