#ifndef PHPAV_METRICS_HPP
#define PHPAV_METRICS_HPP

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "phpav/common.hpp"
#include "phpav/engine.hpp"

// Incremental-learning metrics over collections of sequence results, plus the
// table renderers. Definitions (S = order length, task accuracies a_1..a_S
// taken from the orders where the task sits in a given position):
//   A_mean   over orders where the task is FIRST: mean of all a_s, pooled
//            across stages and orders.
//   A_final  over the same orders: mean of a_S.
//   F_mean   over the same orders: mean of (a_1 - a_S)/(S - 1), i.e. the
//            average per-stage drop of the initial task.
//   A_single over the same orders: mean of a_1 (accuracy right after the
//            task's own stage, before any other task was learned).
//   A_multi  over orders where the task is LAST: mean of its final accuracy.
//   Diff     normalized penalty-aware difference of aggregate A_single and
//            A_multi: (Am - As)/max(100 - As, eps) * (1 + As/100)^2 * 100.
// Aggregates are unweighted means over tasks; Diff is computed from the
// aggregated A_single/A_multi (means first, Diff second). All internal math
// is double precision; rounding to 2 decimals happens only at render time.

namespace phpav {

struct FirstTaskStats {
  double a_mean = 0, a_final = 0, f_mean = 0;
};

struct TaskMetrics {
  double a_mean = 0, a_final = 0, f_mean = 0, a_single = 0, a_multi = 0;
};

struct MetricsTable {
  std::vector<std::string> tasks;  // row order
  std::map<std::string, TaskMetrics> per_task;
  double agg_a_mean = 0, agg_a_final = 0, agg_f_mean = 0;
  double agg_a_single = 0, agg_a_multi = 0, diff = 0;
};

namespace detail {

inline long uniform_order_length(const std::vector<SequenceResult>& results) {
  if (results.empty()) throw validation_error("metrics: no sequence results");
  long S = static_cast<long>(results[0].order.size());
  for (const auto& r : results) {
    if (static_cast<long>(r.order.size()) != S)
      throw validation_error("metrics: mixed-length orders (metrics undefined)");
    if (r.acc.size() != r.order.size())
      throw validation_error("metrics: result has wrong stage count");
    for (size_t s = 0; s < r.acc.size(); ++s)
      if (r.acc[s].size() != s + 1)
        throw validation_error("metrics: accuracy matrix is not lower-triangular");
  }
  return S;
}

}  // namespace detail

inline FirstTaskStats first_task_stats(const std::vector<SequenceResult>& results,
                                       const std::string& task) {
  long S = detail::uniform_order_length(results);
  FirstTaskStats out;
  double pooled = 0;
  long pooled_n = 0, orders_n = 0;
  for (const auto& r : results) {
    if (r.order[0] != task) continue;
    ++orders_n;
    for (long s = 0; s < S; ++s) {
      pooled += r.acc[static_cast<size_t>(s)][0];
      ++pooled_n;
    }
    out.a_final += r.acc[static_cast<size_t>(S - 1)][0];
    if (S > 1)
      out.f_mean += (r.acc[0][0] - r.acc[static_cast<size_t>(S - 1)][0]) / double(S - 1);
  }
  if (orders_n == 0) throw validation_error("metrics: task never first in any order: " + task);
  out.a_mean = pooled / double(pooled_n);
  out.a_final /= double(orders_n);
  out.f_mean /= double(orders_n);
  return out;
}

inline double single_task_acc(const std::vector<SequenceResult>& results,
                              const std::string& task) {
  detail::uniform_order_length(results);
  double sum = 0;
  long n = 0;
  for (const auto& r : results)
    if (r.order[0] == task) {
      sum += r.acc[0][0];
      ++n;
    }
  if (n == 0) throw validation_error("metrics: task never first in any order: " + task);
  return sum / double(n);
}

inline double multi_task_acc(const std::vector<SequenceResult>& results,
                             const std::string& task) {
  long S = detail::uniform_order_length(results);
  double sum = 0;
  long n = 0;
  for (const auto& r : results)
    if (r.order[static_cast<size_t>(S - 1)] == task) {
      sum += r.acc[static_cast<size_t>(S - 1)][static_cast<size_t>(S - 1)];
      ++n;
    }
  if (n == 0) throw validation_error("metrics: task never last in any order: " + task);
  return sum / double(n);
}

inline double diff_metric(double a_single, double a_multi, double eps = 0.001) {
  if (a_single < 0 || a_single > 100 || a_multi < 0 || a_multi > 100)
    throw validation_error("diff_metric: inputs must be percentages in [0,100]");
  double penalty = 1.0 + a_single / 100.0;
  return (a_multi - a_single) / std::max(100.0 - a_single, eps) * penalty * penalty * 100.0;
}

inline MetricsTable compute_metrics_table(const std::vector<SequenceResult>& results) {
  detail::uniform_order_length(results);
  MetricsTable t;
  std::set<std::string> seen;
  for (const auto& r : results)
    for (const auto& id : r.order)
      if (seen.insert(id).second) t.tasks.push_back(id);
  for (const auto& id : t.tasks) {
    FirstTaskStats f = first_task_stats(results, id);
    TaskMetrics m;
    m.a_mean = f.a_mean;
    m.a_final = f.a_final;
    m.f_mean = f.f_mean;
    m.a_single = single_task_acc(results, id);
    m.a_multi = multi_task_acc(results, id);
    t.per_task[id] = m;
    t.agg_a_mean += m.a_mean;
    t.agg_a_final += m.a_final;
    t.agg_f_mean += m.f_mean;
    t.agg_a_single += m.a_single;
    t.agg_a_multi += m.a_multi;
  }
  double n = double(t.tasks.size());
  t.agg_a_mean /= n;
  t.agg_a_final /= n;
  t.agg_f_mean /= n;
  t.agg_a_single /= n;
  t.agg_a_multi /= n;
  t.diff = diff_metric(t.agg_a_single, t.agg_a_multi);
  return t;
}

// ----- rendering -----

// Round half away from zero to 2 decimals (applied at render time only).
inline double round_half_up2(double x) {
  double r = std::floor(std::fabs(x) * 100.0 + 0.5) / 100.0;
  return x < 0 ? -r : r;
}

inline std::string format2(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", round_half_up2(x));
  return buf;
}

// RFC-4180: quote fields containing comma, quote, or newline; double quotes.
inline std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

// Split one CSV line honoring RFC-4180 quoting.
inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string render_metrics_csv(const MetricsTable& t) {
  std::string out = "task,A_mean,A_final,F_mean,A_single,A_multi,Diff\n";
  for (const auto& id : t.tasks) {
    const TaskMetrics& m = t.per_task.at(id);
    out += csv_quote(id) + "," + format2(m.a_mean) + "," + format2(m.a_final) + "," +
           format2(m.f_mean) + "," + format2(m.a_single) + "," + format2(m.a_multi) + ",\n";
  }
  out += "ALL," + format2(t.agg_a_mean) + "," + format2(t.agg_a_final) + "," +
         format2(t.agg_f_mean) + "," + format2(t.agg_a_single) + "," + format2(t.agg_a_multi) +
         "," + format2(t.diff) + "\n";
  return out;
}

inline nlohmann::json render_metrics_json(const MetricsTable& t) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& id : t.tasks) {
    const TaskMetrics& m = t.per_task.at(id);
    per[id] = {{"A_mean", round_half_up2(m.a_mean)},
               {"A_final", round_half_up2(m.a_final)},
               {"F_mean", round_half_up2(m.f_mean)},
               {"A_single", round_half_up2(m.a_single)},
               {"A_multi", round_half_up2(m.a_multi)}};
  }
  return nlohmann::json{{"tasks", t.tasks},
                        {"per_task", per},
                        {"aggregates",
                         {{"A_mean", round_half_up2(t.agg_a_mean)},
                          {"A_final", round_half_up2(t.agg_a_final)},
                          {"F_mean", round_half_up2(t.agg_f_mean)},
                          {"A_single", round_half_up2(t.agg_a_single)},
                          {"A_multi", round_half_up2(t.agg_a_multi)},
                          {"Diff", round_half_up2(t.diff)}}}};
}

inline MetricsTable parse_metrics_csv(const std::string& text) {
  MetricsTable t;
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  if (lines.empty() || csv_split(lines[0]) !=
                           std::vector<std::string>{"task", "A_mean", "A_final", "F_mean",
                                                    "A_single", "A_multi", "Diff"})
    throw validation_error("metrics csv: bad header");
  bool saw_all = false;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f = csv_split(lines[i]);
    if (f.size() != 7) throw validation_error("metrics csv: bad row: " + lines[i]);
    if (f[0] == "ALL") {
      t.agg_a_mean = std::stod(f[1]);
      t.agg_a_final = std::stod(f[2]);
      t.agg_f_mean = std::stod(f[3]);
      t.agg_a_single = std::stod(f[4]);
      t.agg_a_multi = std::stod(f[5]);
      t.diff = std::stod(f[6]);
      saw_all = true;
    } else {
      TaskMetrics m;
      m.a_mean = std::stod(f[1]);
      m.a_final = std::stod(f[2]);
      m.f_mean = std::stod(f[3]);
      m.a_single = std::stod(f[4]);
      m.a_multi = std::stod(f[5]);
      t.tasks.push_back(f[0]);
      t.per_task[f[0]] = m;
    }
  }
  if (!saw_all) throw validation_error("metrics csv: missing ALL row");
  return t;
}

// ----- stage-accuracy matrices (raw per-order tables) -----
// Format, one block per order:
//   order,AVE>AVVP>AVQA
//   stage,AVE,AVVP,AVQA
//   1,56.77,,
//   2,19.48,50.16,
//   3,17.79,63.01,54.18

inline std::string render_stage_matrices(const std::vector<SequenceResult>& results) {
  std::string out;
  for (const auto& r : results) {
    out += "order,";
    for (size_t k = 0; k < r.order.size(); ++k)
      out += (k ? ">" : "") + r.order[k];
    out += "\nstage";
    for (const auto& id : r.order) out += "," + csv_quote(id);
    out += "\n";
    for (size_t s = 0; s < r.acc.size(); ++s) {
      out += std::to_string(s + 1);
      for (size_t k = 0; k < r.order.size(); ++k)
        out += "," + (k < r.acc[s].size() ? format2(r.acc[s][k]) : std::string());
      out += "\n";
    }
  }
  return out;
}

inline std::vector<SequenceResult> parse_stage_matrices(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  std::vector<SequenceResult> out;
  size_t i = 0;
  while (i < lines.size()) {
    if (lines[i].empty()) {
      ++i;
      continue;
    }
    std::vector<std::string> f = csv_split(lines[i]);
    if (f.size() != 2 || f[0] != "order")
      throw validation_error("stage matrices: expected order line, got: " + lines[i]);
    SequenceResult r;
    std::string name = f[1];
    size_t pos = 0;
    while (true) {
      size_t sep = name.find('>', pos);
      r.order.push_back(name.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos));
      if (sep == std::string::npos) break;
      pos = sep + 1;
    }
    size_t S = r.order.size();
    ++i;
    if (i >= lines.size()) throw validation_error("stage matrices: truncated block");
    std::vector<std::string> h = csv_split(lines[i]);
    if (h.size() != S + 1 || h[0] != "stage")
      throw validation_error("stage matrices: bad stage header: " + lines[i]);
    for (size_t k = 0; k < S; ++k)
      if (h[k + 1] != r.order[k])
        throw validation_error("stage matrices: header/order mismatch: " + lines[i]);
    for (size_t s = 0; s < S; ++s) {
      ++i;
      if (i >= lines.size()) throw validation_error("stage matrices: truncated block");
      std::vector<std::string> row = csv_split(lines[i]);
      if (row.size() != S + 1 || row[0] != std::to_string(s + 1))
        throw validation_error("stage matrices: bad stage row: " + lines[i]);
      std::vector<double> vals;
      for (size_t k = 0; k < S; ++k) {
        if (k <= s) {
          if (row[k + 1].empty())
            throw validation_error("stage matrices: missing value at stage " +
                                   std::to_string(s + 1) + ": " + lines[i]);
          vals.push_back(std::stod(row[k + 1]));
        } else if (!row[k + 1].empty()) {
          throw validation_error("stage matrices: unexpected value above diagonal: " + lines[i]);
        }
      }
      r.acc.push_back(std::move(vals));
    }
    out.push_back(std::move(r));
    ++i;
  }
  if (out.empty()) throw validation_error("stage matrices: no blocks found");
  return out;
}

}  // namespace phpav

#endif
