#ifndef PHPAV_TMI_HPP
#define PHPAV_TMI_HPP

#include <map>
#include <string>
#include <vector>

#include "phpav/encoder.hpp"
#include "phpav/params.hpp"
#include "phpav/rng.hpp"

// Task-specific modality-independent prompts: per task, per deep-band layer,
// per modality, a trainable [m,D] block prepended to the stream (replace-style
// across the band's layers). Each task's prompts are registered exactly once
// and never touched again after that task's stage, which is what pins its
// deep-band behavior for the rest of the sequence.

namespace phpav {

template <typename T>
struct TmiLayerPrompts {
  Tensor<T> p_v, p_a;  // [m,D]
};

template <typename T>
class TmiBank {
public:
  long m = 4, dim = 0, band_layers = 0;
  uint64_t seed = 0;

  void configure(long m_, long dim_, long band_layers_, uint64_t seed_) {
    if (m_ < 1 || dim_ < 1 || band_layers_ < 1)
      throw validation_error("tmi: m, dim, band layer count must be positive");
    m = m_;
    dim = dim_;
    band_layers = band_layers_;
    seed = seed_;
  }

  bool has(const std::string& task_id) const { return bank_.count(task_id) > 0; }

  // One-time registration; re-registering is an error, never a reset.
  void register_task(const std::string& task_id) {
    if (has(task_id)) throw validation_error("tmi: task already registered: " + task_id);
    std::vector<TmiLayerPrompts<T>> layers;
    for (long l = 0; l < band_layers; ++l) {
      TmiLayerPrompts<T> lp;
      Rng rv = Rng::derive(seed, "tmi:" + task_id + ":L" + std::to_string(l) + ":v");
      Rng ra = Rng::derive(seed, "tmi:" + task_id + ":L" + std::to_string(l) + ":a");
      lp.p_v = cast_tensor<T>(rv.normal_tensor<double>({m, dim}, 0.02));
      lp.p_a = cast_tensor<T>(ra.normal_tensor<double>({m, dim}, 0.02));
      layers.push_back(std::move(lp));
    }
    bank_.emplace(task_id, std::move(layers));
  }

  std::vector<TmiLayerPrompts<T>>& select(const std::string& task_id) {
    auto it = bank_.find(task_id);
    if (it == bank_.end()) throw validation_error("tmi: unknown task: " + task_id);
    return it->second;
  }
  const std::vector<TmiLayerPrompts<T>>& select(const std::string& task_id) const {
    auto it = bank_.find(task_id);
    if (it == bank_.end()) throw validation_error("tmi: unknown task: " + task_id);
    return it->second;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& task_id,
                       const std::string& prefix = "tmi") {
    auto& layers = select(task_id);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string base = prefix + "/" + task_id + "/L" + std::to_string(l);
      reg.add(base + "/p_v", &layers[l].p_v);
      reg.add(base + "/p_a", &layers[l].p_a);
    }
  }

  const std::map<std::string, std::vector<TmiLayerPrompts<T>>>& all() const { return bank_; }

private:
  std::map<std::string, std::vector<TmiLayerPrompts<T>>> bank_;
};

template <typename T>
struct TmiVars {
  std::vector<std::pair<Var<T>, Var<T>>> layers;  // (p_v, p_a) per band layer

  static TmiVars push(VarBinding<T>& vb, TmiBank<T>& bank, const std::string& task_id,
                      const std::string& prefix = "tmi") {
    TmiVars v;
    auto& layers = bank.select(task_id);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string base = prefix + "/" + task_id + "/L" + std::to_string(l);
      // bind as two statements: argument evaluation order is unspecified, and
      // the binding order must match registration order
      Var<T> pv = vb.param(base + "/p_v", layers[l].p_v);
      Var<T> pa = vb.param(base + "/p_a", layers[l].p_a);
      v.layers.emplace_back(pv, pa);
    }
    return v;
  }
};

// Prepend this band-layer's prompts to both streams.
template <typename T>
void tmi_apply(const TmiVars<T>& v, long band_layer, StreamState<T>& sv, StreamState<T>& sa) {
  if (band_layer < 0 || band_layer >= static_cast<long>(v.layers.size()))
    throw validation_error("tmi: band layer index out of range");
  const auto& [pv, pa] = v.layers[static_cast<size_t>(band_layer)];
  sv.tokens = prepend_rows3(pv, sv.tokens);
  sv.prompt_rows += pv.val().dim(0);
  sa.tokens = prepend_rows3(pa, sa.tokens);
  sa.prompt_rows += pa.val().dim(0);
}

}  // namespace phpav

#endif
