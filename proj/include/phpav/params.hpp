#ifndef PHPAV_PARAMS_HPP
#define PHPAV_PARAMS_HPP

#include <string>
#include <utility>
#include <vector>

#include "phpav/graph.hpp"

// Named-parameter plumbing shared by all trainable modules. A ParamRegistry
// is the flat inventory of a run's trainable tensors (optimizer + checkpoint
// + freezing-ledger view); a VarBinding records which graph Var each tensor
// was pushed as during one forward build, so gradients can be routed back to
// storage by name.

namespace phpav {

template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<T>*>> entries;

  void add(const std::string& name, Tensor<T>* t) {
    for (auto& [n, _] : entries)
      if (n == name) throw validation_error("duplicate parameter name: " + name);
    entries.emplace_back(name, t);
  }

  Tensor<T>* find(const std::string& name) const {
    for (auto& [n, t] : entries)
      if (n == name) return t;
    return nullptr;
  }

  long total_scalars() const {
    long n = 0;
    for (auto& [_, t] : entries) n += t->numel();
    return n;
  }
};

template <typename T>
class VarBinding {
public:
  // A non-trainable binding (eval / frozen forward) pushes every tensor as a
  // plain constant and records nothing, through the same call sites.
  explicit VarBinding(Graph<T>& g, bool trainable = true) : g_(&g), trainable_(trainable) {}

  // Push trainable storage into the graph; remembered under `name`.
  Var<T> param(const std::string& name, const Tensor<T>& t) {
    if (!trainable_) return g_->input(t);
    Var<T> v = g_->param(t);
    bound_.emplace_back(name, v);
    return v;
  }

  // Frozen values enter as constants and are never remembered.
  Var<T> frozen(const Tensor<T>& t) { return g_->input(t); }

  const std::vector<std::pair<std::string, Var<T>>>& bound() const { return bound_; }

  const Var<T>* find(const std::string& name) const {
    for (auto& [n, v] : bound_)
      if (n == name) return &v;
    return nullptr;
  }

  Graph<T>& graph() { return *g_; }
  bool trainable() const { return trainable_; }

private:
  Graph<T>* g_;
  bool trainable_ = true;
  std::vector<std::pair<std::string, Var<T>>> bound_;
};

}  // namespace phpav

#endif
