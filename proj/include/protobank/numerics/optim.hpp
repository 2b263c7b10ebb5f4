#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>

#include "protobank/error.hpp"
#include "protobank/numerics/autograd.hpp"
#include "protobank/numerics/tensor.hpp"

namespace protobank {

// Named learnable tensors. std::map keeps iteration order stable, which the
// optimizer and the serializer both rely on for bit-reproducibility.
using ParamSet = std::map<std::string, Tensor>;

// Binds a ParamSet onto a tape as gradient-tracked leaves.
class BoundParams {
 public:
  // track=false binds constants, for inference passes that never call backward().
  BoundParams(ag::Tape& tape, const ParamSet& params, bool track = true) {
    for (const auto& [name, t] : params) vars_.emplace(name, track ? tape.variable(t) : tape.constant(t));
  }

  ag::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw NumericError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  // Replaces one binding, e.g. with a leaf owned by a gradient check.
  void rebind(const std::string& name, ag::Var v) {
    if (!contains(name)) throw NumericError("unknown parameter '" + name + "'");
    vars_.insert_or_assign(name, v);
  }

  // Gradients after tape.backward(); unreached parameters get zeros.
  ParamSet grads() const {
    ParamSet out;
    for (const auto& [name, v] : vars_) out.emplace(name, v.tape->grad(v));
    return out;
  }

 private:
  std::map<std::string, ag::Var> vars_;
};

struct OptimizerState {
  double learning_rate = 0.005;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  ParamSet first_moment;
  ParamSet second_moment;
};

// Adaptive-moment update with decoupled weight decay (AdamW). Parameters
// absent from `grads` are left untouched, which is how freezing works.
inline void opt_step(ParamSet& params, const ParamSet& grads, OptimizerState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw NumericError("gradient for unknown parameter '" + name + "'");
    Tensor& p = pit->second;
    if (p.shape != g.shape) {
      throw NumericError("opt_step: shape mismatch for '" + name + "': " + shape_str(p.shape) +
                         " vs " + shape_str(g.shape));
    }
    auto [mit, m_new] = state.first_moment.try_emplace(name, Tensor(p.shape));
    auto [vit, v_new] = state.second_moment.try_emplace(name, Tensor(p.shape));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const double decay = 1.0 - state.learning_rate * state.weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] = p.data[i] * decay - state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
    }
    if (!p.all_finite()) throw NumericError("non-finite parameter '" + name + "' after update");
  }
}

}  // namespace protobank
