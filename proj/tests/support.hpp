#pragma once

// Shared helpers for the unit and acceptance suites: central finite
// differences and the per-op gradient audit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emcomm/autodiff.hpp"
#include "emcomm/random.hpp"
#include "emcomm/training.hpp"

namespace emcomm::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = uniform(rng, lo, hi);
  return t;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both are below `floor`.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::max(std::sqrt(na), std::sqrt(nb));
  if (den < floor) return 0.0;
  return std::sqrt(d) / den;
}

/// A graph over leaf inputs producing any-shaped output.
using Graph = std::function<ad::Var(std::vector<ad::Var>&)>;

/// Reduces `out` to a scalar with fixed random weights so every output entry
/// contributes.
inline ad::Var project(ad::Var out, const std::vector<double>& weights) {
  ad::Var w = out.tape->constant(Tensor(out.shape(), weights));
  return ad::sum(out * w);
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over all inputs of `g`.
inline double gradient_error(const Graph& g, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-5) {
  std::vector<double> weights;
  auto eval = [&](const std::vector<Tensor>& xs, std::vector<std::vector<double>>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    ad::Var out = g(vars);
    if (weights.empty()) {
      weights.resize(out.size());
      for (double& w : weights) w = uniform(rng, 0.5, 1.5);
    }
    ad::Var loss = project(out, weights);
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value().item();
  };
  std::vector<std::vector<double>> analytic;
  eval(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> numeric(inputs[k].size());
    std::vector<Tensor> xs = inputs;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double orig = xs[k].data[i];
      xs[k].data[i] = orig + h;
      const double fp = eval(xs, nullptr);
      xs[k].data[i] = orig - h;
      const double fm = eval(xs, nullptr);
      xs[k].data[i] = orig;
      numeric[i] = (fp - fm) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic[k], numeric));
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  Graph graph;
};

/// One randomized case per primitive (and the composite linear layer).
inline std::vector<OpCase> op_cases() {
  using ad::Var;
  std::vector<OpCase> c;
  auto shapes = [](std::vector<Shape> ss, double lo = -2.0, double hi = 2.0) {
    return [ss, lo, hi](Rng& rng) {
      std::vector<Tensor> out;
      for (const auto& s : ss) out.push_back(random_tensor(s, rng, lo, hi));
      return out;
    };
  };
  c.push_back({"matmul", shapes({{3, 4}, {4, 2}}), [](std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }});
  c.push_back({"bmm", shapes({{2, 3, 4}, {2, 4, 2}}), [](std::vector<Var>& v) { return ad::bmm(v[0], v[1]); }});
  c.push_back({"bmm_transposed", shapes({{2, 3, 4}, {2, 5, 4}}),
               [](std::vector<Var>& v) { return ad::bmm(v[0], v[1], true); }});
  c.push_back({"add", shapes({{2, 3}, {2, 3}}), [](std::vector<Var>& v) { return v[0] + v[1]; }});
  c.push_back({"add_broadcast", shapes({{2, 3, 4}, {4}}), [](std::vector<Var>& v) { return v[0] + v[1]; }});
  c.push_back({"sub_broadcast", shapes({{3}, {2, 3}}), [](std::vector<Var>& v) { return v[0] - v[1]; }});
  c.push_back({"mul", shapes({{2, 3}, {2, 3}}), [](std::vector<Var>& v) { return v[0] * v[1]; }});
  c.push_back({"mul_broadcast", shapes({{4, 3}, {3}}), [](std::vector<Var>& v) { return v[0] * v[1]; }});
  c.push_back({"scale", shapes({{5}}), [](std::vector<Var>& v) { return ad::scale(v[0], -1.7); }});
  c.push_back({"tanh", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::tanh(v[0]); }});
  c.push_back({"sigmoid", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::sigmoid(v[0]); }});
  c.push_back({"exp", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::exp(v[0]); }});
  c.push_back({"log", shapes({{2, 3}}, 0.1, 2.0), [](std::vector<Var>& v) { return ad::log(v[0]); }});
  c.push_back({"log_floored", shapes({{2, 3}}, 0.1, 2.0),
               [](std::vector<Var>& v) { return ad::log_floored(v[0], 1e-12); }});
  c.push_back({"gelu", shapes({{2, 4}}), [](std::vector<Var>& v) { return ad::gelu(v[0]); }});
  c.push_back({"softmax_last", shapes({{3, 4}}), [](std::vector<Var>& v) { return ad::softmax(v[0], 1); }});
  c.push_back({"softmax_middle", shapes({{2, 3, 2}}), [](std::vector<Var>& v) { return ad::softmax(v[0], 1); }});
  c.push_back({"log_softmax", shapes({{3, 4}}), [](std::vector<Var>& v) { return ad::log_softmax(v[0], 1); }});
  c.push_back({"log_softmax_first", shapes({{3, 2}}), [](std::vector<Var>& v) { return ad::log_softmax(v[0], 0); }});
  c.push_back({"layer_norm", shapes({{2, 5}}), [](std::vector<Var>& v) { return ad::layer_norm(v[0]); }});
  c.push_back({"sum", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::sum(v[0]); }});
  c.push_back({"mean", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::mean(v[0]); }});
  c.push_back({"sum_axis", shapes({{2, 3, 4}}), [](std::vector<Var>& v) { return ad::sum(v[0], 1); }});
  c.push_back({"mean_axis", shapes({{2, 3, 4}}), [](std::vector<Var>& v) { return ad::mean(v[0], 2); }});
  c.push_back({"reshape", shapes({{2, 6}}), [](std::vector<Var>& v) { return ad::reshape(v[0], Shape{3, 4}); }});
  c.push_back({"concat", shapes({{2, 3}, {2, 1}}), [](std::vector<Var>& v) { return ad::concat({v[0], v[1]}, 1); }});
  c.push_back({"slice", shapes({{3, 5}}), [](std::vector<Var>& v) { return ad::slice(v[0], 1, 1, 3); }});
  c.push_back({"permute", shapes({{2, 3, 4}}), [](std::vector<Var>& v) { return ad::permute(v[0], {2, 0, 1}); }});
  c.push_back({"expand", shapes({{2, 3}}), [](std::vector<Var>& v) { return ad::expand(v[0], 1, 4); }});
  c.push_back({"embedding", shapes({{5, 3}}), [](std::vector<Var>& v) {
                 const std::vector<std::size_t> ids{4, 0, 4, 2};
                 return ad::embedding(v[0], ids);
               }});
  c.push_back({"pick", shapes({{3, 4}}), [](std::vector<Var>& v) {
                 const std::vector<std::size_t> ids{1, 3, 0};
                 return ad::pick(v[0], ids);
               }});
  c.push_back({"linear", shapes({{2, 3, 4}, {4, 2}, {2}}),
               [](std::vector<Var>& v) { return ad::linear(v[0], v[1], v[2]); }});
  c.push_back({"fan_out", shapes({{3}}), [](std::vector<Var>& v) { return v[0] * ad::tanh(v[0]) + v[0]; }});
  return c;
}

// ---------------------------------------------------------------------------
// Whole-loss gradient checks on a micro world.

inline WorldSpec micro_world_spec() {
  WorldSpec s;
  s.values = 4;
  s.k = 2;
  s.grid_h = 1;
  s.grid_w = 2;  // A = 2
  s.dim = 3;
  s.split_train = 4;
  s.split_eval = 2;
  return s;
}

inline TrainConfig micro_config(Architecture arch, AttentionMode speaker, AttentionMode listener) {
  TrainConfig c;
  c.architecture = arch;
  c.speaker_mode = speaker;
  c.listener_mode = listener;
  c.sizes.vocab = 4;
  c.sizes.length = 2;
  c.sizes.hidden = 8;
  c.candidates = 3;
  return c;
}

/// Directional derivative check of f over every tensor of `store` (g . d
/// against (f(x + h d) - f(x - h d)) / 2h for a random unit d), plus a full
/// check of one random tensor.
/// `f` must rebuild its graph from `store`; `grad` must leave gradients in
/// store's grad buffers.
inline double loss_gradient_error(ParamStore& store, const std::function<double(bool)>& f, Rng& rng, double h = 1e-5) {
  store.zero_grad();
  f(true);
  std::vector<std::vector<double>> dirs;
  double analytic = 0, norm = 0;
  for (auto& [_, t] : store) {
    std::vector<double> d(t.size());
    for (double& x : d) {
      x = standard_normal(rng);
      norm += x * x;
    }
    dirs.push_back(std::move(d));
  }
  norm = std::sqrt(norm);
  std::size_t k = 0;
  for (auto& [_, t] : store) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      dirs[k][i] /= norm;
      analytic += t.grad[i] * dirs[k][i];
    }
    ++k;
  }
  auto shift = [&](double s) {
    std::size_t j = 0;
    for (auto& [_, t] : store) {
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += s * dirs[j][i];
      ++j;
    }
  };
  shift(h);
  const double fp = f(false);
  shift(-2 * h);
  const double fm = f(false);
  shift(h);
  const double numeric = (fp - fm) / (2 * h);
  double worst = relative_error({analytic}, {numeric}, 1e-10);

  // Full central differences on one randomly chosen tensor.
  auto it = store.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(uniform_index(rng, store.size())));
  Tensor& t = it->second;
  std::vector<double> fd(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double orig = t.data[i];
    t.data[i] = orig + h;
    const double a = f(false);
    t.data[i] = orig - h;
    const double b = f(false);
    t.data[i] = orig;
    fd[i] = (a - b) / (2 * h);
  }
  return std::max(worst, relative_error(t.grad, fd));
}

struct LossAudit {
  double speaker = 0.0;
  double listener = 0.0;
};

/// Gradient audit of the combined speaker loss and the listener loss for one
/// randomized configuration. Sampled messages and rewards are frozen so the
/// objective is a smooth function of the parameters.
inline LossAudit audit_losses(Architecture arch, AttentionMode sm, AttentionMode lm, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 99));
  const World world = World::build(micro_world_spec(), seed);
  TrainConfig cfg = micro_config(arch, sm, lm);
  AgentPair agents = make_agents(cfg, world, seed);
  // Move the EMA away from the live weights so the KL term is active.
  ParamStore ema = agents.speaker_params;
  for (auto& [_, t] : ema)
    for (double& v : t.data) v += 0.1 * standard_normal(rng);

  const std::size_t n = 3;
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < n; ++i) eps.push_back(sample_episode(world, Split::train, cfg.candidates, rng));
  std::vector<std::size_t> message;
  for (std::size_t i = 0; i < n * cfg.sizes.length; ++i) message.push_back(uniform_index(rng, cfg.sizes.vocab));
  std::vector<double> rewards;
  for (std::size_t i = 0; i < n; ++i) rewards.push_back(uniform(rng, -1.0, 1.0));
  const double alpha = uniform(rng, 0.0, 0.5), beta = uniform(rng, 0.0, 0.5);
  std::vector<std::size_t> targets;
  for (const auto& e : eps) targets.push_back(e.target_index);

  std::vector<const ObjectInstance*> spk, cand;
  for (const auto& e : eps) {
    spk.push_back(&e.speaker_instance);
    for (const auto& c : e.candidates) cand.push_back(&c);
  }

  auto speaker_f = [&](bool grad) {
    ad::Tape tape;
    const Bound p(tape, agents.speaker_params, grad);
    const Bound e(tape, ema);
    const ad::Var patches = patch_batch(tape, spk);
    const SpeakerOutput live = agents.speaker.run(p, patches, DecodeMode::forced, nullptr, message);
    const SpeakerOutput anchor = agents.speaker.run(e, patches, DecodeMode::forced, nullptr, message);
    const SpeakerLoss loss = speaker_loss(live, rewards, anchor.log_probs, alpha, beta);
    const double v = loss.combined.value().item();
    if (grad) tape.backward(loss.combined);
    return v;
  };
  auto listener_f = [&](bool grad) {
    ad::Tape tape;
    const Bound p(tape, agents.listener_params, grad);
    const ad::Var flat = patch_batch(tape, cand);
    const ad::Var c = ad::reshape(flat, Shape{n, cfg.candidates, flat.dim(1), flat.dim(2)});
    const ListenerOutput out = agents.listener.run(p, message, c);
    const ad::Var loss = listener_loss(out.scores, targets);
    const double v = loss.value().item();
    if (grad) tape.backward(loss);
    return v;
  };
  LossAudit a;
  a.speaker = loss_gradient_error(agents.speaker_params, speaker_f, rng);
  a.listener = loss_gradient_error(agents.listener_params, listener_f, rng);
  return a;
}

}  // namespace emcomm::testing
