#pragma once

// REINFORCE training of the Speaker with entropy and EMA-KL regularizers,
// cross-entropy training of the Listener, and accuracy evaluation.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emcomm/agents.hpp"
#include "emcomm/autodiff.hpp"
#include "emcomm/optim.hpp"
#include "emcomm/params.hpp"
#include "emcomm/world.hpp"

namespace emcomm {

inline double reward(std::size_t chosen_index, std::size_t target_index) {
  return chosen_index == target_index ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kLogFloor = 1e-12;

struct SpeakerLossTerms {
  double policy = 0.0;    // mean over the batch of -r * sum_t log pi(m_t)
  double entropy = 0.0;   // mean of -sum_t H(pi(.|t))
  double kl = 0.0;        // mean of sum_t KL(pi || pi_ema)
  double combined = 0.0;  // policy + alpha * entropy + beta * kl
  double alpha = 0.0;
  double beta = 0.0;
};

struct SpeakerLoss {
  ad::Var combined;
  SpeakerLossTerms terms;
};

/// Speaker objective for a batch of N decoded messages.
///
/// `ema_log_probs` [N, T, V] must come from the EMA policy evaluated on the
/// same targets with the same symbol prefixes; it is treated as a constant.
inline SpeakerLoss speaker_loss(const SpeakerOutput& out, std::span<const double> rewards, ad::Var ema_log_probs,
                                double alpha, double beta) {
  const std::size_t n = out.probs.dim(0);
  if (rewards.size() != n) throw DimensionError("speaker_loss: reward count does not match batch");
  if (ema_log_probs.shape() != out.probs.shape()) {
    throw DimensionError("speaker_loss: EMA distributions " + shape_str(ema_log_probs.shape()) + " vs live " +
                         shape_str(out.probs.shape()));
  }
  ad::Tape& tape = *out.probs.tape;
  const double inv_n = 1.0 / static_cast<double>(n);

  // Policy term: -r * sum_t log max(pi(m_t|t), 1e-12).
  const ad::Var chosen = ad::pick(out.probs, out.messages);  // [N, T]
  const ad::Var logp = ad::sum(ad::log_floored(chosen, kLogFloor), 1);  // [N]
  std::vector<double> neg_r(rewards.begin(), rewards.end());
  for (double& r : neg_r) r = -r;
  const ad::Var policy = ad::scale(ad::sum(tape.constant(Tensor(Shape{n}, neg_r)) * logp), inv_n);

  // Entropy term: -sum_t H_t = sum_t sum_v p log p.
  const ad::Var neg_entropy = ad::scale(ad::sum(out.probs * out.log_probs), inv_n);

  // KL(pi || pi_ema) = sum_v p (log p - log q).
  const ad::Var q = ad::detach(ema_log_probs);
  const ad::Var kl = ad::scale(ad::sum(out.probs * (out.log_probs - q)), inv_n);

  const ad::Var combined = policy + ad::scale(neg_entropy, alpha) + ad::scale(kl, beta);
  SpeakerLoss loss{combined, {}};
  loss.terms.policy = policy.value().item();
  loss.terms.entropy = neg_entropy.value().item();
  loss.terms.kl = kl.value().item();
  loss.terms.combined = combined.value().item();
  loss.terms.alpha = alpha;
  loss.terms.beta = beta;
  return loss;
}

/// Mean cross-entropy of softmax(scores) [N, C] at the target indices.
inline ad::Var listener_loss(ad::Var scores, std::span<const std::size_t> targets) {
  if (scores.rank() != 2 || scores.dim(0) != targets.size()) {
    throw DimensionError("listener_loss: scores " + shape_str(scores.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const ad::Var logp = ad::pick(ad::log_softmax(scores, 1), targets);
  return ad::scale(ad::sum(logp), -1.0 / static_cast<double>(targets.size()));
}

/// Scalar convenience form for a single candidate set.
inline double listener_loss(std::span<const double> scores, std::size_t target) {
  ad::Tape tape;
  const ad::Var s = tape.constant(Tensor(Shape{1, scores.size()}, std::vector<double>(scores.begin(), scores.end())));
  const std::size_t t[1] = {target};
  return listener_loss(s, t).value().item();
}

// ---------------------------------------------------------------------------
// EMA policy

struct EmaPolicy {
  ParamStore shadow;
  double decay = 0.99;
};

/// ema <- decay * ema + (1 - decay) * live, tensor by tensor.
inline void ema_update(EmaPolicy& ema, const ParamStore& live) {
  if (ema.shadow.size() != live.size()) throw ContractError("ema_update: parameter sets differ");
  auto it = live.begin();
  for (auto& [name, shadow] : ema.shadow) {
    const auto& [live_name, t] = *it++;
    if (name != live_name || shadow.shape != t.shape) {
      throw ContractError("ema_update: shape mismatch at '" + name + "'");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      shadow.data[i] = ema.decay * shadow.data[i] + (1.0 - ema.decay) * t.data[i];
    }
  }
}

inline EmaPolicy make_ema(const ParamStore& live, double decay) {
  EmaPolicy ema;
  ema.decay = decay;
  for (const auto& [name, t] : live) ema.shadow.add(name, Tensor(t.shape, t.data));
  return ema;
}

// ---------------------------------------------------------------------------
// Agents and configuration

struct AgentPair {
  Speaker speaker;
  Listener listener;
  ParamStore speaker_params;
  ParamStore listener_params;
};

struct TrainConfig {
  Architecture architecture = Architecture::transformer;
  AttentionMode speaker_mode = AttentionMode::at;
  AttentionMode listener_mode = AttentionMode::at;
  std::optional<AttentionKind> listener_attention;  // defaults per architecture
  AgentSizes sizes;                 // patches and feature_dim are taken from the world
  std::size_t batch_size = 480;
  std::size_t max_steps = 50000;
  std::size_t candidates = 15;
  double alpha = 0.01;
  double beta = 0.1;
  double lr = 1e-4;
  double ema_decay = 0.99;
  bool reward_baseline = false;
  DistractorPool distractors = DistractorPool::same_split;
  std::size_t log_interval = 100;
  bool log_timing = false;
};

inline AgentPair make_agents(const TrainConfig& cfg, const World& world, std::uint64_t seed) {
  AgentSizes sizes = cfg.sizes;
  sizes.patches = world.patches();
  sizes.feature_dim = world.dim();
  AgentPair pair{Speaker(cfg.architecture, cfg.speaker_mode, sizes),
                 Listener(cfg.architecture, cfg.listener_mode, sizes, cfg.listener_attention),
                 {},
                 {}};
  Rng speaker_rng(derive_seed(seed, 10));
  Rng listener_rng(derive_seed(seed, 11));
  pair.speaker_params = pair.speaker.init_params(speaker_rng);
  pair.listener_params = pair.listener.init_params(listener_rng);
  return pair;
}

// ---------------------------------------------------------------------------
// Playing episodes

struct EpisodeTrace {
  std::vector<std::size_t> message;
  std::vector<std::vector<double>> step_distributions;  // T x V
  Tensor speaker_attention;                             // [T, A']
  Tensor listener_attention;                            // [C, T, A']
  std::vector<double> scores;
  std::size_t chosen = 0;
  std::size_t target_index = 0;
  double reward = 0.0;
};

struct BatchPlay {
  ad::Var speaker_patches;  // [N, A, D]
  SpeakerOutput speaker;
  ListenerOutput listener;
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> targets;
  std::vector<double> rewards;
};

/// One forward pass of both agents over `episodes` on `tape`.
inline BatchPlay play_batch(ad::Tape& tape, const AgentPair& agents, const Bound& speaker_p, const Bound& listener_p,
                            std::span<const Episode> episodes, DecodeMode mode, Rng* rng) {
  const std::size_t n = episodes.size();
  const std::size_t c = episodes[0].candidates.size();
  std::vector<const ObjectInstance*> spk, cand;
  for (const auto& ep : episodes) {
    if (ep.candidates.size() != c) throw DimensionError("play_batch: ragged candidate sets");
    spk.push_back(&ep.speaker_instance);
    for (const auto& ci : ep.candidates) cand.push_back(&ci);
  }
  const ad::Var spk_patches = patch_batch(tape, spk);
  const ad::Var cand_flat = patch_batch(tape, cand);
  const ad::Var cand_patches = ad::reshape(cand_flat, Shape{n, c, cand_flat.dim(1), cand_flat.dim(2)});
  BatchPlay out;
  out.speaker_patches = spk_patches;
  out.speaker = agents.speaker.run(speaker_p, spk_patches, mode, rng);
  out.listener = agents.listener.run(listener_p, out.speaker.messages, cand_patches);
  const Tensor& sv = out.listener.scores.value();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t choice = argmax(std::span<const double>(sv.data.data() + i * c, c));
    out.chosen.push_back(choice);
    out.targets.push_back(episodes[i].target_index);
    out.rewards.push_back(reward(choice, episodes[i].target_index));
  }
  return out;
}

/// Greedy play returning full per-episode traces.
inline std::vector<EpisodeTrace> trace_episodes(const AgentPair& agents, std::span<const Episode> episodes) {
  std::vector<EpisodeTrace> traces;
  if (episodes.empty()) return traces;
  ad::Tape tape;
  const Bound speaker_p(tape, agents.speaker_params), listener_p(tape, agents.listener_params);
  const BatchPlay play = play_batch(tape, agents, speaker_p, listener_p, episodes, DecodeMode::greedy, nullptr);
  const std::size_t t_len = agents.speaker.sizes().length, v = agents.speaker.sizes().vocab;
  const std::size_t c = episodes[0].candidates.size();
  const Tensor& probs = play.speaker.probs.value();
  const Tensor& sa = play.speaker.attention;
  const Tensor& la = play.listener.attention;
  const Tensor& scores = play.listener.scores.value();
  const std::size_t a_s = sa.dim(2), a_l = la.dim(3);
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    EpisodeTrace tr;
    tr.message.assign(play.speaker.messages.begin() + static_cast<std::ptrdiff_t>(i * t_len),
                      play.speaker.messages.begin() + static_cast<std::ptrdiff_t>((i + 1) * t_len));
    for (std::size_t t = 0; t < t_len; ++t) {
      const double* row = probs.data.data() + (i * t_len + t) * v;
      tr.step_distributions.emplace_back(row, row + v);
    }
    tr.speaker_attention = Tensor(Shape{t_len, a_s}, std::vector<double>(sa.data.begin() + static_cast<std::ptrdiff_t>(i * t_len * a_s),
                                                                         sa.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * t_len * a_s)));
    const std::size_t lsz = c * t_len * a_l;
    tr.listener_attention = Tensor(Shape{c, t_len, a_l}, std::vector<double>(la.data.begin() + static_cast<std::ptrdiff_t>(i * lsz),
                                                                             la.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * lsz)));
    tr.scores.assign(scores.data.begin() + static_cast<std::ptrdiff_t>(i * c),
                     scores.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    tr.chosen = play.chosen[i];
    tr.target_index = play.targets[i];
    tr.reward = play.rewards[i];
    traces.push_back(std::move(tr));
  }
  return traces;
}

/// Fraction of `rounds` episodes from `split` solved with greedy decoding.
/// Deterministic in `seed`.
inline double evaluate(const AgentPair& agents, const World& world, Split split, std::size_t rounds,
                       std::size_t candidates, std::uint64_t seed,
                       DistractorPool pool = DistractorPool::same_split, std::size_t chunk = 256) {
  if (rounds == 0) return 0.0;
  Rng rng(derive_seed(seed, 20));
  std::size_t wins = 0;
  for (std::size_t done = 0; done < rounds; done += chunk) {
    const std::size_t n = std::min(chunk, rounds - done);
    std::vector<Episode> eps;
    eps.reserve(n);
    for (std::size_t i = 0; i < n; ++i) eps.push_back(sample_episode(world, split, candidates, rng, pool));
    ad::Tape tape;
    const Bound speaker_p(tape, agents.speaker_params), listener_p(tape, agents.listener_params);
    const BatchPlay play = play_batch(tape, agents, speaker_p, listener_p, eps, DecodeMode::greedy, nullptr);
    for (double r : play.rewards) wins += r > 0.5 ? 1 : 0;
  }
  return static_cast<double>(wins) / static_cast<double>(rounds);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRecord {
  std::size_t step = 0;
  double train_acc = 0.0;
  double policy_loss = 0.0;
  double entropy = 0.0;
  double kl = 0.0;
  double listener_loss = 0.0;
  double msg_entropy = 0.0;  // empirical entropy (nats) of messages sent in the interval
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRecord> records;

  std::string csv() const {
    std::string out = "step,train_acc,policy_loss,entropy,kl,listener_loss,msg_entropy,seconds\n";
    char buf[256];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.step, r.train_acc,
                    r.policy_loss, r.entropy, r.kl, r.listener_loss, r.msg_entropy, r.seconds);
      out += buf;
    }
    return out;
  }
};

struct TrainingAborted : NumericError {
  TrainingAborted(const std::string& what, TrainLogRecord at) : NumericError(what), record(at) {}
  TrainLogRecord record;
};

struct TrainResult {
  AgentPair agents;
  TrainLog log;
};

/// Entropy in nats of the empirical distribution of `messages` (rows of T).
inline double message_entropy(std::span<const std::size_t> messages, std::size_t t_len) {
  std::map<std::vector<std::size_t>, std::size_t> counts;
  const std::size_t n = messages.size() / t_len;
  for (std::size_t i = 0; i < n; ++i) {
    counts[std::vector<std::size_t>(messages.begin() + static_cast<std::ptrdiff_t>(i * t_len),
                                    messages.begin() + static_cast<std::ptrdiff_t>((i + 1) * t_len))]++;
  }
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(n);
    h -= p * std::log(p);
  }
  return h;
}

/// Trains a fresh agent pair. Bit-reproducible in (world, cfg, seed).
inline TrainResult train(const World& world, const TrainConfig& cfg, std::uint64_t seed,
                         const std::function<void(const TrainLogRecord&)>& on_log = {}) {
  TrainResult result{make_agents(cfg, world, seed), {}};
  AgentPair& agents = result.agents;
  EmaPolicy ema = make_ema(agents.speaker_params, cfg.ema_decay);
  Adam speaker_opt(AdamConfig{cfg.lr}), listener_opt(AdamConfig{cfg.lr});
  Rng episode_rng(derive_seed(seed, 12));
  Rng sample_rng(derive_seed(seed, 13));
  const auto start = std::chrono::steady_clock::now();
  const std::size_t t_len = agents.speaker.sizes().length;

  TrainLogRecord acc;
  std::size_t acc_steps = 0;
  std::vector<std::size_t> interval_messages;

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<Episode> eps;
    eps.reserve(cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      eps.push_back(sample_episode(world, Split::train, cfg.candidates, episode_rng, cfg.distractors));
    }
    agents.speaker_params.zero_grad();
    agents.listener_params.zero_grad();

    double listener_value = 0.0;
    SpeakerLossTerms terms;
    BatchPlay play;
    try {
      ad::Tape tape;
      const Bound speaker_p(tape, agents.speaker_params, true);
      const Bound listener_p(tape, agents.listener_params, true);
      const Bound ema_p(tape, ema.shadow);
      play = play_batch(tape, agents, speaker_p, listener_p, eps, DecodeMode::sample, &sample_rng);
      const SpeakerOutput ema_out =
          agents.speaker.run(ema_p, play.speaker_patches, DecodeMode::forced, nullptr, play.speaker.messages);
      std::vector<double> r = play.rewards;
      if (cfg.reward_baseline) {
        double mean_r = 0.0;
        for (double x : r) mean_r += x;
        mean_r /= static_cast<double>(r.size());
        for (double& x : r) x -= mean_r;
      }
      const SpeakerLoss sl = speaker_loss(play.speaker, r, ema_out.log_probs, cfg.alpha, cfg.beta);
      const ad::Var ll = listener_loss(play.listener.scores, play.targets);
      terms = sl.terms;
      listener_value = ll.value().item();
      tape.backward(sl.combined + ll);
      speaker_opt.step(agents.speaker_params);
      listener_opt.step(agents.listener_params);
    } catch (const NumericError& e) {
      TrainLogRecord diag = acc;
      diag.step = step;
      throw TrainingAborted("training diverged at step " + std::to_string(step) + ": " + e.what(), diag);
    }
    ema_update(ema, agents.speaker_params);

    double wins = 0.0;
    for (double r : play.rewards) wins += r;
    acc.train_acc += wins / static_cast<double>(play.rewards.size());
    acc.policy_loss += terms.policy;
    acc.entropy += terms.entropy;
    acc.kl += terms.kl;
    acc.listener_loss += listener_value;
    interval_messages.insert(interval_messages.end(), play.speaker.messages.begin(), play.speaker.messages.end());
    ++acc_steps;

    if (step % cfg.log_interval == 0 || step == cfg.max_steps) {
      const double k = static_cast<double>(acc_steps);
      TrainLogRecord rec{step,
                         acc.train_acc / k,
                         acc.policy_loss / k,
                         acc.entropy / k,
                         acc.kl / k,
                         acc.listener_loss / k,
                         message_entropy(interval_messages, t_len),
                         0.0};
      if (cfg.log_timing) {
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      result.log.records.push_back(rec);
      if (on_log) on_log(rec);
      acc = {};
      acc_steps = 0;
      interval_messages.clear();
    }
  }
  return result;
}

}  // namespace emcomm
