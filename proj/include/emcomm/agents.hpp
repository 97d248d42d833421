#pragma once

// Speaker and Listener agents for the referential game.
//
// Every agent owns an object encoder (per-patch linear map + gelu). NoAT
// agents mean-pool the encoded patches into a single key and then run the
// exact same attention code as AT agents, so both variants share module and
// parameter layouts.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emcomm/autodiff.hpp"
#include "emcomm/params.hpp"
#include "emcomm/random.hpp"
#include "emcomm/tensor.hpp"
#include "emcomm/world.hpp"

namespace emcomm {

enum class Architecture { lstm, transformer };
enum class AttentionMode { at, noat };
enum class AttentionKind { bilinear, scaled_dot, dot };

inline std::string to_string(Architecture a) { return a == Architecture::lstm ? "lstm" : "transformer"; }
inline std::string to_string(AttentionMode m) { return m == AttentionMode::at ? "at" : "noat"; }
inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::bilinear: return "bilinear";
    case AttentionKind::scaled_dot: return "scaled_dot";
    case AttentionKind::dot: return "dot";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "lstm") return Architecture::lstm;
  if (s == "transformer") return Architecture::transformer;
  throw ConfigError("unknown architecture '" + s + "'");
}
inline AttentionMode parse_mode(const std::string& s) {
  if (s == "at") return AttentionMode::at;
  if (s == "noat") return AttentionMode::noat;
  throw ConfigError("unknown attention mode '" + s + "'");
}
inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "bilinear") return AttentionKind::bilinear;
  if (s == "scaled_dot") return AttentionKind::scaled_dot;
  if (s == "dot") return AttentionKind::dot;
  throw ConfigError("unknown attention kind '" + s + "'");
}

struct AgentSizes {
  std::size_t vocab = 20;        // V
  std::size_t length = 2;        // T
  std::size_t hidden = 256;      // H
  std::size_t patches = 49;      // A
  std::size_t feature_dim = 768; // D
  std::size_t ffn = 0;           // transformer feed-forward width; 0 means H

  std::size_t ffn_width() const { return ffn == 0 ? hidden : ffn; }
};

// ---------------------------------------------------------------------------
// Shared building blocks

/// Packs instance features into a [N, A, D] constant.
inline ad::Var patch_batch(ad::Tape& tape, std::span<const ObjectInstance* const> instances) {
  if (instances.empty()) throw ContractError("patch_batch: no instances");
  const std::size_t a = instances[0]->patches(), d = instances[0]->dim;
  Tensor t(Shape{instances.size(), a, d});
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const ObjectInstance& inst = *instances[i];
    if (inst.patches() != a || inst.dim != d) throw DimensionError("patch_batch: ragged instances");
    std::copy(inst.features.begin(), inst.features.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * a * d));
  }
  return tape.constant(std::move(t));
}

/// Per-patch linear D->H followed by gelu; NoAT additionally averages the A
/// encoded patches into one vector. [N, A, D] -> [N, A, H] or [N, 1, H].
inline ad::Var encode_objects(const Bound& p, ad::Var patches, AttentionMode mode) {
  const ad::Var w = p["encoder.weight"];
  if (patches.rank() != 3 || patches.dim(2) != w.dim(0)) {
    throw DimensionError("encode_objects: expected [N x A x " + std::to_string(w.dim(0)) + "] patches, got " +
                         shape_str(patches.shape()));
  }
  if (patches.dim(1) == 0) throw ContractError("encode_objects: no patches");
  ad::Var h = ad::gelu(ad::linear(patches, w, p["encoder.bias"]));
  if (mode == AttentionMode::at) return h;
  const std::size_t n = h.dim(0), hidden = h.dim(2);
  return ad::reshape(ad::mean(h, 1), Shape{n, 1, hidden});
}

struct AttentionProjections {
  std::optional<ad::Var> bilinear;  // W_b [H x H]
  std::optional<ad::Var> query, key, value;
};

struct AttentionResult {
  ad::Var weights;  // [N, Q, A]
  ad::Var context;  // [N, Q, H]
};

/// Attention of queries [N, Q, H] over key-value vectors [N, A, H].
///
/// bilinear:   s = x^T W_b o, context over the raw key-values.
/// scaled_dot: s = q.k / sqrt(d); with projections q = x W_q, k = o W_k and
///             the context is over v = o W_v, otherwise over the raw vectors.
/// dot:        s = x.o, context over the raw key-values.
inline AttentionResult attend(ad::Var query, ad::Var keyvalues, AttentionKind kind,
                              const AttentionProjections& proj = {}) {
  if (keyvalues.rank() != 3 || keyvalues.dim(1) == 0) {
    throw ContractError("attend: need at least one key-value vector, got " + shape_str(keyvalues.shape()));
  }
  if (query.rank() != 3 || query.dim(0) != keyvalues.dim(0)) {
    throw DimensionError("attend: query " + shape_str(query.shape()) + " vs key-values " +
                         shape_str(keyvalues.shape()));
  }
  ad::Var scores{}, values = keyvalues;
  switch (kind) {
    case AttentionKind::bilinear: {
      if (!proj.bilinear) throw ContractError("attend: bilinear attention needs W_b");
      scores = ad::bmm(ad::linear(query, *proj.bilinear), keyvalues, true);
      break;
    }
    case AttentionKind::scaled_dot: {
      ad::Var q = query, k = keyvalues;
      if (proj.query) {
        q = ad::linear(query, *proj.query);
        k = ad::linear(keyvalues, *proj.key);
        values = ad::linear(keyvalues, *proj.value);
      }
      const double d = static_cast<double>(q.dim(2));
      scores = ad::scale(ad::bmm(q, k, true), 1.0 / std::sqrt(d));
      break;
    }
    case AttentionKind::dot:
      scores = ad::bmm(query, keyvalues, true);
      break;
  }
  ad::Var weights = ad::softmax(scores, 2);
  return {weights, ad::bmm(weights, values)};
}

namespace detail {

struct LstmState {
  ad::Var h, c;
};

inline LstmState lstm_cell(const Bound& p, const std::string& prefix, ad::Var x, LstmState s) {
  const std::size_t hidden = s.h.dim(1);
  ad::Var gates = ad::linear(x, p[prefix + ".w_ih"], p[prefix + ".bias"]) + ad::linear(s.h, p[prefix + ".w_hh"]);
  ad::Var i = ad::sigmoid(ad::slice(gates, 1, 0, hidden));
  ad::Var f = ad::sigmoid(ad::slice(gates, 1, hidden, hidden));
  ad::Var g = ad::tanh(ad::slice(gates, 1, 2 * hidden, hidden));
  ad::Var o = ad::sigmoid(ad::slice(gates, 1, 3 * hidden, hidden));
  ad::Var c = f * s.c + i * g;
  return {o * ad::tanh(c), c};
}

inline void add_lstm(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
  ps.add_glorot(prefix + ".w_ih", in, 4 * hidden, rng);
  ps.add_glorot(prefix + ".w_hh", hidden, 4 * hidden, rng);
  ps.add_constant(prefix + ".bias", Shape{4 * hidden}, 0.0);
}

inline void add_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t hidden) {
  ps.add_constant(prefix + ".gain", Shape{hidden}, 1.0);
  ps.add_constant(prefix + ".bias", Shape{hidden}, 0.0);
}

inline ad::Var layer_norm(const Bound& p, const std::string& prefix, ad::Var x) {
  return ad::layer_norm(x) * p[prefix + ".gain"] + p[prefix + ".bias"];
}

inline void add_projections(ParamStore& ps, const std::string& prefix, std::size_t hidden, Rng& rng) {
  for (const char* m : {".w_q", ".w_k", ".w_v", ".w_o"}) ps.add_glorot(prefix + m, hidden, hidden, rng);
}

inline AttentionProjections projections(const Bound& p, const std::string& prefix) {
  AttentionProjections a;
  a.query = p[prefix + ".w_q"];
  a.key = p[prefix + ".w_k"];
  a.value = p[prefix + ".w_v"];
  return a;
}

inline void add_ffn(ParamStore& ps, std::size_t hidden, std::size_t width, Rng& rng) {
  ps.add_glorot("ffn.w1", hidden, width, rng);
  ps.add_constant("ffn.b1", Shape{width}, 0.0);
  ps.add_glorot("ffn.w2", width, hidden, rng);
  ps.add_constant("ffn.b2", Shape{hidden}, 0.0);
}

inline ad::Var ffn(const Bound& p, ad::Var x) {
  return ad::linear(ad::gelu(ad::linear(x, p["ffn.w1"], p["ffn.b1"])), p["ffn.w2"], p["ffn.b2"]);
}

inline std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Speaker

enum class DecodeMode { sample, greedy, forced };

struct SpeakerOutput {
  std::vector<std::size_t> messages;  // N x T symbol ids, row-major
  ad::Var log_probs;                  // [N, T, V]
  ad::Var probs;                      // [N, T, V]
  Tensor attention;                   // [N, T, A'] where A' = A (AT) or 1 (NoAT)
};

class Speaker {
 public:
  Speaker(Architecture arch, AttentionMode mode, AgentSizes sizes) : arch_(arch), mode_(mode), sizes_(sizes) {}

  Architecture architecture() const { return arch_; }
  AttentionMode mode() const { return mode_; }
  const AgentSizes& sizes() const { return sizes_; }
  std::size_t bos() const { return sizes_.vocab; }

  ParamStore init_params(Rng& rng) const {
    ParamStore ps;
    const std::size_t h = sizes_.hidden, v = sizes_.vocab;
    ps.add_glorot("encoder.weight", sizes_.feature_dim, h, rng);
    ps.add_constant("encoder.bias", Shape{h}, 0.0);
    ps.add_glorot("embedding", v + 1, h, rng);
    if (arch_ == Architecture::lstm) {
      detail::add_lstm(ps, "lstm", h, h, rng);
      ps.add_glorot("attention.w_b", h, h, rng);
      ps.add_glorot("post.weight", 2 * h, h, rng);
      ps.add_constant("post.bias", Shape{h}, 0.0);
    } else {
      ps.add_glorot("position", sizes_.length, h, rng);
      detail::add_projections(ps, "self_attention", h, rng);
      detail::add_layer_norm(ps, "norm1", h);
      detail::add_projections(ps, "cross_attention", h, rng);
      detail::add_layer_norm(ps, "norm2", h);
      detail::add_ffn(ps, h, sizes_.ffn_width(), rng);
      detail::add_layer_norm(ps, "norm3", h);
    }
    ps.add_glorot("output.weight", h, v, rng);
    ps.add_constant("output.bias", Shape{v}, 0.0);
    return ps;
  }

  /// Decodes T symbols for each target in `patches` [N, A, D]. `forced`
  /// supplies the N x T symbols in forced mode; `rng` is required in sample
  /// mode only.
  SpeakerOutput run(const Bound& p, ad::Var patches, DecodeMode mode, Rng* rng = nullptr,
                    std::span<const std::size_t> forced = {}) const {
    const std::size_t n = patches.dim(0), t_len = sizes_.length, v = sizes_.vocab, h = sizes_.hidden;
    if (mode == DecodeMode::sample && rng == nullptr) throw ContractError("speaker: sample mode needs an rng");
    if (mode == DecodeMode::forced && forced.size() != n * t_len) {
      throw DimensionError("speaker: forced message buffer has " + std::to_string(forced.size()) +
                           " symbols, expected " + std::to_string(n * t_len));
    }
    ad::Tape& tape = p.tape();
    const ad::Var objects = encode_objects(p, patches, mode_);

    SpeakerOutput out;
    out.messages.assign(n * t_len, 0);
    std::vector<ad::Var> step_logp, step_probs, step_attn;
    std::vector<std::size_t> prev(n, bos());

    detail::LstmState state{tape.constant(Tensor(Shape{n, h})), tape.constant(Tensor(Shape{n, h}))};
    std::vector<ad::Var> inputs;  // transformer prefix, each [N, 1, H]

    for (std::size_t t = 0; t < t_len; ++t) {
      const ad::Var emb = ad::embedding(p["embedding"], prev);
      ad::Var hidden_out{};
      ad::Var attn_w{};
      if (arch_ == Architecture::lstm) {
        state = detail::lstm_cell(p, "lstm", emb, state);
        AttentionProjections proj;
        proj.bilinear = p["attention.w_b"];
        const auto att = attend(ad::reshape(state.h, Shape{n, 1, h}), objects, AttentionKind::bilinear, proj);
        attn_w = att.weights;
        const ad::Var ctx = ad::reshape(att.context, Shape{n, h});
        hidden_out = ad::tanh(ad::linear(ad::concat({state.h, ctx}, 1), p["post.weight"], p["post.bias"]));
      } else {
        const ad::Var pos = ad::reshape(ad::slice(p["position"], 0, t, 1), Shape{h});
        const ad::Var x = ad::reshape(emb + pos, Shape{n, 1, h});
        inputs.push_back(x);
        const ad::Var prefix = inputs.size() == 1 ? x : ad::concat(inputs, 1);
        // Causal self-attention: position t sees the inputs at positions <= t.
        const auto self = attend(x, prefix, AttentionKind::scaled_dot, detail::projections(p, "self_attention"));
        const ad::Var x1 = detail::layer_norm(p, "norm1", x + ad::linear(self.context, p["self_attention.w_o"]));
        const auto cross =
            attend(x1, objects, AttentionKind::scaled_dot, detail::projections(p, "cross_attention"));
        attn_w = cross.weights;
        const ad::Var x2 = detail::layer_norm(p, "norm2", x1 + ad::linear(cross.context, p["cross_attention.w_o"]));
        const ad::Var x3 = detail::layer_norm(p, "norm3", x2 + detail::ffn(p, x2));
        hidden_out = ad::reshape(x3, Shape{n, h});
      }
      const ad::Var logits = ad::linear(hidden_out, p["output.weight"], p["output.bias"]);
      const ad::Var logp = ad::log_softmax(logits, 1);
      const ad::Var probs = ad::softmax(logits, 1);
      const Tensor& pv = probs.value();
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t sym;
        const double* row = pv.data.data() + i * v;
        switch (mode) {
          case DecodeMode::sample: sym = sample_categorical(std::span<const double>(row, v), *rng); break;
          case DecodeMode::greedy: sym = detail::argmax_row(row, v); break;
          default:
            sym = forced[i * t_len + t];
            if (sym >= v) throw DimensionError("speaker: forced symbol " + std::to_string(sym) + " >= vocab");
        }
        out.messages[i * t_len + t] = sym;
        prev[i] = sym;
      }
      step_logp.push_back(ad::reshape(logp, Shape{n, 1, v}));
      step_probs.push_back(ad::reshape(probs, Shape{n, 1, v}));
      step_attn.push_back(attn_w);
    }
    out.log_probs = t_len == 1 ? step_logp[0] : ad::concat(step_logp, 1);
    out.probs = t_len == 1 ? step_probs[0] : ad::concat(step_probs, 1);
    // Each step's weights are [N, 1, A']; stacking along axis 1 gives [N, T, A'].
    {
      const std::size_t a = step_attn[0].dim(2);
      Tensor att(Shape{n, t_len, a});
      for (std::size_t t = 0; t < t_len; ++t) {
        const Tensor& w = step_attn[t].value();
        for (std::size_t i = 0; i < n; ++i)
          std::copy_n(w.data.data() + i * a, a, att.data.data() + (i * t_len + t) * a);
      }
      out.attention = std::move(att);
    }
    return out;
  }

 private:
  Architecture arch_;
  AttentionMode mode_;
  AgentSizes sizes_;
};

// ---------------------------------------------------------------------------
// Listener

struct ListenerOutput {
  ad::Var scores;    // [N, C]
  Tensor attention;  // [N, C, T, A']
};

class Listener {
 public:
  /// `kind` is the symbol-over-patch attention: dot or (unprojected) scaled_dot.
  Listener(Architecture arch, AttentionMode mode, AgentSizes sizes, std::optional<AttentionKind> kind = {})
      : arch_(arch), mode_(mode), sizes_(sizes), kind_(kind.value_or(default_kind(arch))) {
    if (kind_ == AttentionKind::bilinear) throw ConfigError("listener attention must be dot or scaled_dot");
  }

  static AttentionKind default_kind(Architecture arch) {
    return arch == Architecture::lstm ? AttentionKind::dot : AttentionKind::scaled_dot;
  }

  Architecture architecture() const { return arch_; }
  AttentionMode mode() const { return mode_; }
  AttentionKind attention_kind() const { return kind_; }
  const AgentSizes& sizes() const { return sizes_; }

  ParamStore init_params(Rng& rng) const {
    ParamStore ps;
    const std::size_t h = sizes_.hidden;
    ps.add_glorot("encoder.weight", sizes_.feature_dim, h, rng);
    ps.add_constant("encoder.bias", Shape{h}, 0.0);
    ps.add_glorot("embedding", sizes_.vocab, h, rng);
    if (arch_ == Architecture::lstm) {
      detail::add_lstm(ps, "lstm_fwd", h, h, rng);
      detail::add_lstm(ps, "lstm_bwd", h, h, rng);
      ps.add_glorot("project.weight", 2 * h, h, rng);
      ps.add_constant("project.bias", Shape{h}, 0.0);
    } else {
      ps.add_glorot("position", sizes_.length, h, rng);
      detail::add_projections(ps, "self_attention", h, rng);
      detail::add_layer_norm(ps, "norm1", h);
      detail::add_ffn(ps, h, sizes_.ffn_width(), rng);
      detail::add_layer_norm(ps, "norm2", h);
    }
    return ps;
  }

  /// Symbol vectors [N, T, H] for N x T message ids.
  ad::Var encode_message(const Bound& p, std::span<const std::size_t> messages, std::size_t n) const {
    const std::size_t t_len = sizes_.length, h = sizes_.hidden;
    if (messages.size() != n * t_len) throw DimensionError("listener: message buffer size mismatch");
    for (std::size_t s : messages)
      if (s >= sizes_.vocab) throw DimensionError("listener: symbol id " + std::to_string(s) + " >= vocab");
    ad::Tape& tape = p.tape();
    if (arch_ == Architecture::lstm) {
      std::vector<ad::Var> emb;
      for (std::size_t t = 0; t < t_len; ++t) {
        std::vector<std::size_t> ids(n);
        for (std::size_t i = 0; i < n; ++i) ids[i] = messages[i * t_len + t];
        emb.push_back(ad::embedding(p["embedding"], ids));
      }
      const Tensor zeros(Shape{n, h});
      std::vector<ad::Var> fwd(t_len), bwd(t_len);
      detail::LstmState s{tape.constant(zeros), tape.constant(zeros)};
      for (std::size_t t = 0; t < t_len; ++t) fwd[t] = (s = detail::lstm_cell(p, "lstm_fwd", emb[t], s)).h;
      s = {tape.constant(zeros), tape.constant(zeros)};
      for (std::size_t t = t_len; t-- > 0;) bwd[t] = (s = detail::lstm_cell(p, "lstm_bwd", emb[t], s)).h;
      std::vector<ad::Var> steps;
      for (std::size_t t = 0; t < t_len; ++t) {
        const ad::Var m = ad::linear(ad::concat({fwd[t], bwd[t]}, 1), p["project.weight"], p["project.bias"]);
        steps.push_back(ad::reshape(m, Shape{n, 1, h}));
      }
      return t_len == 1 ? steps[0] : ad::concat(steps, 1);
    }
    const ad::Var emb = ad::reshape(ad::embedding(p["embedding"], messages), Shape{n, t_len, h});
    const ad::Var x = emb + p["position"];
    const auto self = attend(x, x, AttentionKind::scaled_dot, detail::projections(p, "self_attention"));
    const ad::Var x1 = detail::layer_norm(p, "norm1", x + ad::linear(self.context, p["self_attention.w_o"]));
    return detail::layer_norm(p, "norm2", x1 + detail::ffn(p, x1));
  }

  /// Scores candidates [N, C, A, D] against N messages.
  ListenerOutput run(const Bound& p, std::span<const std::size_t> messages, ad::Var candidates) const {
    if (candidates.rank() != 4) throw DimensionError("listener: candidates must be [N x C x A x D]");
    const std::size_t n = candidates.dim(0), c = candidates.dim(1);
    if (c == 0) throw ContractError("listener: empty candidate set");
    const std::size_t t_len = sizes_.length, h = sizes_.hidden;
    const ad::Var symbols = encode_message(p, messages, n);  // [N, T, H]
    const ad::Var objects = encode_objects(
        p, ad::reshape(candidates, Shape{n * c, candidates.dim(2), candidates.dim(3)}), mode_);  // [NC, A', H]
    const ad::Var queries = ad::reshape(ad::expand(symbols, 1, c), Shape{n * c, t_len, h});
    const auto att = attend(queries, objects, kind_);
    // s_i^t = context . symbol, averaged over t.
    const ad::Var per_symbol = ad::sum(att.context * queries, 2);  // [NC, T]
    ListenerOutput out;
    out.scores = ad::reshape(ad::mean(per_symbol, 1), Shape{n, c});
    const Tensor& w = att.weights.value();
    out.attention = Tensor(Shape{n, c, t_len, w.dim(2)}, w.data);
    return out;
  }

 private:
  Architecture arch_;
  AttentionMode mode_;
  AgentSizes sizes_;
  AttentionKind kind_;
};

inline std::size_t argmax(std::span<const double> xs) { return detail::argmax_row(xs.data(), xs.size()); }

}  // namespace emcomm
