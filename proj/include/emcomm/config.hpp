#pragma once

// Flat `key = value` experiment configuration.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emcomm/agents.hpp"
#include "emcomm/training.hpp"
#include "emcomm/world.hpp"

namespace emcomm {

enum class DiscrepancyTarget { target, chosen };

struct ExperimentConfig {
  WorldSpec world;
  std::uint64_t world_seed = 0;
  TrainConfig train;
  std::size_t eval_rounds = 15000;
  std::vector<double> alphas{0.01};
  std::vector<std::uint64_t> seeds{0};
  DiscrepancyTarget discrepancy_on = DiscrepancyTarget::target;
  std::string output_dir = "runs";
  std::size_t workers = 1;
  std::size_t instances_per_type = 4;  // gen-features only
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Short decimal form used for directory names (0.01, 0.1, 1e-05).
inline std::string alpha_label(double alpha) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", alpha);
  return buf;
}

inline std::string setting_label(const ExperimentConfig& c) {
  return to_string(c.train.speaker_mode) + "-" + to_string(c.train.listener_mode);
}

using KeyValues = std::map<std::string, std::string>;

/// Reads `key = value` lines; `#` starts a comment.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> bad;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bad.push_back("line " + std::to_string(lineno) + ": missing '='");
      continue;
    }
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) {
      bad.push_back("line " + std::to_string(lineno) + ": empty key");
      continue;
    }
    if (kv.count(key)) bad.push_back(key + " (repeated)");
    kv[key] = detail::trim(line.substr(eq + 1));
  }
  if (!bad.empty()) {
    std::string msg = "config: malformed entries:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
  return kv;
}

/// Builds and validates a config. Every unknown or invalid key is reported
/// in a single ConfigError.
inline ExperimentConfig config_from_key_values(const KeyValues& kv) {
  ExperimentConfig c;
  std::vector<std::string> bad;
  std::set<std::string> seen;

  auto note = [&](const std::string& key, const std::string& why) { bad.push_back(key + " (" + why + ")"); };
  auto size_field = [&](const std::string& key, std::size_t& dst, bool positive = true) {
    std::size_t v = 0;
    if (!detail::parse_number(kv.at(key), v)) return note(key, "expected a non-negative integer");
    if (positive && v == 0) return note(key, "must be positive");
    dst = v;
  };
  auto real_field = [&](const std::string& key, double& dst, double lo, double hi) {
    double v = 0;
    if (!detail::parse_number(kv.at(key), v) || !std::isfinite(v)) return note(key, "expected a number");
    if (v < lo || v > hi) return note(key, "out of range");
    dst = v;
  };
  auto bool_field = [&](const std::string& key, bool& dst) {
    const std::string& v = kv.at(key);
    if (v == "true" || v == "1") dst = true;
    else if (v == "false" || v == "0") dst = false;
    else note(key, "expected true or false");
  };
  auto seed_list = [&](const std::string& key) {
    std::vector<std::uint64_t> out;
    for (const auto& item : detail::split_list(kv.at(key))) {
      const auto dots = item.find("..");
      std::uint64_t a = 0, b = 0;
      if (dots != std::string::npos) {
        if (!detail::parse_number(item.substr(0, dots), a) || !detail::parse_number(item.substr(dots + 2), b) || b < a) {
          note(key, "bad range '" + item + "'");
          return;
        }
        for (std::uint64_t s = a; s <= b; ++s) out.push_back(s);
      } else if (detail::parse_number(item, a)) {
        out.push_back(a);
      } else {
        note(key, "bad seed '" + item + "'");
        return;
      }
    }
    if (out.empty()) return note(key, "empty list");
    c.seeds = out;
  };

  using Handler = std::function<void(const std::string&)>;
  const std::map<std::string, Handler> handlers{
      {"world", [&](const std::string& k) {
         const auto& v = kv.at(k);
         if (v == "combination") c.world.kind = WorldKind::combination;
         else if (v == "product") c.world.kind = WorldKind::product;
         else if (v == "feature_file") c.world.kind = WorldKind::feature_file;
         else note(k, "expected combination, product or feature_file");
       }},
      {"world.values", [&](const std::string& k) { size_field(k, c.world.values); }},
      {"world.k", [&](const std::string& k) { size_field(k, c.world.k); }},
      {"world.arities", [&](const std::string& k) {
         c.world.arities.clear();
         for (const auto& item : detail::split_list(kv.at(k))) {
           std::size_t a = 0;
           if (!detail::parse_number(item, a) || a == 0) return note(k, "bad arity '" + item + "'");
           c.world.arities.push_back(a);
         }
       }},
      {"world.grid_h", [&](const std::string& k) { size_field(k, c.world.grid_h); }},
      {"world.grid_w", [&](const std::string& k) { size_field(k, c.world.grid_w); }},
      {"world.dim", [&](const std::string& k) { size_field(k, c.world.dim); }},
      {"world.noise", [&](const std::string& k) { real_field(k, c.world.noise, 0.0, 1e6); }},
      {"world.split_train", [&](const std::string& k) { size_field(k, c.world.split_train); }},
      {"world.split_eval", [&](const std::string& k) { size_field(k, c.world.split_eval); }},
      {"world.feature_file", [&](const std::string& k) { c.world.feature_file = kv.at(k); }},
      {"world_seed", [&](const std::string& k) {
         if (!detail::parse_number(kv.at(k), c.world_seed)) note(k, "expected a non-negative integer");
       }},
      {"architecture", [&](const std::string& k) {
         try { c.train.architecture = parse_architecture(kv.at(k)); } catch (const ConfigError&) { note(k, "expected lstm or transformer"); }
       }},
      {"speaker_mode", [&](const std::string& k) {
         try { c.train.speaker_mode = parse_mode(kv.at(k)); } catch (const ConfigError&) { note(k, "expected at or noat"); }
       }},
      {"listener_mode", [&](const std::string& k) {
         try { c.train.listener_mode = parse_mode(kv.at(k)); } catch (const ConfigError&) { note(k, "expected at or noat"); }
       }},
      {"listener_attention", [&](const std::string& k) {
         try { c.train.listener_attention = parse_attention_kind(kv.at(k)); } catch (const ConfigError&) { note(k, "unknown attention kind"); }
       }},
      {"vocab", [&](const std::string& k) { size_field(k, c.train.sizes.vocab); }},
      {"length", [&](const std::string& k) { size_field(k, c.train.sizes.length); }},
      {"hidden", [&](const std::string& k) { size_field(k, c.train.sizes.hidden); }},
      {"ffn", [&](const std::string& k) { size_field(k, c.train.sizes.ffn, false); }},
      {"batch_size", [&](const std::string& k) { size_field(k, c.train.batch_size); }},
      {"max_steps", [&](const std::string& k) { size_field(k, c.train.max_steps, false); }},
      {"candidates", [&](const std::string& k) { size_field(k, c.train.candidates); }},
      {"eval_rounds", [&](const std::string& k) { size_field(k, c.eval_rounds); }},
      {"alpha", [&](const std::string& k) {
         std::vector<double> out;
         for (const auto& item : detail::split_list(kv.at(k))) {
           double a = 0;
           if (!detail::parse_number(item, a) || !std::isfinite(a) || a < 0) return note(k, "bad value '" + item + "'");
           out.push_back(a);
         }
         if (out.empty()) return note(k, "empty list");
         c.alphas = out;
       }},
      {"beta", [&](const std::string& k) { real_field(k, c.train.beta, 0.0, 1e6); }},
      {"lr", [&](const std::string& k) { real_field(k, c.train.lr, 1e-12, 10.0); }},
      {"ema_decay", [&](const std::string& k) { real_field(k, c.train.ema_decay, 0.0, 1.0); }},
      {"reward_baseline", [&](const std::string& k) { bool_field(k, c.train.reward_baseline); }},
      {"distractors", [&](const std::string& k) {
         const auto& v = kv.at(k);
         if (v == "same_split") c.train.distractors = DistractorPool::same_split;
         else if (v == "universe") c.train.distractors = DistractorPool::universe;
         else note(k, "expected same_split or universe");
       }},
      {"log_interval", [&](const std::string& k) { size_field(k, c.train.log_interval); }},
      {"log_timing", [&](const std::string& k) { bool_field(k, c.train.log_timing); }},
      {"discrepancy_on", [&](const std::string& k) {
         const auto& v = kv.at(k);
         if (v == "target") c.discrepancy_on = DiscrepancyTarget::target;
         else if (v == "chosen") c.discrepancy_on = DiscrepancyTarget::chosen;
         else note(k, "expected target or chosen");
       }},
      {"seeds", seed_list},
      {"output_dir", [&](const std::string& k) { c.output_dir = kv.at(k); }},
      {"workers", [&](const std::string& k) { size_field(k, c.workers); }},
      {"instances_per_type", [&](const std::string& k) { size_field(k, c.instances_per_type); }},
  };

  for (const auto& [key, _] : kv) {
    auto it = handlers.find(key);
    if (it == handlers.end()) {
      note(key, "unknown key");
      continue;
    }
    it->second(key);
  }
  if (c.world.kind == WorldKind::feature_file && c.world.feature_file.empty()) {
    note("world.feature_file", "required when world = feature_file");
  }
  if (c.world.kind == WorldKind::product && c.world.arities.empty()) {
    note("world.arities", "required when world = product");
  }
  if (!bad.empty()) {
    std::string msg = "config: invalid keys: ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError(msg);
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) { return config_from_key_values(parse_key_values(text)); }

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Keys that define what a run computes. Seeds, the alpha grid, output
/// location and worker count are left out.
inline KeyValues semantic_key_values(const ExperimentConfig& c) {
  KeyValues kv;
  const char* kinds[] = {"combination", "product", "feature_file"};
  kv["world"] = kinds[static_cast<int>(c.world.kind)];
  if (c.world.kind == WorldKind::combination) {
    kv["world.values"] = std::to_string(c.world.values);
    kv["world.k"] = std::to_string(c.world.k);
  }
  if (c.world.kind == WorldKind::product) {
    std::string a;
    for (std::size_t x : c.world.arities) a += (a.empty() ? "" : ",") + std::to_string(x);
    kv["world.arities"] = a;
  }
  if (c.world.kind == WorldKind::feature_file) {
    kv["world.feature_file"] = c.world.feature_file;
  } else {
    kv["world.grid_h"] = std::to_string(c.world.grid_h);
    kv["world.grid_w"] = std::to_string(c.world.grid_w);
    kv["world.dim"] = std::to_string(c.world.dim);
    kv["world.noise"] = detail::format_double(c.world.noise);
  }
  kv["world.split_train"] = std::to_string(c.world.split_train);
  kv["world.split_eval"] = std::to_string(c.world.split_eval);
  kv["world_seed"] = std::to_string(c.world_seed);
  kv["architecture"] = to_string(c.train.architecture);
  kv["speaker_mode"] = to_string(c.train.speaker_mode);
  kv["listener_mode"] = to_string(c.train.listener_mode);
  kv["listener_attention"] =
      to_string(c.train.listener_attention.value_or(Listener::default_kind(c.train.architecture)));
  kv["vocab"] = std::to_string(c.train.sizes.vocab);
  kv["length"] = std::to_string(c.train.sizes.length);
  kv["hidden"] = std::to_string(c.train.sizes.hidden);
  kv["ffn"] = std::to_string(c.train.sizes.ffn == 0 ? c.train.sizes.hidden : c.train.sizes.ffn);
  kv["batch_size"] = std::to_string(c.train.batch_size);
  kv["max_steps"] = std::to_string(c.train.max_steps);
  kv["candidates"] = std::to_string(c.train.candidates);
  kv["eval_rounds"] = std::to_string(c.eval_rounds);
  kv["beta"] = detail::format_double(c.train.beta);
  kv["lr"] = detail::format_double(c.train.lr);
  kv["ema_decay"] = detail::format_double(c.train.ema_decay);
  kv["reward_baseline"] = c.train.reward_baseline ? "true" : "false";
  kv["distractors"] = c.train.distractors == DistractorPool::same_split ? "same_split" : "universe";
  kv["log_interval"] = std::to_string(c.train.log_interval);
  kv["log_timing"] = c.train.log_timing ? "true" : "false";
  kv["discrepancy_on"] = c.discrepancy_on == DiscrepancyTarget::target ? "target" : "chosen";
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(format_key_values(semantic_key_values(c)))));
  return buf;
}

/// Config text describing a single (alpha, seed) run.
inline std::string run_config_text(const ExperimentConfig& c, double alpha, std::uint64_t seed) {
  KeyValues kv = semantic_key_values(c);
  kv["alpha"] = detail::format_double(alpha);
  kv["seeds"] = std::to_string(seed);
  return format_key_values(kv);
}

}  // namespace emcomm
