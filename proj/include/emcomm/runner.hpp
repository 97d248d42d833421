#pragma once

// Sweep orchestration, per-run analysis and report generation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emcomm/config.hpp"
#include "emcomm/metrics.hpp"
#include "emcomm/training.hpp"

namespace emcomm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Analysis of a trained pair

/// Greedy messages for one rendering of every type in the universe.
inline LanguageTable language_table(const AgentPair& agents, const World& world, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 30));
  std::vector<ObjectInstance> insts;
  for (std::size_t t = 0; t < world.universe().size(); ++t) insts.push_back(world.render(t, rng));
  std::vector<const ObjectInstance*> ptrs;
  for (const auto& i : insts) ptrs.push_back(&i);
  ad::Tape tape;
  const Bound sp(tape, agents.speaker_params);
  const SpeakerOutput out = agents.speaker.run(sp, patch_batch(tape, ptrs), DecodeMode::greedy, nullptr);
  const std::size_t t_len = agents.speaker.sizes().length;
  LanguageTable table;
  for (std::size_t t = 0; t < insts.size(); ++t) {
    LanguageEntry e;
    e.type = world.universe()[t];
    e.attributes = world.binary_vector(t);
    e.message.assign(out.messages.begin() + static_cast<std::ptrdiff_t>(t * t_len),
                     out.messages.begin() + static_cast<std::ptrdiff_t>((t + 1) * t_len));
    table.push_back(std::move(e));
  }
  return table;
}

inline std::string format_language(const LanguageTable& table, const World& world) {
  std::string out = "# type\tsplit\tattributes\tmessage\n";
  std::vector<char> in_train(world.universe().size(), 0);
  for (std::size_t t : world.train_types()) in_train[t] = 1;
  for (std::size_t i = 0; i < table.size(); ++i) {
    out += std::to_string(i) + "\t" + (in_train[i] ? "train" : "eval") + "\t";
    for (std::size_t k = 0; k < table[i].type.values.size(); ++k) {
      out += (k ? " " : "") + std::to_string(table[i].type.values[k]);
    }
    out += "\t";
    for (std::size_t k = 0; k < table[i].message.size(); ++k) out += (k ? " " : "") + std::to_string(table[i].message[k]);
    out += "\n";
  }
  return out;
}

struct DiscrepancySample {
  std::size_t episode = 0;
  bool success = false;
  double discrepancy = 0.0;
};

struct AnalysisResult {
  std::vector<DiscrepancySample> discrepancy;  // empty when the two agents attend over different sets
  std::optional<AssociationMatrix> association;  // speaker symbols; AT speakers only
};

/// Plays `rounds` episodes per split in analysis mode: the listener's target
/// candidate is the exact instance the speaker saw.
inline AnalysisResult analyze_agents(const AgentPair& agents, const World& world, std::size_t rounds,
                                     std::size_t candidates, std::uint64_t seed, DiscrepancyTarget on,
                                     DistractorPool pool = DistractorPool::same_split, std::size_t chunk = 256) {
  AnalysisResult res;
  const bool comparable = agents.speaker.mode() == agents.listener.mode();
  const bool speaker_at = agents.speaker.mode() == AttentionMode::at;
  if (speaker_at) res.association.emplace(agents.speaker.sizes().vocab, world.value_count());
  Rng rng(derive_seed(seed, 21));
  std::size_t episode = 0;
  for (Split split : {Split::train, Split::eval}) {
    for (std::size_t done = 0; done < rounds; done += chunk) {
      const std::size_t n = std::min(chunk, rounds - done);
      std::vector<Episode> eps;
      for (std::size_t i = 0; i < n; ++i) {
        Episode ep = sample_episode(world, split, candidates, rng, pool);
        ep.candidates[ep.target_index] = ep.speaker_instance;
        eps.push_back(std::move(ep));
      }
      const auto traces = trace_episodes(agents, eps);
      std::vector<SymbolTrace> symbols;
      for (std::size_t i = 0; i < traces.size(); ++i, ++episode) {
        const EpisodeTrace& tr = traces[i];
        if (comparable) {
          const std::size_t cand = on == DiscrepancyTarget::target ? tr.target_index : tr.chosen;
          const std::size_t t_len = tr.speaker_attention.dim(0), a = tr.speaker_attention.dim(1);
          const std::size_t block = t_len * a;
          Tensor la(Shape{t_len, a},
                    std::vector<double>(tr.listener_attention.data.begin() + static_cast<std::ptrdiff_t>(cand * block),
                                        tr.listener_attention.data.begin() + static_cast<std::ptrdiff_t>((cand + 1) * block)));
          res.discrepancy.push_back({episode, tr.reward > 0.5, attention_discrepancy(tr.speaker_attention, la)});
        }
        if (speaker_at) symbols.push_back({tr.message, tr.speaker_attention, &eps[i].speaker_instance});
      }
      if (speaker_at) {
        const AssociationMatrix m = symbol_concept_map(symbols, res.association->symbols, res.association->concepts);
        for (std::size_t k = 0; k < m.counts.size(); ++k) res.association->counts[k] += m.counts[k];
      }
    }
  }
  return res;
}

inline std::string format_discrepancy(const std::vector<DiscrepancySample>& samples) {
  std::string out = "episode,success,discrepancy\n";
  char buf[96];
  for (const auto& s : samples) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g\n", s.episode, s.success ? 1 : 0, s.discrepancy);
    out += buf;
  }
  return out;
}

inline std::vector<DiscrepancySample> parse_discrepancy(const std::string& text) {
  std::vector<DiscrepancySample> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    DiscrepancySample s;
    int ok = 0;
    if (std::sscanf(line.c_str(), "%zu,%d,%lf", &s.episode, &ok, &s.discrepancy) != 3) {
      throw FormatError("discrepancy csv: bad line '" + line + "'");
    }
    s.success = ok != 0;
    out.push_back(s);
  }
  return out;
}

inline std::string format_association(const AssociationMatrix& m) {
  std::string out = "symbol";
  for (std::size_t c = 0; c < m.concepts; ++c) out += ",v" + std::to_string(c);
  out += ",unfocused\n";
  for (std::size_t s = 0; s < m.symbols; ++s) {
    out += std::to_string(s);
    for (std::size_t c = 0; c <= m.concepts; ++c) out += "," + std::to_string(m.at(s, c));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run results

struct RunResult {
  std::string config_hash;
  std::string setting;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;
  double train_acc = 0.0;
  double gen_acc = 0.0;
  double topsim = 0.0;
  bool topsim_degenerate = false;
  double discrepancy_success = std::numeric_limits<double>::quiet_NaN();
  double discrepancy_failure = std::numeric_limits<double>::quiet_NaN();
  std::string dir;
};

inline std::string format_metrics(const RunResult& r) {
  std::string out = "metric,value\n";
  char buf[128];
  auto row = [&](const char* k, double v) {
    std::snprintf(buf, sizeof buf, "%s,%.17g\n", k, v);
    out += buf;
  };
  out += std::string("status,") + (r.failed ? "failed" : "ok") + "\n";
  if (r.failed) out += "failure," + r.failure + "\n";
  out += "config_hash," + r.config_hash + "\n";
  out += "setting," + r.setting + "\n";
  row("alpha", r.alpha);
  out += "seed," + std::to_string(r.seed) + "\n";
  row("train_acc", r.train_acc);
  row("gen_acc", r.gen_acc);
  row("topsim", r.topsim);
  out += std::string("topsim_degenerate,") + (r.topsim_degenerate ? "1" : "0") + "\n";
  row("discrepancy_success", r.discrepancy_success);
  row("discrepancy_failure", r.discrepancy_failure);
  return out;
}

inline RunResult parse_metrics(const std::string& text, const std::string& dir = {}) {
  RunResult r;
  r.dir = dir;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  auto num = [](const std::string& v) {
    if (v == "nan" || v == "-nan") return std::numeric_limits<double>::quiet_NaN();
    return std::stod(v);
  };
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    const std::string k = line.substr(0, comma), v = line.substr(comma + 1);
    if (k == "status") r.failed = v == "failed";
    else if (k == "failure") r.failure = v;
    else if (k == "config_hash") r.config_hash = v;
    else if (k == "setting") r.setting = v;
    else if (k == "alpha") r.alpha = num(v);
    else if (k == "seed") r.seed = std::stoull(v);
    else if (k == "train_acc") r.train_acc = num(v);
    else if (k == "gen_acc") r.gen_acc = num(v);
    else if (k == "topsim") r.topsim = num(v);
    else if (k == "topsim_degenerate") r.topsim_degenerate = v == "1";
    else if (k == "discrepancy_success") r.discrepancy_success = num(v);
    else if (k == "discrepancy_failure") r.discrepancy_failure = num(v);
  }
  return r;
}

inline std::string read_text(const fs::path& p) { return detail::read_file(p.string()); }

inline void write_text(const fs::path& p, const std::string& s) { detail::write_file(p.string(), s); }

inline Metadata checkpoint_metadata(const AgentPair& agents, const std::string& role) {
  const AgentSizes& s = agents.speaker.sizes();
  return {{"role", role},
          {"arch", to_string(agents.speaker.architecture())},
          {"speaker_mode", to_string(agents.speaker.mode())},
          {"listener_mode", to_string(agents.listener.mode())},
          {"V", std::to_string(s.vocab)},
          {"T", std::to_string(s.length)},
          {"H", std::to_string(s.hidden)},
          {"A", std::to_string(s.patches)},
          {"D", std::to_string(s.feature_dim)}};
}

inline fs::path run_dir(const ExperimentConfig& c, double alpha, std::uint64_t seed) {
  return fs::path(c.output_dir) / config_hash(c) / alpha_label(alpha) / std::to_string(seed);
}

inline World build_world(const ExperimentConfig& c) { return World::build(c.world, c.world_seed); }

/// Metric summary of a trained pair; `analysis` receives the per-episode data.
inline RunResult score_agents(const ExperimentConfig& c, const World& world, const AgentPair& agents, std::uint64_t seed,
                              AnalysisResult* analysis = nullptr, LanguageTable* language = nullptr) {
  RunResult r;
  r.config_hash = config_hash(c);
  r.setting = setting_label(c);
  r.seed = seed;
  r.train_acc = evaluate(agents, world, Split::train, c.eval_rounds, c.train.candidates, seed, c.train.distractors);
  r.gen_acc = evaluate(agents, world, Split::eval, c.eval_rounds, c.train.candidates, seed, c.train.distractors);
  LanguageTable table = language_table(agents, world, seed);
  const TopSimResult ts = topsim(table);
  r.topsim = ts.value;
  r.topsim_degenerate = ts.degenerate;
  AnalysisResult a = analyze_agents(agents, world, c.eval_rounds, c.train.candidates, seed, c.discrepancy_on, c.train.distractors);
  double ss = 0, sf = 0;
  std::size_t ns = 0, nf = 0;
  for (const auto& d : a.discrepancy) {
    (d.success ? ss : sf) += d.discrepancy;
    ++(d.success ? ns : nf);
  }
  if (ns) r.discrepancy_success = ss / static_cast<double>(ns);
  if (nf) r.discrepancy_failure = sf / static_cast<double>(nf);
  if (analysis) *analysis = std::move(a);
  if (language) *language = std::move(table);
  return r;
}

/// Trains, scores and writes one run directory. metrics.csv is written last
/// and marks the run complete.
inline RunResult execute_run(const ExperimentConfig& c, const World& world, double alpha, std::uint64_t seed) {
  const fs::path dir = run_dir(c, alpha, seed);
  fs::create_directories(dir);
  ExperimentConfig rc = c;
  rc.train.alpha = alpha;
  write_text(dir / "config", run_config_text(c, alpha, seed));
  RunResult r;
  try {
    TrainResult tr = train(world, rc.train, seed);
    write_text(dir / "log.csv", tr.log.csv());
    save_checkpoint((dir / "speaker.ck").string(), tr.agents.speaker_params, checkpoint_metadata(tr.agents, "speaker"));
    save_checkpoint((dir / "listener.ck").string(), tr.agents.listener_params, checkpoint_metadata(tr.agents, "listener"));
    AnalysisResult analysis;
    LanguageTable table;
    r = score_agents(rc, world, tr.agents, seed, &analysis, &table);
    write_text(dir / "language.txt", format_language(table, world));
    write_text(dir / "discrepancy.csv", format_discrepancy(analysis.discrepancy));
    if (analysis.association) write_text(dir / "association.csv", format_association(*analysis.association));
  } catch (const TrainingAborted& e) {
    r = RunResult{};
    r.config_hash = config_hash(c);
    r.setting = setting_label(c);
    r.seed = seed;
    r.failed = true;
    r.failure = std::string(e.what());
    std::replace(r.failure.begin(), r.failure.end(), '\n', ' ');
  }
  r.alpha = alpha;
  r.dir = dir.string();
  write_text(dir / "metrics.csv", format_metrics(r));
  return r;
}

/// Runs every (alpha, seed) pair, skipping runs already completed on disk.
/// Results are ordered by (alpha, seed) as listed in the config.
inline std::vector<RunResult> run_experiment(const ExperimentConfig& c, std::ostream* progress = &std::cerr) {
  const World world = build_world(c);
  struct Job {
    double alpha;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double a : c.alphas)
    for (std::uint64_t s : c.seeds) jobs.push_back({a, s});
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const fs::path dir = run_dir(c, jobs[i].alpha, jobs[i].seed);
      bool reused = false;
      if (fs::exists(dir / "metrics.csv")) {
        results[i] = parse_metrics(read_text(dir / "metrics.csv"), dir.string());
        reused = true;
      } else {
        results[i] = execute_run(c, world, jobs[i].alpha, jobs[i].seed);
      }
      if (progress) {
        std::lock_guard<std::mutex> lock(log_mu);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s alpha=%s seed=%llu %s train=%.4f gen=%.4f topsim=%.4f\n",
                      reused ? "skip" : "done", alpha_label(jobs[i].alpha).c_str(),
                      static_cast<unsigned long long>(jobs[i].seed), results[i].failed ? "FAILED" : "ok",
                      results[i].train_acc, results[i].gen_acc, results[i].topsim);
        *progress << buf << std::flush;
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(c.workers, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

// ---------------------------------------------------------------------------
// Reloading runs

struct LoadedRun {
  ExperimentConfig config;
  World world;
  AgentPair agents;
  std::uint64_t seed;
};

inline LoadedRun load_run(const fs::path& dir) {
  ExperimentConfig c = load_config((dir / "config").string());
  c.train.alpha = c.alphas.front();
  World world = build_world(c);
  AgentPair agents = make_agents(c.train, world, c.seeds.front());
  auto adopt = [&](ParamStore& dst, const fs::path& p) {
    Checkpoint ck = load_checkpoint(p.string());
    if (ck.params.manifest() != dst.manifest()) {
      throw FormatError(p.string() + ": parameter manifest does not match the run config");
    }
    dst = std::move(ck.params);
  };
  adopt(agents.speaker_params, dir / "speaker.ck");
  adopt(agents.listener_params, dir / "listener.ck");
  const std::uint64_t seed = c.seeds.front();
  return LoadedRun{std::move(c), std::move(world), std::move(agents), seed};
}

// ---------------------------------------------------------------------------
// Selection and reporting

/// The k runs with highest GenAcc; ties go to higher TopSim, then lower seed.
inline std::vector<RunResult> select_top_k(std::vector<RunResult> results, std::size_t k) {
  if (k > results.size()) {
    throw ContractError("select_top_k: k=" + std::to_string(k) + " exceeds " + std::to_string(results.size()) + " results");
  }
  std::stable_sort(results.begin(), results.end(), [](const RunResult& a, const RunResult& b) {
    if (a.gen_acc != b.gen_acc) return a.gen_acc > b.gen_acc;
    if (a.topsim != b.topsim) return a.topsim > b.topsim;
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.alpha < b.alpha;
  });
  results.resize(k);
  return results;
}

/// Every completed run under `sweep` (<sweep>/<hash>/<alpha>/<seed>/metrics.csv).
inline std::vector<RunResult> collect_runs(const fs::path& sweep) {
  std::vector<RunResult> out;
  if (!fs::is_directory(sweep)) throw ConfigError("sweep directory '" + sweep.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(sweep)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(parse_metrics(read_text(f), f.parent_path().string()));
  return out;
}

inline int setting_rank(const std::string& s) {
  static const char* order[] = {"noat-noat", "at-noat", "noat-at", "at-at"};
  for (int i = 0; i < 4; ++i)
    if (s == order[i]) return i;
  return 4;
}

struct ReportGroup {
  std::string label;
  std::vector<RunResult> runs;
};

/// Groups by config hash. Labels are the attention setting, qualified by
/// hash and alpha when that is ambiguous.
inline std::vector<ReportGroup> group_runs(const std::vector<RunResult>& runs) {
  std::map<std::pair<std::string, double>, std::vector<RunResult>> by;
  std::map<std::string, std::set<std::pair<std::string, double>>> labels;
  for (const auto& r : runs) {
    by[{r.config_hash, r.alpha}].push_back(r);
    labels[r.setting].insert({r.config_hash, r.alpha});
  }
  std::vector<ReportGroup> out;
  for (auto& [key, rs] : by) {
    std::string label = rs.front().setting;
    if (labels[label].size() > 1) label += "/" + key.first.substr(0, 8) + "/" + alpha_label(key.second);
    out.push_back({label, std::move(rs)});
  }
  std::stable_sort(out.begin(), out.end(), [](const ReportGroup& a, const ReportGroup& b) {
    const int ra = setting_rank(a.runs.front().setting), rb = setting_rank(b.runs.front().setting);
    if (ra != rb) return ra < rb;
    return a.label < b.label;
  });
  return out;
}

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '<') o += "&lt;";
    else if (ch == '>') o += "&gt;";
    else if (ch == '&') o += "&amp;";
    else o += ch;
  }
  return o;
}

inline std::string box_svg(const std::string& title, const std::vector<std::pair<std::string, BoxSummary>>& boxes,
                           double lo, double hi) {
  const double w = 120.0 * static_cast<double>(std::max<std::size_t>(boxes.size(), 1)) + 80.0, h = 320.0;
  const double top = 30, bottom = h - 40;
  auto y = [&](double v) { return bottom - (v - lo) / (hi - lo) * (bottom - top); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  o << "<text x=\"10\" y=\"18\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  o << "<line x1=\"50\" y1=\"" << top << "\" x2=\"50\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    o << "<text x=\"5\" y=\"" << y(v) + 4 << "\" font-size=\"10\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& [label, b] = boxes[i];
    const double cx = 110.0 + 120.0 * static_cast<double>(i);
    o << "<line x1=\"" << cx << "\" y1=\"" << y(b.min) << "\" x2=\"" << cx << "\" y2=\"" << y(b.max)
      << "\" stroke=\"black\"/>\n";
    o << "<rect x=\"" << cx - 30 << "\" y=\"" << y(b.q3) << "\" width=\"60\" height=\"" << y(b.q1) - y(b.q3)
      << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << cx - 30 << "\" y1=\"" << y(b.median) << "\" x2=\"" << cx + 30 << "\" y2=\"" << y(b.median)
      << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << cx - 40 << "\" y=\"" << h - 20 << "\" font-size=\"11\">" << svg_escape(label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string histogram_svg(const std::string& title, const std::vector<double>& ok, const std::vector<double>& bad,
                                 double hi) {
  const double w = 520, h = 300, left = 40, bottom = 260, top = 30;
  double peak = 1e-12;
  for (double v : ok) peak = std::max(peak, v);
  for (double v : bad) peak = std::max(peak, v);
  const double bw = (w - left - 20) / static_cast<double>(ok.size());
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  o << "<text x=\"10\" y=\"18\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  for (std::size_t i = 0; i < ok.size(); ++i) {
    const double x = left + bw * static_cast<double>(i);
    const double hs = ok[i] / peak * (bottom - top), hf = bad[i] / peak * (bottom - top);
    o << "<rect x=\"" << x << "\" y=\"" << bottom - hs << "\" width=\"" << bw / 2 << "\" height=\"" << hs
      << "\" fill=\"#31a354\"/>\n";
    o << "<rect x=\"" << x + bw / 2 << "\" y=\"" << bottom - hf << "\" width=\"" << bw / 2 << "\" height=\"" << hf
      << "\" fill=\"#de2d26\"/>\n";
  }
  o << "<text x=\"" << left << "\" y=\"" << h - 20 << "\" font-size=\"10\">0</text>\n";
  o << "<text x=\"" << w - 60 << "\" y=\"" << h - 20 << "\" font-size=\"10\">" << hi << "</text>\n";
  o << "<text x=\"" << w - 160 << "\" y=\"18\" font-size=\"11\" fill=\"#31a354\">success</text>\n";
  o << "<text x=\"" << w - 90 << "\" y=\"18\" font-size=\"11\" fill=\"#de2d26\">failure</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace detail

struct ReportSummary {
  std::vector<ReportGroup> selected;
  std::vector<std::string> warnings;
};

/// Writes plot data under `out`: per-metric CSVs, box summaries, discrepancy
/// histograms and SVG renderings.
inline ReportSummary emit_plots(const std::vector<ReportGroup>& groups, std::size_t top_k, const fs::path& out,
                                std::size_t hist_bins = 20) {
  ReportSummary rep;
  fs::create_directories(out);
  for (const auto& g : groups) {
    std::vector<RunResult> ok;
    for (const auto& r : g.runs)
      if (!r.failed) ok.push_back(r);
    if (ok.empty()) {
      rep.warnings.push_back("group " + g.label + ": no completed runs, skipped");
      continue;
    }
    std::size_t k = top_k == 0 ? ok.size() : top_k;
    if (k > ok.size()) {
      rep.warnings.push_back("group " + g.label + ": only " + std::to_string(ok.size()) + " runs for top-" +
                             std::to_string(k));
      k = ok.size();
    }
    rep.selected.push_back({g.label, select_top_k(ok, k)});
  }

  struct Metric {
    const char* name;
    double RunResult::*field;
    double lo, hi;
  };
  const Metric metrics[] = {{"train_acc", &RunResult::train_acc, 0.0, 1.0},
                            {"gen_acc", &RunResult::gen_acc, 0.0, 1.0},
                            {"topsim", &RunResult::topsim, -1.0, 1.0}};
  std::string box_csv = "metric,setting,n,min,q1,median,q3,max\n";
  char buf[256];
  for (const Metric& m : metrics) {
    std::string csv = "setting,seed,value\n";
    std::vector<std::pair<std::string, BoxSummary>> boxes;
    for (const auto& g : rep.selected) {
      std::vector<double> vals;
      for (const auto& r : g.runs) {
        const double v = r.*(m.field);
        std::snprintf(buf, sizeof buf, "%s,%llu,%.17g\n", g.label.c_str(), static_cast<unsigned long long>(r.seed), v);
        csv += buf;
        vals.push_back(v);
      }
      const BoxSummary b = box_summary(vals);
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.name, g.label.c_str(), vals.size(),
                    b.min, b.q1, b.median, b.q3, b.max);
      box_csv += buf;
      boxes.emplace_back(g.label, b);
    }
    write_text(out / (std::string(m.name) + ".csv"), csv);
    write_text(out / (std::string(m.name) + ".svg"), detail::box_svg(m.name, boxes, m.lo, m.hi));
  }
  write_text(out / "box_summary.csv", box_csv);

  const double hi = std::log(2.0);
  std::string hist_csv = "setting,class,bin_lo,bin_hi,frequency\n";
  for (const auto& g : rep.selected) {
    std::vector<double> ok, bad;
    for (const auto& r : g.runs) {
      const fs::path p = fs::path(r.dir) / "discrepancy.csv";
      if (!fs::exists(p)) continue;
      for (const auto& s : parse_discrepancy(read_text(p))) (s.success ? ok : bad).push_back(s.discrepancy);
    }
    if (ok.empty() && bad.empty()) {
      rep.warnings.push_back("group " + g.label + ": no discrepancy samples");
      continue;
    }
    const auto hs = normalized_histogram(ok, 0.0, hi, hist_bins);
    const auto hf = normalized_histogram(bad, 0.0, hi, hist_bins);
    for (int cls = 0; cls < 2; ++cls) {
      const auto& h = cls == 0 ? hs : hf;
      if ((cls == 0 ? ok : bad).empty()) continue;
      for (std::size_t b = 0; b < hist_bins; ++b) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g\n", g.label.c_str(), cls == 0 ? "success" : "failure",
                      hi * static_cast<double>(b) / static_cast<double>(hist_bins),
                      hi * static_cast<double>(b + 1) / static_cast<double>(hist_bins), h[b]);
        hist_csv += buf;
      }
    }
    std::string name = g.label;
    std::replace(name.begin(), name.end(), '/', '_');
    write_text(out / ("discrepancy_" + name + ".svg"),
               detail::histogram_svg("attention discrepancy: " + g.label, hs, hf, hi));
  }
  write_text(out / "discrepancy_hist.csv", hist_csv);
  std::string warn;
  for (const auto& w : rep.warnings) warn += w + "\n";
  write_text(out / "warnings.txt", warn);
  return rep;
}

}  // namespace emcomm
