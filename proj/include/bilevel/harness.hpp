#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "bilevel/federated.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/solver.hpp"

namespace bilevel {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  ProblemSpec problem;
  SolverConfig solver;
  int repeats = 1;
  std::string output_dir = "out";
  bool k_explicit = false;          // K given, not derived as round(400/p)
  bool eval_every_explicit = false;
};

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Aipod: return "aipod";
    case Variant::EAipod: return "e-aipod";
    case Variant::E2Aipod: return "e2-aipod";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "aipod") return Variant::Aipod;
  if (s == "e-aipod") return Variant::EAipod;
  if (s == "e2-aipod") return Variant::E2Aipod;
  throw std::invalid_argument("unknown variant '" + s + "' (aipod | e-aipod | e2-aipod)");
}

namespace detail {

inline void reject_unknown_keys(const json& obj, const std::vector<std::string>& known,
                                const std::string& where) {
  std::vector<std::string> bad;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      bad.push_back(it.key());
    }
  }
  if (!bad.empty()) {
    std::string msg = "unknown key(s) in " + where + ":";
    for (const auto& k : bad) msg += " '" + k + "'";
    throw std::invalid_argument(msg);
  }
}

inline int derived_k(double p) { return static_cast<int>(std::llround(400.0 / p)); }

inline int derived_eval_every(int k) {
  if (k <= 2000) return 1;
  return (k + 1999) / 2000;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  json root = json::parse(text);
  detail::reject_unknown_keys(
      root,
      {"problem", "variant", "alpha", "beta", "rho", "delta", "p", "q", "S", "T", "N",
       "K", "neumann", "master_seed", "eval_every", "ll_batch", "repeats", "output_dir"},
      "config");

  ExperimentConfig cfg;
  if (!root.contains("problem")) throw std::invalid_argument("config: missing 'problem'");
  const json& pj = root["problem"];
  detail::reject_unknown_keys(pj,
                              {"kind", "d", "dims", "seed", "rank_a", "rank_b", "noise",
                               "heterogeneity", "m_clients"},
                              "problem");
  const std::string kind = pj.value("kind", "synthetic");
  if (kind == "synthetic") {
    cfg.problem.kind = ProblemKind::Synthetic;
  } else if (kind == "federated") {
    cfg.problem.kind = ProblemKind::FederatedQuadratic;
  } else {
    throw std::invalid_argument("problem.kind must be 'synthetic' or 'federated'");
  }
  cfg.problem.d = pj.contains("d") ? pj["d"].get<int>() : pj.value("dims", 100);
  cfg.problem.rank_a = pj.value("rank_a", cfg.problem.d / 2);
  cfg.problem.rank_b = pj.value("rank_b", cfg.problem.d / 2);
  cfg.problem.seed = pj.value("seed", std::uint64_t{0});
  cfg.problem.heterogeneity = pj.value("heterogeneity", 0.5);
  cfg.problem.m_clients = pj.value("m_clients", 5);
  cfg.problem.noise = NoiseModel{0.1, 0.1, 0.1};
  if (pj.contains("noise")) {
    const json& nj = pj["noise"];
    detail::reject_unknown_keys(nj, {"std_f", "std_g1", "std_g2"}, "problem.noise");
    cfg.problem.noise.std_f = nj.value("std_f", 0.1);
    cfg.problem.noise.std_g1 = nj.value("std_g1", 0.1);
    cfg.problem.noise.std_g2 = nj.value("std_g2", 0.1);
    if (cfg.problem.noise.std_f < 0 || cfg.problem.noise.std_g1 < 0 ||
        cfg.problem.noise.std_g2 < 0) {
      throw std::invalid_argument("problem.noise: standard deviations must be nonnegative");
    }
  }

  cfg.solver.variant = parse_variant(root.value("variant", "e-aipod"));
  cfg.solver.alpha = root.value("alpha", 0.02);
  cfg.solver.beta = root.value("beta", 0.01);
  cfg.solver.rho = root.value("rho", 0.5);
  cfg.solver.delta = root.value("delta", 1.0);
  cfg.solver.p = root.value("p", 0.3);
  cfg.solver.q = root.value("q", 0.3);
  cfg.solver.S = root.value("S", 5);
  cfg.solver.T = root.value("T", 2);
  cfg.solver.N = root.value("N", 10);
  if (cfg.solver.p <= 0.0 || cfg.solver.p > 1.0) {
    throw std::invalid_argument("config: p must lie in (0, 1]");
  }
  if (cfg.solver.q <= 0.0 || cfg.solver.q > 1.0) {
    throw std::invalid_argument("config: q must lie in (0, 1]");
  }
  if (cfg.solver.delta < 1.0) throw std::invalid_argument("config: delta must be >= 1");
  cfg.k_explicit = root.contains("K");
  cfg.solver.K = cfg.k_explicit ? root["K"].get<int>() : detail::derived_k(cfg.solver.p);
  if (root.contains("neumann")) {
    const json& nj = root["neumann"];
    detail::reject_unknown_keys(nj, {"c_tilde", "depth_cap"}, "neumann");
    cfg.solver.neumann.c_tilde = nj.value("c_tilde", 1.0);
    cfg.solver.neumann.depth_cap = nj.value("depth_cap", 3);
  } else {
    cfg.solver.neumann.c_tilde = 1.0;
    cfg.solver.neumann.depth_cap = 3;
  }
  cfg.solver.neumann.l_g1 = 0.0;  // resolved from problem metadata at run time
  cfg.solver.master_seed = root.value("master_seed", std::uint64_t{0});
  if (const char* env = std::getenv("BILEVEL_SEED")) {
    cfg.solver.master_seed = std::strtoull(env, nullptr, 10);
  }
  cfg.eval_every_explicit = root.contains("eval_every");
  cfg.solver.eval_every = cfg.eval_every_explicit
                              ? root["eval_every"].get<int>()
                              : detail::derived_eval_every(cfg.solver.K);
  cfg.solver.ll_batch = root.value("ll_batch", 1);
  cfg.repeats = root.value("repeats", 1);
  if (cfg.repeats < 1) throw std::invalid_argument("config: repeats must be >= 1");
  cfg.output_dir = root.value("output_dir", "out");
  return cfg;
}

inline json emit_config(const ExperimentConfig& cfg) {
  json pj;
  pj["kind"] = cfg.problem.kind == ProblemKind::Synthetic ? "synthetic" : "federated";
  pj["d"] = cfg.problem.d;
  pj["rank_a"] = cfg.problem.rank_a;
  pj["rank_b"] = cfg.problem.rank_b;
  pj["seed"] = cfg.problem.seed;
  pj["noise"] = {{"std_f", cfg.problem.noise.std_f},
                 {"std_g1", cfg.problem.noise.std_g1},
                 {"std_g2", cfg.problem.noise.std_g2}};
  pj["heterogeneity"] = cfg.problem.heterogeneity;
  pj["m_clients"] = cfg.problem.m_clients;
  json root;
  root["problem"] = pj;
  root["variant"] = variant_name(cfg.solver.variant);
  root["alpha"] = cfg.solver.alpha;
  root["beta"] = cfg.solver.beta;
  root["rho"] = cfg.solver.rho;
  root["delta"] = cfg.solver.delta;
  root["p"] = cfg.solver.p;
  root["q"] = cfg.solver.q;
  root["S"] = cfg.solver.S;
  root["T"] = cfg.solver.T;
  root["N"] = cfg.solver.N;
  root["K"] = cfg.solver.K;
  root["neumann"] = {{"c_tilde", cfg.solver.neumann.c_tilde},
                     {"depth_cap", cfg.solver.neumann.depth_cap}};
  root["master_seed"] = cfg.solver.master_seed;
  root["eval_every"] = cfg.solver.eval_every;
  root["ll_batch"] = cfg.solver.ll_batch;
  root["repeats"] = cfg.repeats;
  root["output_dir"] = cfg.output_dir;
  return root;
}

// ---------------------------------------------------------------------------
// Trace CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "run_id,variant,seed,k,error_inst,error_running_avg,stationarity,ll_proj,"
    "ul_proj_explicit,ul_proj_implicit,g_grad_samples,g_hess_samples,f_grad_samples,"
    "ll_comm,ul_comm,ml_comm,wall_ms";

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline std::string trace_to_csv(const RunTrace& trace, const std::string& run_id,
                                const std::string& variant, std::uint64_t seed) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const MetricRow& r : trace.rows) {
    out += run_id;
    out += ',';
    out += variant;
    out += ',';
    out += std::to_string(seed);
    out += ',';
    out += std::to_string(r.k);
    out += ',';
    out += detail::fmt_double(r.error_inst);
    out += ',';
    out += detail::fmt_double(r.error_running_avg);
    out += ',';
    out += detail::fmt_double(r.stationarity);
    out += ',';
    out += std::to_string(r.counters.ll_projections);
    out += ',';
    out += std::to_string(r.counters.ul_explicit_projections);
    out += ',';
    out += std::to_string(r.counters.ul_implicit_projections);
    out += ',';
    out += std::to_string(r.counters.g_grad_samples);
    out += ',';
    out += std::to_string(r.counters.g_hess_samples);
    out += ',';
    out += std::to_string(r.counters.f_grad_samples);
    out += ',';
    out += std::to_string(r.comm.ll_rounds);
    out += ',';
    out += std::to_string(r.comm.ul_rounds + r.comm.hvp_rounds);
    out += ',';
    out += std::to_string(r.comm.ml_rounds);
    out += ',';
    out += detail::fmt_double(r.wall_ms);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct RunResult {
  std::string run_id;
  std::string variant;
  std::uint64_t seed = 0;
  std::string sweep_param;
  double sweep_value = 0.0;
  bool swept = false;
  RunTrace trace;
  std::string csv;
};

struct SweepSpec {
  std::string param;
  std::vector<double> values;
};

inline void set_solver_param(SolverConfig& s, const std::string& name, double value) {
  if (name == "alpha") s.alpha = value;
  else if (name == "beta") s.beta = value;
  else if (name == "rho") s.rho = value;
  else if (name == "delta") s.delta = value;
  else if (name == "p") s.p = value;
  else if (name == "q") s.q = value;
  else if (name == "S") s.S = static_cast<int>(value);
  else if (name == "T") s.T = static_cast<int>(value);
  else if (name == "N") s.N = static_cast<int>(value);
  else if (name == "K") s.K = static_cast<int>(value);
  else if (name == "depth_cap") s.neumann.depth_cap = static_cast<int>(value);
  else throw std::invalid_argument("unknown sweep parameter '" + name + "'");
}

namespace detail {

inline std::string fmt_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline RunTrace run_one(const BilevelProblem& problem, const SolverConfig& solver,
                        CommLog* comm_out) {
  const bool fed = problem.clients.has_value() && solver.variant != Variant::Aipod;
  if (fed) {
    FedRun run = solver.variant == Variant::EAipod ? run_fed_eaipod(problem, solver)
                                                   : run_fed_e2aipod(problem, solver);
    if (comm_out) *comm_out = run.comm;
    return std::move(run.trace);
  }
  if (comm_out) *comm_out = CommLog{};
  return run_solver(problem, solver);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Value of error_running_avg at the first trace row with k >= target.
inline double running_avg_at(const RunTrace& trace, long target_k) {
  for (const auto& row : trace.rows) {
    if (row.k >= target_k) return row.error_running_avg;
  }
  return trace.rows.empty() ? 0.0 : trace.rows.back().error_running_avg;
}

struct ExperimentOutput {
  std::vector<RunResult> runs;
  json summary;
};

// Executes repeats x sweep-values runs (seeds master_seed + 0 ... repeats-1),
// writes one CSV per run plus summary.json under output_dir. Runs execute in
// parallel up to `jobs`; outputs are seed-derived, so scheduling never changes
// the bytes.
inline ExperimentOutput run_experiment(const ExperimentConfig& cfg,
                                       const std::optional<SweepSpec>& sweep = std::nullopt,
                                       int jobs = 1, bool write_files = true) {
  std::vector<std::pair<double, bool>> values;  // (value, swept)
  if (sweep) {
    for (double v : sweep->values) values.emplace_back(v, true);
    if (values.empty()) throw std::invalid_argument("sweep: no values given");
  } else {
    values.emplace_back(0.0, false);
  }

  const BilevelProblem problem = build_problem(cfg.problem);

  std::vector<RunResult> runs;
  std::vector<SolverConfig> solver_cfgs;
  for (const auto& [value, swept] : values) {
    SolverConfig solver = cfg.solver;
    if (swept) {
      set_solver_param(solver, sweep->param, value);
      if (sweep->param == "p" && !cfg.k_explicit) {
        solver.K = detail::derived_k(solver.p);
        if (!cfg.eval_every_explicit) {
          solver.eval_every = detail::derived_eval_every(solver.K);
        }
      }
    }
    for (int rep = 0; rep < cfg.repeats; ++rep) {
      const std::uint64_t run_seed =
          cfg.solver.master_seed + static_cast<std::uint64_t>(rep);
      RunResult r;
      r.variant = variant_name(solver.variant);
      r.seed = run_seed;
      r.swept = swept;
      if (swept) {
        r.sweep_param = sweep->param;
        r.sweep_value = value;
        r.run_id = r.variant + "-" + sweep->param + detail::fmt_value(value) + "-s" +
                   std::to_string(rep);
      } else {
        r.run_id = r.variant + "-s" + std::to_string(rep);
      }
      runs.push_back(std::move(r));
      SolverConfig sc = solver;
      sc.master_seed = run_seed;
      solver_cfgs.push_back(sc);
    }
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(runs.size());
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) return;
      try {
        runs[i].trace = detail::run_one(problem, solver_cfgs[i], nullptr);
        runs[i].csv = trace_to_csv(runs[i].trace, runs[i].run_id, runs[i].variant,
                                   runs[i].seed);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int nthreads = std::max(1, std::min<int>(jobs, static_cast<int>(runs.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error("run " + runs[i].run_id + " failed: " + errors[i]);
    }
  }

  json summary;
  summary["config"] = emit_config(cfg);
  if (sweep) {
    summary["sweep"] = {{"param", sweep->param}, {"values", sweep->values}};
  }
  summary["metadata"] = {
      {"rank_a", cfg.problem.rank_a},
      {"rank_b", cfg.problem.rank_b},
      {"neumann_depth_cap", cfg.solver.neumann.depth_cap},
      {"hvp_sign", "w = -grad_xy_g * v; upper update direction is grad_x_f + w"},
      {"ul_combine", "x + delta*(mean(x_T) - x); server mean, not sum, of deltas"}};
  json runs_json = json::array();
  for (const auto& r : runs) {
    const MetricRow& last = r.trace.rows.back();
    json rj;
    rj["run_id"] = r.run_id;
    rj["variant"] = r.variant;
    rj["seed"] = r.seed;
    if (r.swept) {
      rj["sweep_param"] = r.sweep_param;
      rj["sweep_value"] = r.sweep_value;
    }
    rj["k_final"] = last.k;
    rj["final_error_running_avg"] = last.error_running_avg;
    rj["final_error_inst"] = last.error_inst;
    rj["final_stationarity"] = last.stationarity;
    rj["ll_projections"] = last.counters.ll_projections;
    rj["ul_explicit_projections"] = last.counters.ul_explicit_projections;
    rj["ul_implicit_projections"] = last.counters.ul_implicit_projections;
    rj["g_grad_samples"] = last.counters.g_grad_samples;
    rj["g_hess_samples"] = last.counters.g_hess_samples;
    rj["f_grad_samples"] = last.counters.f_grad_samples;
    rj["ll_comm"] = last.comm.ll_rounds;
    rj["ul_comm"] = last.comm.ul_rounds + last.comm.hvp_rounds;
    rj["ml_comm"] = last.comm.ml_rounds;
    runs_json.push_back(rj);
  }
  summary["runs"] = runs_json;

  json groups = json::array();
  for (const auto& [value, swept] : values) {
    std::vector<double> err, llp, total;
    for (const auto& r : runs) {
      if (r.swept != swept || (swept && r.sweep_value != value)) continue;
      const MetricRow& last = r.trace.rows.back();
      err.push_back(last.error_running_avg);
      llp.push_back(static_cast<double>(last.counters.ll_projections));
      total.push_back(static_cast<double>(last.counters.ll_projections +
                                          last.counters.ul_explicit_projections +
                                          last.counters.ul_implicit_projections));
    }
    json gj;
    if (swept) gj["sweep_value"] = value;
    gj["median_final_error_running_avg"] = detail::median(err);
    gj["median_ll_projections"] = detail::median(llp);
    gj["median_total_projections"] = detail::median(total);
    groups.push_back(gj);
  }
  summary["groups"] = groups;

  if (write_files) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    for (const auto& r : runs) {
      std::ofstream f(fs::path(cfg.output_dir) / (r.run_id + ".csv"), std::ios::binary);
      f << r.csv;
    }
    std::ofstream f(fs::path(cfg.output_dir) / "summary.json", std::ios::binary);
    f << summary.dump(2) << "\n";
  }
  return {std::move(runs), std::move(summary)};
}

}  // namespace bilevel
