#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bilevel/harness.hpp"
#include "bilevel/verify.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

int do_run(const std::string& config_path, int jobs, const std::string& out_dir,
           const std::optional<bilevel::SweepSpec>& sweep) {
  bilevel::ExperimentConfig cfg = bilevel::parse_config(slurp(config_path));
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = bilevel::run_experiment(cfg, sweep, jobs);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  for (const auto& r : out.runs) {
    const auto& last = r.trace.rows.back();
    std::cout << r.run_id << "  k=" << last.k
              << "  error_running_avg=" << last.error_running_avg
              << "  ll_proj=" << last.counters.ll_projections << "\n";
  }
  std::cout << out.runs.size() << " run(s) written to " << cfg.output_dir << " in " << ms
            << " ms\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equality-constrained stochastic bilevel optimization harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir, param, values_csv;
  int jobs = 1;
  int d = 12;
  std::uint64_t seed = 0;

  CLI::App* run = app.add_subcommand("run", "execute the runs described by a config file");
  run->add_option("--config", config_path, "JSON config path")->required();
  run->add_option("--jobs", jobs, "parallel runs");
  run->add_option("--out", out_dir, "output directory (overrides config)");

  CLI::App* verify = app.add_subcommand("verify", "run the oracle checks on a small instance");
  verify->add_option("--d", d, "problem dimension (<= 20)");
  verify->add_option("--seed", seed, "instance seed");

  CLI::App* sweep = app.add_subcommand("sweep", "run a config once per parameter value");
  sweep->add_option("--config", config_path, "JSON config path")->required();
  sweep->add_option("--param", param, "solver parameter to sweep")->required();
  sweep->add_option("--values", values_csv, "comma-separated values")->required();
  sweep->add_option("--jobs", jobs, "parallel runs");
  sweep->add_option("--out", out_dir, "output directory (overrides config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      return do_run(config_path, jobs, out_dir, std::nullopt);
    }
    if (verify->parsed()) {
      return bilevel::print_report(bilevel::verify(d, seed));
    }
    if (sweep->parsed()) {
      bilevel::SweepSpec spec{param, parse_values(values_csv)};
      return do_run(config_path, jobs, out_dir, spec);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
