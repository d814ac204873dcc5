#pragma once

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mass/config.hpp"
#include "mass/report.hpp"
#include "mass/simulate.hpp"
#include "mass/store.hpp"
#include "mass/trainer.hpp"

// Command-line entry point: generate | sweep | analyze | simulate | report.
// Exit codes: 0 success, 1 usage, 2 data/domain error, 3 numerical failure.

namespace mass {

namespace cli_detail {

inline ExperimentConfig load_config(const std::string& file,
                                    const std::vector<std::string>& sets) {
  ExperimentConfig cfg;
  if (!file.empty()) cfg = parse_config_text(read_text_file(file));
  for (const std::string& kv : sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.train.validate();
  if (const char* env = std::getenv("MASS_OUT")) cfg.out = env;
  return cfg;
}

inline int cmd_generate(const ExperimentConfig& cfg, int n, uint64_t seed) {
  fs::path out = fs::path(cfg.out) / "datasets";
  fs::create_directories(out);
  for (SystemId id : cfg.systems) {
    const SystemSpec& spec = system_spec(id);
    Rng rng(derive_seed(seed, 0xDA7AULL, static_cast<uint64_t>(id)));
    Batch b = sample_batch(spec, n, rng);
    std::string csv;
    for (int k = 0; k < b.d; ++k) csv += (k ? "," : "") + std::string("x") + std::to_string(k);
    for (int k = 0; k < b.d; ++k) csv += ",y" + std::to_string(k);
    for (int k = 0; k < b.d; ++k) csv += ",ydot" + std::to_string(k);
    csv += "\n";
    for (int i = 0; i < b.n; ++i) {
      for (int k = 0; k < b.d; ++k)
        csv += (k ? "," : "") + fmt_g17(b.x[static_cast<size_t>(k) * b.n + i]);
      for (int k = 0; k < b.d; ++k) csv += "," + fmt_g17(b.y[static_cast<size_t>(k) * b.n + i]);
      for (int k = 0; k < b.d; ++k)
        csv += "," + fmt_g17(b.ydot[static_cast<size_t>(k) * b.n + i]);
      csv += "\n";
    }
    write_text_file(out / (spec.name + ".csv"), csv);
    std::cout << "wrote " << (out / (spec.name + ".csv")).string() << " (" << b.n << " rows)\n";
  }
  return 0;
}

inline int cmd_sweep(const ExperimentConfig& cfg) {
  fs::path out(cfg.out);
  fs::create_directories(out);
  write_text_file(out / "experiment.ini", cfg.to_text());
  std::vector<SweepEntry> entries =
      sweep(cfg.train, cfg.systems, cfg.seeds, cfg.workers, [](const SweepEntry& e) {
        if (e.ok) {
          std::cout << "seed " << e.seed << ":";
          for (int p = 0; p < static_cast<int>(e.result.phases.size()); ++p)
            std::cout << " " << (e.result.correct_at(p) ? "ok" : "fail");
          std::cout << "\n";
        } else {
          std::cout << "seed " << e.seed << ": error: " << e.error << "\n";
        }
        std::cout.flush();
      });

  int saved = 0, failed = 0, revivals = 0;
  std::string agg = "seed,ok";
  const int phases = static_cast<int>(cfg.systems.size());
  for (int p = 0; p < phases; ++p)
    agg += ",correct_p" + std::to_string(p) + ",consistent_p" + std::to_string(p);
  agg += "\n";
  for (const SweepEntry& e : entries) {
    agg += std::to_string(e.seed) + "," + (e.ok ? "1" : "0");
    if (e.ok) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "run_seed%06llu",
                    static_cast<unsigned long long>(e.seed));
      save_run(e.result, out / buf);
      ++saved;
      bool was_wrong = false, revived = false;
      for (int p = 0; p < phases; ++p) {
        agg += std::string(",") + (e.result.correct_at(p) ? "1" : "0") + "," +
               (e.result.consistent_at(p) ? "1" : "0");
        if (!e.result.correct_at(p)) was_wrong = true;
        else if (was_wrong) revived = true;
      }
      if (revived) ++revivals;
    } else {
      ++failed;
      for (int p = 0; p < phases; ++p) agg += ",,";
    }
    agg += "\n";
  }
  write_text_file(out / "aggregates.csv", agg);
  std::cout << "sweep complete: " << saved << " runs saved, " << failed << " failed, "
            << revivals << " revival(s) observed\n";
  return 0;
}

inline int cmd_analyze(const std::string& sweep_dir, const std::vector<std::string>& analyses,
                       const std::string& out_dir, bool plots) {
  LoadedSweep sweep = load_sweep(sweep_dir);
  fs::path out = out_dir.empty() ? fs::path(sweep_dir) / "analysis" : fs::path(out_dir);
  emit_analyses(sweep, analyses, out, plots);
  std::cout << "analyses written under " << out.string() << "\n";
  return 0;
}

inline PhasePoint parse_init(const std::string& text, int d) {
  // "x0,x1;y0,y1"
  size_t semi = text.find(';');
  if (semi == std::string::npos) throw ConfigError("--init expects 'x...;y...'");
  auto xs = split_list(text.substr(0, semi));
  auto ys = split_list(text.substr(semi + 1));
  if (static_cast<int>(xs.size()) != d || static_cast<int>(ys.size()) != d)
    throw ConfigError("--init needs " + std::to_string(d) + " coordinates per side");
  PhasePoint p;
  for (const auto& v : xs) p.x.push_back(std::strtod(v.c_str(), nullptr));
  for (const auto& v : ys) p.y.push_back(std::strtod(v.c_str(), nullptr));
  return p;
}

inline int cmd_simulate(const std::string& run_dir, int phase, const std::string& system,
                        const std::string& init, double dt, int steps,
                        const std::string& out_dir) {
  const SystemSpec* spec = find_system(system);
  if (!spec) {
    std::string valid;
    for (const auto& s : all_systems()) valid += (valid.empty() ? "" : ", ") + s.name;
    std::cerr << "unknown system '" << system << "' (valid: " << valid << ")\n";
    return 1;
  }
  PhasePoint start = parse_init(init, spec->dim);
  fs::path out = out_dir.empty() ? fs::path("trajectories") : fs::path(out_dir);
  if (const char* env = std::getenv("MASS_OUT")) out = fs::path(env) / out;
  fs::create_directories(out);

  Trajectory traj;
  std::string stem;
  if (run_dir.empty()) {
    traj = rk4_rollout(*spec, start, dt, steps);
    stem = "analytic_" + spec->name;
  } else {
    RunRecord rec = load_run(run_dir);
    int sys = -1;
    for (size_t j = 0; j < rec.curriculum.size(); ++j)
      if (rec.curriculum[j] == spec->id) sys = static_cast<int>(j);
    if (sys < 0) {
      std::cerr << "run was not trained on '" << system << "'\n";
      return 2;
    }
    int p = phase < 0 ? rec.phases - 1 : phase;
    if (sys > p) {
      std::cerr << "system '" << system << "' is not active at phase " << p << "\n";
      return 2;
    }
    MassField field(rec, p, sys);
    AccelField f = [&field](std::span<const double> x, std::span<const double> y,
                            std::span<double> o) { field(x, y, o); };
    traj = rk4_rollout(f, start, dt, steps, spec);
    stem = "mass_" + spec->name + "_seed" + std::to_string(rec.seed);
  }
  write_text_file(out / (stem + ".csv"), trajectory_csv(traj));

  Trajectory reference = rk4_rollout(*spec, start, dt, std::max(traj.steps(), 1));
  write_text_file(out / (stem + ".svg"),
                  trajectory_svg("trajectory: " + spec->name, traj,
                                 run_dir.empty() ? nullptr : &reference));
  if (traj.blowup_index >= 0) {
    std::cerr << "trajectory blew up at step " << traj.blowup_index << "\n";
    return 3;
  }
  bool relative = true;
  double drift = energy_drift(traj, 100, &relative);
  std::cout << "wrote " << (out / (stem + ".csv")).string() << " energy drift per 100 steps: "
            << drift << (relative ? " (relative)" : " (absolute)") << "\n";
  return 0;
}

inline int cmd_report(const std::string& sweep_dir, const std::string& out_dir, bool plots) {
  LoadedSweep sweep = load_sweep(sweep_dir);
  fs::path out = out_dir.empty() ? fs::path(sweep_dir) / "report" : fs::path(out_dir);
  std::vector<std::string> all = {"counts",    "sig_trace", "clusters", "strips",
                                  "pca",       "theory",    "reffit",   "distill"};
  emit_analyses(sweep, all, out, plots);

  // scalar-function contour gallery and first-PC histograms
  const RunRecord& first = sweep.runs[0];
  const int phases = first.phases;
  int shown = 0;
  for (const RunRecord& rec : sweep.runs) {
    if (shown >= 6) break;
    for (int s = 0; s < static_cast<int>(rec.curriculum.size()); ++s) {
      const SystemSpec& spec = system_spec(rec.curriculum[s]);
      if (spec.dim != 1) continue;
      const auto& blk = rec.layout.systems[s];
      std::span<const double> net(rec.theta_ema[phases - 1].data() + blk.net_ofs,
                                  static_cast<size_t>(blk.net.param_count()));
      const int G = 48;
      std::vector<double> grid(static_cast<size_t>(G) * G);
      double lo = -1.5, hi = 1.5;
      double mn = 1e300, mx = -1e300;
      for (int r = 0; r < G; ++r)
        for (int c = 0; c < G; ++c) {
          double y = hi - (hi - lo) * r / (G - 1);
          double x = lo + (hi - lo) * c / (G - 1);
          double v = net_value(blk.net, net, std::vector<double>{x}, std::vector<double>{y});
          grid[static_cast<size_t>(r) * G + c] = v;
          mn = std::min(mn, v);
          mx = std::max(mx, v);
        }
      for (double& v : grid) v = mx > mn ? (v - mn) / (mx - mn) : 0.0;
      write_text_file(out / ("contour_" + spec.name + "_seed" + std::to_string(rec.seed) + ".svg"),
                      svg::heatmap("learned scalar: " + spec.name + " seed " +
                                       std::to_string(rec.seed),
                                   grid, G, G, false));
    }
    ++shown;
  }
  for (int s = 0; s < static_cast<int>(first.curriculum.size()); ++s) {
    const std::string sys_name = system_spec(first.curriculum[s]).name;
    try {
      ActivationMatrix m = run_activation_matrix(first, phases - 1, s);
      PcaResult pc = pca_first_component(m);
      write_text_file(out / ("pc1_hist_" + sys_name + ".svg"),
                      svg::histogram("first-PC projections: " + sys_name, pc.projection, 32));
    } catch (const DegenerateRun&) {
    }
  }
  std::cout << "report written under " << out.string() << "\n";
  return 0;
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"multi-system scalar scientists: train, analyze and simulate"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;

  auto* gen = app.add_subcommand("generate", "sample datasets to CSV");
  int gen_n = 512;
  uint64_t gen_seed = 0;
  gen->add_option("--config", config_file, "experiment config file");
  gen->add_option("--set", sets, "override config entries (section.key=value)");
  gen->add_option("--n", gen_n, "samples per system");
  gen->add_option("--seed", gen_seed, "sampling seed");

  auto* sw = app.add_subcommand("sweep", "train the configured seeds");
  sw->add_option("--config", config_file, "experiment config file");
  sw->add_option("--set", sets, "override config entries (section.key=value)");

  auto* an = app.add_subcommand("analyze", "run analyses over a sweep directory");
  std::string sweep_dir, out_dir, analyses_csv;
  bool no_plots = false;
  an->add_option("--sweep", sweep_dir, "sweep directory")->required();
  an->add_option("--analyses", analyses_csv, "comma list of analyses");
  an->add_option("--out", out_dir, "output directory");
  an->add_flag("--no-plots", no_plots, "CSV only");

  auto* sim = app.add_subcommand("simulate", "RK4 rollout of an analytic or learned field");
  std::string sim_run, sim_system = "sho", sim_init = "1;0", sim_out;
  double sim_dt = 0.05;
  int sim_steps = 400, sim_phase = -1;
  sim->add_option("--run", sim_run, "run directory (omit for the analytic field)");
  sim->add_option("--phase", sim_phase, "phase snapshot to use (default: last)");
  sim->add_option("--system", sim_system, "system name");
  sim->add_option("--init", sim_init, "initial state 'x...;y...'");
  sim->add_option("--dt", sim_dt, "time step");
  sim->add_option("--steps", sim_steps, "step count");
  sim->add_option("--out", sim_out, "output directory");

  auto* rep = app.add_subcommand("report", "emit the full figure set for a sweep");
  rep->add_option("--sweep", sweep_dir, "sweep directory")->required();
  rep->add_option("--out", out_dir, "output directory");
  rep->add_flag("--no-plots", no_plots, "CSV only");

  std::vector<const char*> argv;
  argv.push_back("mass");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed())
      return cli_detail::cmd_generate(cli_detail::load_config(config_file, sets), gen_n, gen_seed);
    if (sw->parsed()) return cli_detail::cmd_sweep(cli_detail::load_config(config_file, sets));
    if (an->parsed()) {
      std::vector<std::string> analyses =
          analyses_csv.empty()
              ? std::vector<std::string>{"counts", "clusters", "strips", "pca",
                                         "theory", "reffit",   "distill"}
              : split_list(analyses_csv);
      return cli_detail::cmd_analyze(sweep_dir, analyses, out_dir, !no_plots);
    }
    if (sim->parsed()) {
      if (sim_dt <= 0.0) {
        std::cerr << "--dt must be positive\n";
        return 1;
      }
      if (sim_steps < 1) {
        std::cerr << "--steps must be at least 1\n";
        return 1;
      }
      return cli_detail::cmd_simulate(sim_run, sim_phase, sim_system, sim_init, sim_dt, sim_steps,
                                      sim_out);
    }
    if (rep->parsed()) return cli_detail::cmd_report(sweep_dir, out_dir, !no_plots);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return 2;
  } catch (const StoreError& e) {
    std::cerr << "store error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteValue& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace mass
