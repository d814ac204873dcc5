#pragma once

#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mass/analysis.hpp"
#include "mass/model.hpp"
#include "mass/physics.hpp"
#include "mass/simulate.hpp"
#include "mass/store.hpp"
#include "mass/svg.hpp"
#include "mass/trainer.hpp"

// Run-level analysis: the interpretability battery applied to persisted runs,
// plus CSV/SVG emission for the whole figure set. Each analysis writes a CSV
// and an SVG side by side, named by (analysis, system, phase, seed-set hash).

namespace mass {

// ---- numeric jets of a stored scalar network ---------------------------------------

struct JetSamples {
  int b = 0;
  int d = 0;
  std::vector<double> s;    // b
  std::vector<double> sx;   // b x d
  std::vector<double> syy;  // b x d x d
  std::vector<double> sxy;  // b x d x d
};

// evaluates S and the blocks the Euler-Lagrange head needs on the given batch
inline JetSamples eval_jet_samples(const NetShape& shape, std::span<const double> net_params,
                                   const Batch& batch, int b) {
  const int d = batch.d;
  JetSamples out;
  out.b = b;
  out.d = d;
  out.s.resize(b);
  out.sx.resize(static_cast<size_t>(b) * d);
  out.syy.resize(static_cast<size_t>(b) * d * d);
  out.sxy.resize(static_cast<size_t>(b) * d * d);

  Tape t(b);
  NodeId base = t.attach_params(net_params);
  std::vector<NodeId> xids, yids;
  for (int k = 0; k < d; ++k)
    xids.push_back(t.leaf_batch({batch.x.data() + static_cast<size_t>(k) * batch.n,
                                 static_cast<size_t>(b)}));
  for (int k = 0; k < d; ++k)
    yids.push_back(t.leaf_batch({batch.y.data() + static_cast<size_t>(k) * batch.n,
                                 static_cast<size_t>(b)}));
  auto jets = augment_jets(t, xids, yids, t.leaf(1.0));
  JetNodes s = eval_net_jet(t, shape, base, jets);
  for (int i = 0; i < b; ++i) {
    Jet2 j = read_jet2(t, s, i);
    out.s[i] = j.value;
    for (int k = 0; k < d; ++k) out.sx[static_cast<size_t>(i) * d + k] = j.sx(k);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) {
        out.syy[(static_cast<size_t>(i) * d + r) * d + c] = j.syy(r, c);
        out.sxy[(static_cast<size_t>(i) * d + r) * d + c] = j.sxy(r, c);
      }
  }
  return out;
}

// ---- run-level wrappers ----------------------------------------------------------

inline Batch eval_batch_for(const RunRecord& rec, int sys) {
  Rng r(eval_batch_seed(rec.curriculum[sys]));
  return sample_batch(system_spec(rec.curriculum[sys]), rec.config.eval_batch, r);
}

inline ActivationMatrix run_activation_matrix(const RunRecord& rec, int phase, int sys) {
  const SystemSpec& spec = system_spec(rec.curriculum[sys]);
  const int b = rec.config.dump_batch;
  ActivationMatrix m = make_activation_matrix(rec.act_dumps[phase][sys], b, kTermCount, spec.dim);
  Batch eb = eval_batch_for(rec, sys);
  m.sample_x.assign(eb.x.begin(), eb.x.end());
  m.sample_y.assign(eb.y.begin(), eb.y.end());
  // keep only the dumped prefix of the evaluation batch
  std::vector<double> px, py;
  for (int k = 0; k < spec.dim; ++k) {
    px.insert(px.end(), eb.x.begin() + static_cast<size_t>(k) * eb.n,
              eb.x.begin() + static_cast<size_t>(k) * eb.n + b);
    py.insert(py.end(), eb.y.begin() + static_cast<size_t>(k) * eb.n,
              eb.y.begin() + static_cast<size_t>(k) * eb.n + b);
  }
  m.sample_x = std::move(px);
  m.sample_y = std::move(py);
  return m;
}

// least squares of the learned scalar on [1, T, V] of the system's closed forms
inline TheoryFit classify_theory(const RunRecord& rec, int phase, int sys) {
  const SystemSpec& spec = system_spec(rec.curriculum[sys]);
  const auto& blk = rec.layout.systems[sys];
  const int b = rec.config.dump_batch;
  Batch eb = eval_batch_for(rec, sys);
  std::span<const double> net(rec.theta_ema[phase].data() + blk.net_ofs,
                              static_cast<size_t>(blk.net.param_count()));
  std::vector<double> s(b), tvals(b), vvals(b), x(spec.dim), y(spec.dim);
  for (int i = 0; i < b; ++i) {
    for (int k = 0; k < spec.dim; ++k) {
      x[k] = eb.x[static_cast<size_t>(k) * eb.n + i];
      y[k] = eb.y[static_cast<size_t>(k) * eb.n + i];
    }
    s[i] = net_value(blk.net, net, x, y);
    tvals[i] = kinetic_value(spec, x, y);
    vvals[i] = potential_value(spec, x, y);
  }
  return classify_theory_values(s, tvals, vvals);
}

// Reference prediction targets for one formulation: the ydot head implied by
// the analytic scalar, evaluated per sample (b x d).
inline std::vector<double> reference_targets(const SystemSpec& spec, const Batch& batch, int b,
                                             bool lagrangian) {
  std::vector<double> out(static_cast<size_t>(b) * spec.dim);
  std::vector<double> x(spec.dim), y(spec.dim), a(spec.dim);
  for (int i = 0; i < b; ++i) {
    for (int k = 0; k < spec.dim; ++k) {
      x[k] = batch.x[static_cast<size_t>(k) * batch.n + i];
      y[k] = batch.y[static_cast<size_t>(k) * batch.n + i];
    }
    if (lagrangian) {
      // Euler-Lagrange head on the pinned Lagrangian
      euler_lagrange_accel(spec.lagrangian, x, y, a);
    } else {
      // canonical-equations head on T + V: ydot = -d(T+V)/dx
      const int m = 2 * spec.dim;
      std::vector<D2> xv(spec.dim), yv(spec.dim);
      for (int k = 0; k < spec.dim; ++k) xv[k] = D2::var(m, k, x[k]);
      for (int k = 0; k < spec.dim; ++k) yv[k] = D2::cst(m, y[k]);
      D2 h = spec.kinetic(xv, yv) + spec.potential(xv, yv);
      for (int k = 0; k < spec.dim; ++k) a[k] = -h.grad(k);
    }
    for (int k = 0; k < spec.dim; ++k) out[static_cast<size_t>(i) * spec.dim + k] = a[k];
  }
  return out;
}

// Held-out R^2 of regressing the run's significant activations onto the
// reference head; rows are flattened sample components.
inline double fit_reference_activations(const RunRecord& rec, int phase, int sys,
                                        bool lagrangian) {
  const SystemSpec& spec = system_spec(rec.curriculum[sys]);
  const int b = rec.config.dump_batch, d = spec.dim;
  ActivationMatrix m = run_activation_matrix(rec, phase, sys);
  std::vector<int> cols = significant_indices(m.mean_abs_per_term(), 0.99);
  const auto& dump = rec.act_dumps[phase][sys];

  std::vector<double> x(static_cast<size_t>(b) * d * cols.size());
  for (int i = 0; i < b; ++i)
    for (int k = 0; k < d; ++k)
      for (size_t c = 0; c < cols.size(); ++c)
        x[(static_cast<size_t>(i) * d + k) * cols.size() + c] =
            dump[(static_cast<size_t>(i) * kTermCount + cols[c]) * d + k];

  Batch eb = eval_batch_for(rec, sys);
  std::vector<double> target = reference_targets(spec, eb, b, lagrangian);
  uint64_t split = derive_seed(0x5EEDF17ULL, static_cast<uint64_t>(rec.curriculum[sys]),
                               static_cast<uint64_t>(phase));
  return linear_fit_r2(x, b * d, static_cast<int>(cols.size()), target, split);
}

// Constrained two-term fit against the run's own Euler-Lagrange pair
// u = pinv(Syy + b I) Sx and v = pinv(Syy + b I) Sxy y.
inline DistillResult distill_lagrangian(const RunRecord& rec, int phase, int sys) {
  const SystemSpec& spec = system_spec(rec.curriculum[sys]);
  const auto& blk = rec.layout.systems[sys];
  const int b = rec.config.dump_batch, d = spec.dim;
  Batch eb = eval_batch_for(rec, sys);
  std::span<const double> net(rec.theta_ema[phase].data() + blk.net_ofs,
                              static_cast<size_t>(blk.net.param_count()));
  JetSamples js = eval_jet_samples(blk.net, net, eb, b);
  double b_yy = rec.theta_ema[phase][blk.b_ofs + 1];

  std::vector<double> u(static_cast<size_t>(b) * d), v(static_cast<size_t>(b) * d);
  std::vector<double> pinv(static_cast<size_t>(d) * d), tmp(d);
  for (int i = 0; i < b; ++i) {
    stabilized_pinv(js.syy.data() + static_cast<size_t>(i) * d * d, d, b_yy, pinv.data());
    const double* sx = js.sx.data() + static_cast<size_t>(i) * d;
    const double* sxy = js.sxy.data() + static_cast<size_t>(i) * d * d;
    for (int r = 0; r < d; ++r) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += pinv[r * d + c] * sx[c];
      u[static_cast<size_t>(i) * d + r] = acc;
    }
    for (int r = 0; r < d; ++r) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += sxy[r * d + c] * eb.y[static_cast<size_t>(c) * eb.n + i];
      tmp[r] = acc;
    }
    for (int r = 0; r < d; ++r) {
      double acc = 0;
      for (int c = 0; c < d; ++c) acc += pinv[r * d + c] * tmp[c];
      v[static_cast<size_t>(i) * d + r] = acc;
    }
  }
  uint64_t split = derive_seed(0xD15711ULL, static_cast<uint64_t>(rec.curriculum[sys]),
                               static_cast<uint64_t>(phase));
  return distill_constrained(rec.act_dumps[phase][sys], b, kTermCount, d, u, v, split);
}

// control variant: the same constrained fit against two arbitrary bank terms
inline DistillResult distill_control(const RunRecord& rec, int phase, int sys, int term_u,
                                     int term_v) {
  const SystemSpec& spec = system_spec(rec.curriculum[sys]);
  const int b = rec.config.dump_batch, d = spec.dim;
  const auto& blk = rec.layout.systems[sys];
  Batch eb = eval_batch_for(rec, sys);
  std::span<const double> net(rec.theta_ema[phase].data() + blk.net_ofs,
                              static_cast<size_t>(blk.net.param_count()));
  // unweighted term values for the chosen targets come from the bank itself
  LossGraph g(b);
  {
    std::vector<SystemId> active(rec.curriculum.begin(), rec.curriculum.begin() + sys + 1);
    g = build_loss_graph(rec.layout, active, rec.theta_ema[phase], rec.config, b, false);
  }
  Batch chunk;
  chunk.d = d;
  chunk.n = b;
  for (int k = 0; k < d; ++k) {
    chunk.x.insert(chunk.x.end(), eb.x.begin() + static_cast<size_t>(k) * eb.n,
                   eb.x.begin() + static_cast<size_t>(k) * eb.n + b);
    chunk.y.insert(chunk.y.end(), eb.y.begin() + static_cast<size_t>(k) * eb.n,
                   eb.y.begin() + static_cast<size_t>(k) * eb.n + b);
  }
  chunk.ydot.assign(static_cast<size_t>(d) * b, 0.0);
  g.load_batch(sys, chunk);
  g.tape.forward_all();
  std::vector<double> u(static_cast<size_t>(b) * d), v(static_cast<size_t>(b) * d);
  for (int i = 0; i < b; ++i)
    for (int k = 0; k < d; ++k) {
      NodeId tu = g.systems[sys].bank.term(term_u, k);
      NodeId tv = g.systems[sys].bank.term(term_v, k);
      u[static_cast<size_t>(i) * d + k] = tu == kNoNode ? 0.0 : g.tape.value_at(tu, i);
      v[static_cast<size_t>(i) * d + k] = tv == kNoNode ? 0.0 : g.tape.value_at(tv, i);
    }
  uint64_t split = derive_seed(0xC011701ULL, static_cast<uint64_t>(term_u),
                               static_cast<uint64_t>(term_v));
  return distill_constrained(rec.act_dumps[phase][sys], b, kTermCount, d, u, v, split);
}

// ---- sweep-level aggregation --------------------------------------------------------

struct LoadedSweep {
  fs::path dir;
  std::vector<RunRecord> runs;
  std::string seed_hash;  // first 8 hex of sha256 over the sorted seed list
};

struct NoRuns : StoreError {
  explicit NoRuns(const std::string& p) : StoreError("no run records under " + p) {}
};

inline LoadedSweep load_sweep(const fs::path& dir) {
  LoadedSweep sweep;
  sweep.dir = dir;
  std::vector<fs::path> run_dirs;
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && fs::exists(e.path() / "manifest.txt")) run_dirs.push_back(e.path());
  std::sort(run_dirs.begin(), run_dirs.end());
  for (const auto& p : run_dirs) sweep.runs.push_back(load_run(p));
  if (sweep.runs.empty()) throw NoRuns(dir.string());
  std::sort(sweep.runs.begin(), sweep.runs.end(),
            [](const RunRecord& a, const RunRecord& b) { return a.seed < b.seed; });
  std::string seeds;
  for (const auto& r : sweep.runs) seeds += std::to_string(r.seed) + ",";
  sweep.seed_hash = Sha256::hash_hex(seeds).substr(0, 8);
  return sweep;
}

inline std::string analysis_stem(const std::string& analysis, const std::string& system,
                                 int phase, const std::string& seed_hash) {
  std::ostringstream ss;
  ss << analysis << "_" << system;
  if (phase >= 0) ss << "_phase" << std::setw(2) << std::setfill('0') << phase;
  ss << "_" << seed_hash;
  return ss.str();
}

inline void emit_pair(const fs::path& out_dir, const std::string& stem, const std::string& csv,
                      const std::string& svg_body, bool plots) {
  fs::create_directories(out_dir);
  write_text_file(out_dir / (stem + ".csv"), csv);
  if (plots) write_text_file(out_dir / (stem + ".svg"), svg_body);
}

inline const char* label_name(TheoryFit::Label l) {
  switch (l) {
    case TheoryFit::Label::kHamiltonian:
      return "hamiltonian";
    case TheoryFit::Label::kLagrangian:
      return "lagrangian";
    default:
      return "degenerate";
  }
}

// theory fractions per phase, classified on the system introduced at each
// phase, restricted to seeds correct at that phase
struct TheoryCensus {
  int phase;
  std::string system;
  int correct = 0;
  int hamiltonian = 0;
  int lagrangian = 0;
  int degenerate = 0;
};

inline std::vector<TheoryCensus> theory_fractions(const LoadedSweep& sweep) {
  std::vector<TheoryCensus> rows;
  if (sweep.runs.empty()) return rows;
  int phases = sweep.runs[0].phases;
  for (int p = 0; p < phases; ++p) {
    TheoryCensus row;
    row.phase = p;
    row.system = system_spec(sweep.runs[0].curriculum[p]).name;
    for (const RunRecord& rec : sweep.runs) {
      if (!rec.correct_at(p)) continue;
      ++row.correct;
      TheoryFit fit = classify_theory(rec, p, p);
      if (fit.label == TheoryFit::Label::kHamiltonian) ++row.hamiltonian;
      else if (fit.label == TheoryFit::Label::kLagrangian) ++row.lagrangian;
      else ++row.degenerate;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---- the full analysis set ----------------------------------------------------------

inline void emit_analyses(const LoadedSweep& sweep, std::span<const std::string> analyses,
                          const fs::path& out_dir, bool plots) {
  const std::string& hash = sweep.seed_hash;
  const RunRecord& first = sweep.runs[0];
  const int phases = first.phases;
  auto wants = [&](const std::string& a) {
    for (const auto& x : analyses)
      if (x == a) return true;
    return false;
  };

  if (wants("counts")) {
    std::string csv = "phase,system,correct_fraction,consistent_fraction,mean_sig_count_95\n";
    svg::Series solid{"% correct", {}, "#1f77b4"};
    svg::Series dashed{"% consistently correct", {}, "#ff7f0e"};
    svg::Series sig{"mean significant terms (95%)", {}, "#2ca02c"};
    for (int p = 0; p < phases; ++p) {
      int correct = 0, consistent = 0;
      double sig_mean = 0;
      for (const RunRecord& rec : sweep.runs) {
        correct += rec.correct_at(p);
        consistent += rec.consistent_flags[p];
        std::span<const double> wy(rec.theta_ema[p].data() + rec.layout.final_ofs,
                                   static_cast<size_t>(kTermCount));
        sig_mean += significant_count(wy, 0.95);
      }
      double n = static_cast<double>(sweep.runs.size());
      csv += std::to_string(p) + "," + system_spec(first.curriculum[p]).name + "," +
             fmt_g17(correct / n) + "," + fmt_g17(consistent / n) + "," + fmt_g17(sig_mean / n) +
             "\n";
      solid.y.push_back(correct / n);
      dashed.y.push_back(consistent / n);
      sig.y.push_back(sig_mean / n / kTermCount);
    }
    std::vector<svg::Series> series = {solid, dashed, sig};
    emit_pair(out_dir, analysis_stem("counts", "all", -1, hash), csv,
              svg::line_chart("correct fraction and significant terms per phase", series), plots);
  }

  if (wants("sig_trace")) {
    // per-run loss and significant-count traces for the first phase
    for (const RunRecord& rec : sweep.runs) {
      MetricsTrace tr = load_metrics(rec.dir, phases - 1);
      std::string csv = "step,loss,sig_count\n";
      svg::Series loss{"loss", {}, "#1f77b4"};
      svg::Series sig{"significant weights (99%)", {}, "#d62728"};
      for (size_t s = 0; s < tr.loss.size(); ++s) {
        csv += std::to_string(s) + "," + fmt_g17(tr.loss[s]) + "," +
               std::to_string(tr.sig_count[s]) + "\n";
        loss.y.push_back(tr.loss[s]);
        sig.y.push_back(tr.sig_count[s] / static_cast<double>(kTermCount));
      }
      std::vector<svg::Series> series = {loss, sig};
      emit_pair(out_dir,
                analysis_stem("sig_trace_seed" + std::to_string(rec.seed), "all", phases - 1, hash),
                csv, svg::line_chart("training loss and significant weights", series, true),
                plots);
    }
  }

  if (wants("clusters")) {
    for (int p = 0; p < phases; ++p)
      for (int s = 0; s <= p; ++s) {
        const std::string sys_name = system_spec(first.curriculum[s]).name;
        ActivationMatrix m = run_activation_matrix(first, p, s);
        ClusterResult res;
        try {
          res = correlation_cluster(m);
        } catch (const std::exception&) {
          continue;  // fewer than two significant columns
        }
        std::string csv = "term_index,term_name\n";
        for (int i : res.ordering)
          csv += std::to_string(res.kept[i]) + "," +
                 TermCatalog::standard().term_name(res.kept[i]) + "\n";
        csv += "correlations\n";
        for (int r = 0; r < res.k; ++r)
          csv += csv_row({res.corr.data() + static_cast<size_t>(r) * res.k,
                          static_cast<size_t>(res.k)});
        emit_pair(out_dir, analysis_stem("clusters", sys_name, p, hash), csv,
                  svg::heatmap("clustered activation correlations: " + sys_name,
                               res.corr, res.k, res.k, true),
                  plots);
      }
  }

  if (wants("strips")) {
    for (int s = 0; s < static_cast<int>(first.curriculum.size()); ++s) {
      std::vector<ActivationMatrix> mats;
      for (const RunRecord& rec : sweep.runs)
        mats.push_back(run_activation_matrix(rec, phases - 1, s));
      if (mats.size() < 2) continue;
      std::vector<double> strip = activation_strip(mats);
      const std::string sys_name = system_spec(first.curriculum[s]).name;
      std::string csv = "seed";
      for (int i = 0; i < kTermCount; ++i) csv += ",t" + std::to_string(i);
      csv += "\n";
      for (size_t r = 0; r < sweep.runs.size(); ++r) {
        csv += std::to_string(sweep.runs[r].seed);
        for (int i = 0; i < kTermCount; ++i)
          csv += "," + fmt_g17(strip[r * kTermCount + i]);
        csv += "\n";
      }
      emit_pair(out_dir, analysis_stem("strips", sys_name, phases - 1, hash), csv,
                svg::heatmap("activation strengths across seeds: " + sys_name, strip,
                             static_cast<int>(sweep.runs.size()), kTermCount, false),
                plots);
    }
  }

  if (wants("pca")) {
    for (int s = 0; s < static_cast<int>(first.curriculum.size()); ++s) {
      std::vector<ActivationMatrix> mats;
      for (const RunRecord& rec : sweep.runs)
        mats.push_back(run_activation_matrix(rec, phases - 1, s));
      PcaAgreement agg = pca_agreement(mats);
      const std::string sys_name = system_spec(first.curriculum[s]).name;
      std::string csv = "run,explained_first\n";
      for (int i = 0; i < agg.runs; ++i)
        csv += std::to_string(i) + "," + fmt_g17(agg.explained_first[i]) + "\n";
      csv += "cross_correlation\n";
      for (int r = 0; r < agg.runs; ++r)
        csv += csv_row({agg.cross_corr.data() + static_cast<size_t>(r) * agg.runs,
                        static_cast<size_t>(agg.runs)});
      std::vector<double> offdiag;
      for (int r = 0; r < agg.runs; ++r)
        for (int c = r + 1; c < agg.runs; ++c)
          offdiag.push_back(agg.cross_corr[static_cast<size_t>(r) * agg.runs + c]);
      emit_pair(out_dir, analysis_stem("pca", sys_name, phases - 1, hash), csv,
                svg::histogram("first-PC cross-seed correlations: " + sys_name,
                               offdiag.empty() ? std::vector<double>{0.0} : offdiag, 24),
                plots);
    }
  }

  if (wants("theory")) {
    std::vector<TheoryCensus> rows = theory_fractions(sweep);
    std::string csv = "phase,system,correct,hamiltonian,lagrangian,degenerate\n";
    svg::Series hf{"fraction hamiltonian", {}, "#1f77b4"};
    svg::Series lf{"fraction lagrangian", {}, "#d62728"};
    for (const auto& r : rows) {
      csv += std::to_string(r.phase) + "," + r.system + "," + std::to_string(r.correct) + "," +
             std::to_string(r.hamiltonian) + "," + std::to_string(r.lagrangian) + "," +
             std::to_string(r.degenerate) + "\n";
      double n = std::max(1, r.correct);
      hf.y.push_back(r.hamiltonian / n);
      lf.y.push_back(r.lagrangian / n);
    }
    std::vector<svg::Series> series = {hf, lf};
    emit_pair(out_dir, analysis_stem("theory", "all", -1, hash), csv,
              svg::line_chart("theory fractions among correct seeds", series), plots);
  }

  if (wants("reffit")) {
    std::string csv = "phase,system,n,r2_lagrangian_mean,r2_lagrangian_std,r2_hamiltonian_mean,"
                      "r2_hamiltonian_std\n";
    svg::Series lmean{"R2 lagrangian", {}, "#d62728"};
    svg::Series hmean{"R2 hamiltonian", {}, "#1f77b4"};
    for (int p = 0; p < phases; ++p) {
      std::vector<double> rl, rh;
      for (const RunRecord& rec : sweep.runs) {
        if (!rec.correct_at(p)) continue;
        rl.push_back(fit_reference_activations(rec, p, p, true));
        rh.push_back(fit_reference_activations(rec, p, p, false));
      }
      auto stats = [](const std::vector<double>& v) {
        if (v.empty()) return std::pair<double, double>(0, 0);
        double m = 0;
        for (double x : v) m += x;
        m /= v.size();
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<double, double>(m, std::sqrt(s / v.size()));
      };
      auto [lm, ls] = stats(rl);
      auto [hm, hs] = stats(rh);
      csv += std::to_string(p) + "," + system_spec(first.curriculum[p]).name + "," +
             std::to_string(rl.size()) + "," + fmt_g17(lm) + "," + fmt_g17(ls) + "," +
             fmt_g17(hm) + "," + fmt_g17(hs) + "\n";
      lmean.y.push_back(lm);
      hmean.y.push_back(hm);
    }
    std::vector<svg::Series> series = {lmean, hmean};
    emit_pair(out_dir, analysis_stem("reffit", "all", -1, hash), csv,
              svg::line_chart("reference-fit R2 among correct seeds", series), plots);
  }

  if (wants("distill")) {
    std::string csv = "phase,system,seed,r2_train,r2_test\n";
    std::vector<double> tests;
    for (int p = 0; p < phases; ++p) {
      for (const RunRecord& rec : sweep.runs) {
        if (!rec.correct_at(p)) continue;
        DistillResult res = distill_lagrangian(rec, p, p);
        csv += std::to_string(p) + "," + system_spec(first.curriculum[p]).name + "," +
               std::to_string(rec.seed) + "," + fmt_g17(res.r2_train) + "," +
               fmt_g17(res.r2_test) + "\n";
        if (p == phases - 1) tests.push_back(res.r2_test);
      }
    }
    emit_pair(out_dir, analysis_stem("distill", "all", -1, hash), csv,
              svg::histogram("held-out distillation R2 (final phase)",
                             tests.empty() ? std::vector<double>{0.0} : tests, 20),
              plots);
  }
}

// ---- trajectories -----------------------------------------------------------------

inline std::string trajectory_csv(const Trajectory& traj) {
  std::string csv = "t";
  for (int k = 0; k < traj.d; ++k) csv += ",x" + std::to_string(k);
  for (int k = 0; k < traj.d; ++k) csv += ",y" + std::to_string(k);
  if (!traj.energies.empty()) csv += ",E";
  csv += "\n";
  for (size_t i = 0; i < traj.times.size(); ++i) {
    csv += fmt_g17(traj.times[i]);
    auto st = traj.state(static_cast<int>(i));
    for (double v : st) csv += "," + fmt_g17(v);
    if (!traj.energies.empty()) csv += "," + fmt_g17(traj.energies[i]);
    csv += "\n";
  }
  return csv;
}

inline std::string trajectory_svg(const std::string& title, const Trajectory& traj,
                                  const Trajectory* reference = nullptr) {
  std::vector<svg::Series> series;
  for (int k = 0; k < traj.d; ++k) {
    svg::Series s{"x" + std::to_string(k), {}, k == 0 ? "#1f77b4" : "#2ca02c"};
    for (int i = 0; i <= traj.steps(); ++i) s.y.push_back(traj.state(i)[k]);
    series.push_back(std::move(s));
  }
  if (reference)
    for (int k = 0; k < reference->d; ++k) {
      svg::Series s{"ref x" + std::to_string(k), {}, "#d62728"};
      for (int i = 0; i <= reference->steps(); ++i) s.y.push_back(reference->state(i)[k]);
      series.push_back(std::move(s));
    }
  return svg::line_chart(title, series);
}

// MASS-backed acceleration field from a stored run: the ydot head under the
// EMA parameters, with xdot = y by convention.
class MassField {
 public:
  MassField(const RunRecord& rec, int phase, int sys)
      : rec_(rec),
        sys_(sys),
        graph_(build_loss_graph(rec.layout,
                                std::span<const SystemId>(rec.curriculum.data(), sys + 1),
                                rec.theta_ema[phase], rec.config, 1, false)) {}

  void operator()(std::span<const double> x, std::span<const double> y, std::span<double> out) {
    SystemGraph& sg = graph_.systems[sys_];
    for (int k = 0; k < sg.d; ++k) {
      graph_.tape.set_leaf_batch(sg.x_leaves[k], {&x[k], 1});
      graph_.tape.set_leaf_batch(sg.y_leaves[k], {&y[k], 1});
    }
    graph_.tape.forward_all();
    for (int k = 0; k < sg.d; ++k) out[k] = graph_.tape.value1(sg.preds.pred_y[k]);
  }

 private:
  const RunRecord& rec_;
  int sys_;
  LossGraph graph_;
};

}  // namespace mass
