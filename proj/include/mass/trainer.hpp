#pragma once

#include <chrono>
#include <cmath>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mass/analysis.hpp"
#include "mass/model.hpp"
#include "mass/physics.hpp"
#include "mass/rng.hpp"
#include "mass/tape.hpp"

// Phase-based multi-system training: at phase k the first k+1 curriculum
// systems contribute summed losses, fresh i.i.d. batches are drawn every step,
// AdamW runs under linear warmup plus a cosine that restarts at every phase
// boundary, and an EMA of the parameters is what evaluation and analysis see.

namespace mass {

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.7;
  double beta2 = 0.8;
  double adam_eps = 1e-8;
  int batch = 512;
  int steps_per_phase = 10000;
  int warmup = 100;
  double ema = 0.99;
  double lambda_b = 0.5;
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double loss_threshold = 5e-3;
  int eval_batch = 4096;
  int dump_batch = 512;
  int width = 20;
  int hidden = 4;
  double b_init = 0.1;
  double final_init = 0.05;

  // rates and penalties may be zeroed for diagnostics, sizes must be positive
  void validate() const {
    auto pos = [](double v, const char* name) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    auto nonneg = [](double v, const char* name) {
      if (!(v >= 0.0)) throw std::invalid_argument(std::string(name) + " must be >= 0");
    };
    nonneg(lr, "lr");
    nonneg(weight_decay, "weight_decay");
    pos(beta1, "beta1");
    pos(beta2, "beta2");
    pos(batch, "batch");
    pos(steps_per_phase, "steps_per_phase");
    pos(warmup, "warmup");
    pos(ema, "ema");
    nonneg(lambda_b, "lambda_b");
    nonneg(lambda1, "lambda1");
    nonneg(lambda2, "lambda2");
    pos(loss_threshold, "loss_threshold");
    pos(eval_batch, "eval_batch");
    pos(dump_batch, "dump_batch");
    pos(width, "width");
    pos(hidden, "hidden");
    if (warmup >= steps_per_phase) throw std::invalid_argument("warmup must fit in a phase");
    if (dump_batch > eval_batch) throw std::invalid_argument("dump_batch exceeds eval_batch");
  }
};

// Linear ramp to `base` over the first `warmup` steps of each phase, then a
// cosine decay that reaches zero on the phase's final step; restarts at every
// phase boundary.
inline double lr_schedule(int step_in_phase, int phase_len = 10000, int warmup = 100,
                          double base = 5e-4) {
  if (step_in_phase < warmup) return base * step_in_phase / warmup;
  double p = static_cast<double>(step_in_phase - warmup) / (phase_len - 1 - warmup);
  return base * 0.5 * (1.0 + std::cos(M_PI * std::min(p, 1.0)));
}

// ---- AdamW ------------------------------------------------------------------------

// Decoupled-weight-decay Adam with per-parameter step counts, so bias
// correction starts fresh for nets that join the objective at a later phase.
struct AdamW {
  std::vector<double> m, v;
  std::vector<int> t;

  explicit AdamW(int n) : m(n, 0.0), v(n, 0.0), t(n, 0) {}

  void reset() {
    std::fill(m.begin(), m.end(), 0.0);
    std::fill(v.begin(), v.end(), 0.0);
    std::fill(t.begin(), t.end(), 0);
  }

  void update_range(std::span<double> theta, std::span<const double> grad, int begin, int end,
                    double lr_t, const TrainConfig& cfg) {
    for (int i = begin; i < end; ++i) {
      ++t[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      double mhat = m[i] / (1.0 - std::pow(cfg.beta1, t[i]));
      double vhat = v[i] / (1.0 - std::pow(cfg.beta2, t[i]));
      theta[i] -= lr_t * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta[i]);
    }
  }
};

inline void ema_update(std::span<double> ema, std::span<const double> theta, double beta) {
  for (size_t i = 0; i < ema.size(); ++i) ema[i] = beta * ema[i] + (1.0 - beta) * theta[i];
}

// ---- loss graph ---------------------------------------------------------------------

struct SystemGraph {
  SystemId id = SystemId::kSho;
  int d = 1;
  std::vector<NodeId> x_leaves, y_leaves, ydot_leaves;  // one batch leaf per coordinate
  TermBankNodes bank;
  PredictionNodes preds;
  NodeId mse_y = kNoNode;
  NodeId mse_x = kNoNode;
};

struct LossGraph {
  Tape tape;
  std::vector<SystemGraph> systems;
  NodeId loss = kNoNode;

  explicit LossGraph(int lanes) : tape(lanes) {}

  void load_batch(int sys, const Batch& b) {
    SystemGraph& g = systems[sys];
    for (int k = 0; k < g.d; ++k) {
      tape.set_leaf_batch(g.x_leaves[k], {b.x.data() + static_cast<size_t>(k) * b.n,
                                          static_cast<size_t>(b.n)});
      tape.set_leaf_batch(g.y_leaves[k], {b.y.data() + static_cast<size_t>(k) * b.n,
                                          static_cast<size_t>(b.n)});
      tape.set_leaf_batch(g.ydot_leaves[k], {b.ydot.data() + static_cast<size_t>(k) * b.n,
                                             static_cast<size_t>(b.n)});
    }
  }
};

// Records one tape covering the given systems. `with_loss` adds the MSE and
// regularizer heads; without it the graph ends at the predictions (evaluation
// and rollout mode).
inline LossGraph build_loss_graph(const ModelLayout& layout, std::span<const SystemId> active,
                                  std::span<const double> theta, const TrainConfig& cfg, int lanes,
                                  bool with_loss) {
  LossGraph g(lanes);
  Tape& t = g.tape;
  NodeId base = t.attach_params(theta);
  NodeId one = t.leaf(1.0);

  std::vector<NodeId> sys_losses;
  for (size_t j = 0; j < active.size(); ++j) {
    const SystemSpec& spec = system_spec(active[j]);
    const ModelLayout::SystemBlock& blk = layout.systems[j];
    SystemGraph sg;
    sg.id = active[j];
    sg.d = spec.dim;
    for (int k = 0; k < sg.d; ++k) {
      sg.x_leaves.push_back(t.leaf_batch_zero());
      sg.y_leaves.push_back(t.leaf_batch_zero());
      sg.ydot_leaves.push_back(t.leaf_batch_zero());
    }
    auto jets = augment_jets(t, sg.x_leaves, sg.y_leaves, one);
    JetNodes s = eval_net_jet(t, blk.net, base + blk.net_ofs, jets);
    std::vector<NodeId> b_nodes = {base + blk.b_ofs, base + blk.b_ofs + 1, base + blk.b_ofs + 2};
    sg.bank = build_term_bank(t, TermCatalog::standard(), s, sg.x_leaves, sg.y_leaves, b_nodes);

    if (with_loss) {
      // fused heads for training; the evaluation path below materializes the
      // per-term activations instead
      NodeId head = t.predict_head(sg.bank.terms, kTermCount, sg.d, base + layout.w_ydot(0),
                                   base + layout.w_xdot(0));
      sg.preds.d = sg.d;
      for (int k = 0; k < sg.d; ++k) {
        sg.preds.pred_y.push_back(head + k);
        sg.preds.pred_x.push_back(head + sg.d + k);
      }
      NodeId a_l1 = t.scale(head + 2 * sg.d, cfg.lambda2 / kTermCount);

      // sum over components of mean squared residuals; xdot's target is y
      std::vector<NodeId> comps_y, comps_x;
      for (int k = 0; k < sg.d; ++k) {
        NodeId dy = t.sub(sg.preds.pred_y[k], sg.ydot_leaves[k]);
        comps_y.push_back(t.mean_lanes(t.mul(dy, dy)));
        NodeId dx = t.sub(sg.preds.pred_x[k], sg.y_leaves[k]);
        comps_x.push_back(t.mean_lanes(t.mul(dx, dx)));
      }
      sg.mse_y = comps_y.size() == 1 ? comps_y[0] : t.sum(comps_y);
      sg.mse_x = comps_x.size() == 1 ? comps_x[0] : t.sum(comps_x);

      std::vector<NodeId> breg = {t.abs(base + blk.b_ofs), t.abs(base + blk.b_ofs + 1),
                                  t.abs(base + blk.b_ofs + 2)};
      NodeId b_l1 = t.scale(t.sum(breg), cfg.lambda_b);

      std::vector<NodeId> parts = {sg.mse_y, sg.mse_x, b_l1, a_l1};
      sys_losses.push_back(t.sum(parts));
    } else {
      sg.preds = build_predictions(t, sg.bank, base + layout.w_ydot(0), base + layout.w_xdot(0));
    }
    g.systems.push_back(std::move(sg));
  }

  if (with_loss) {
    std::vector<NodeId> w_abs;
    for (int i = 0; i < 2 * kTermCount; ++i) w_abs.push_back(t.abs(base + layout.final_ofs + i));
    sys_losses.push_back(t.scale(t.sum(w_abs), cfg.lambda1 / kTermCount));
    g.loss = t.sum(sys_losses);
  }
  return g;
}

// Spec surface for the per-step objective: records the graph and returns the
// summed loss node (tests read and differentiate it directly).
inline NodeId loss_node(LossGraph& g) { return g.loss; }

// ---- evaluation ------------------------------------------------------------------

// evaluation batches are frozen per system, shared by every run and seed
inline uint64_t eval_batch_seed(SystemId id) {
  return derive_seed(0x45564142ULL, static_cast<uint64_t>(id));
}

struct EvalResult {
  double mse_ydot = 0;
  double mse_xdot = 0;
  double mse() const { return mse_ydot + mse_xdot; }
};

// MSE of both heads on `batch` using the parameters already loaded in `g`,
// chunked through the graph's lane width.
inline EvalResult eval_mse(LossGraph& g, int sys, const Batch& batch) {
  const SystemGraph& sg = g.systems[sys];
  const int lanes = g.tape.lanes();
  if (batch.n % lanes != 0) throw std::logic_error("eval batch must be a multiple of lane width");
  EvalResult res;
  Batch chunk;
  chunk.d = batch.d;
  chunk.n = lanes;
  chunk.x.resize(static_cast<size_t>(batch.d) * lanes);
  chunk.y.resize(chunk.x.size());
  chunk.ydot.resize(chunk.x.size());
  for (int c = 0; c < batch.n / lanes; ++c) {
    for (int k = 0; k < batch.d; ++k) {
      std::copy_n(batch.x.data() + static_cast<size_t>(k) * batch.n + c * lanes, lanes,
                  chunk.x.data() + static_cast<size_t>(k) * lanes);
      std::copy_n(batch.y.data() + static_cast<size_t>(k) * batch.n + c * lanes, lanes,
                  chunk.y.data() + static_cast<size_t>(k) * lanes);
      std::copy_n(batch.ydot.data() + static_cast<size_t>(k) * batch.n + c * lanes, lanes,
                  chunk.ydot.data() + static_cast<size_t>(k) * lanes);
    }
    g.load_batch(sys, chunk);
    g.tape.forward_all();
    for (int k = 0; k < batch.d; ++k) {
      auto py = g.tape.values(sg.preds.pred_y[k]);
      auto px = g.tape.values(sg.preds.pred_x[k]);
      for (int l = 0; l < lanes; ++l) {
        double ey = py[l] - chunk.ydot[static_cast<size_t>(k) * lanes + l];
        double ex = px[l] - chunk.y[static_cast<size_t>(k) * lanes + l];
        res.mse_ydot += ey * ey;
        res.mse_xdot += ex * ex;
      }
    }
  }
  res.mse_ydot /= batch.n;
  res.mse_xdot /= batch.n;
  return res;
}

// weighted ydot-row activations on the first `n` samples of `batch`,
// laid out [sample][term][component]
inline std::vector<double> dump_activations(LossGraph& g, int sys, const Batch& batch, int n) {
  const SystemGraph& sg = g.systems[sys];
  const int lanes = g.tape.lanes();
  if (n % lanes != 0) throw std::logic_error("dump size must be a multiple of lane width");
  const int d = sg.d;
  std::vector<double> dump(static_cast<size_t>(n) * kTermCount * d, 0.0);
  Batch chunk;
  chunk.d = d;
  chunk.n = lanes;
  chunk.x.resize(static_cast<size_t>(d) * lanes);
  chunk.y.resize(chunk.x.size());
  chunk.ydot.resize(chunk.x.size());
  for (int c = 0; c < n / lanes; ++c) {
    for (int k = 0; k < d; ++k) {
      std::copy_n(batch.x.data() + static_cast<size_t>(k) * batch.n + c * lanes, lanes,
                  chunk.x.data() + static_cast<size_t>(k) * lanes);
      std::copy_n(batch.y.data() + static_cast<size_t>(k) * batch.n + c * lanes, lanes,
                  chunk.y.data() + static_cast<size_t>(k) * lanes);
    }
    g.load_batch(sys, chunk);
    g.tape.forward_all();
    for (int i = 0; i < kTermCount; ++i)
      for (int k = 0; k < d; ++k) {
        NodeId a = sg.preds.acts_y[static_cast<size_t>(i) * d + k];
        if (a == kNoNode) continue;
        auto vals = g.tape.values(a);
        for (int l = 0; l < lanes; ++l)
          dump[(static_cast<size_t>(c * lanes + l) * kTermCount + i) * d + k] =
              vals.size() == 1 ? vals[0] : vals[l];
      }
  }
  return dump;
}

// ---- curriculum run ------------------------------------------------------------------

struct PhaseOutcome {
  bool failed = false;
  int fail_step = -1;
  std::vector<double> loss_trace;
  std::vector<double> lr_trace;
  std::vector<int> sig_count_trace;
  std::vector<double> eval_mse;          // per active system, both heads summed
  std::vector<double> eval_mse_ydot;
  std::vector<double> eval_mse_xdot;
  bool correct = false;
  double wall_seconds = 0;
  std::vector<double> theta, theta_ema;  // snapshots at phase end
  std::vector<std::vector<double>> act_dumps;  // per active system
};

struct RunResult {
  uint64_t seed = 0;
  std::vector<SystemId> curriculum;
  ModelLayout layout;
  TrainConfig config;
  std::vector<PhaseOutcome> phases;
  std::vector<char> correct_flags;
  std::vector<char> consistent_flags;

  bool correct_at(int phase) const { return correct_flags[phase] != 0; }
  bool consistent_at(int phase) const { return consistent_flags[phase] != 0; }
};

inline uint64_t batch_seed(uint64_t run_seed, int phase, int step, int sys) {
  return derive_seed(run_seed, 0xB47C5EEDULL,
                     (static_cast<uint64_t>(phase) << 32) | static_cast<uint64_t>(step),
                     static_cast<uint64_t>(sys));
}

inline RunResult run_curriculum(const TrainConfig& cfg, std::span<const SystemId> curriculum,
                                uint64_t seed) {
  cfg.validate();
  if (curriculum.empty()) throw std::invalid_argument("curriculum must not be empty");

  RunResult run;
  run.seed = seed;
  run.curriculum.assign(curriculum.begin(), curriculum.end());
  run.layout = ModelLayout::make(curriculum, cfg.width, cfg.hidden);
  run.config = cfg;

  Rng init_rng(derive_seed(seed, 0x1217ULL));
  std::vector<double> theta = init_params(run.layout, init_rng, cfg.b_init, cfg.final_init);
  std::vector<double> ema(theta);
  AdamW opt(run.layout.total);

  // frozen evaluation batches, one per distinct system
  std::vector<Batch> eval_batches;
  for (SystemId id : curriculum) {
    Rng r(eval_batch_seed(id));
    eval_batches.push_back(sample_batch(system_spec(id), cfg.eval_batch, r));
  }

  bool prev_failed = false;
  for (int phase = 0; phase < static_cast<int>(curriculum.size()); ++phase) {
    auto t0 = std::chrono::steady_clock::now();
    PhaseOutcome out;
    std::span<const SystemId> active(curriculum.data(), phase + 1);
    if (prev_failed) opt.reset();

    LossGraph graph = [&] {
      try {
        return build_loss_graph(run.layout, active, theta, cfg, cfg.batch, true);
      } catch (const NonFiniteValue&) {
        // parameters already broken before this phase; record an empty failure
        return LossGraph(0);
      }
    }();
    if (graph.loss == kNoNode) {
      out.failed = true;
      out.fail_step = 0;
    }

    for (int step = 0; !out.failed && step < cfg.steps_per_phase; ++step) {
      double lr_t = lr_schedule(step, cfg.steps_per_phase, cfg.warmup, cfg.lr);
      for (int j = 0; j <= phase; ++j) {
        Rng brng(batch_seed(seed, phase, step, j));
        Batch b = sample_batch(system_spec(curriculum[j]), cfg.batch, brng);
        graph.load_batch(j, b);
      }
      graph.tape.set_param_values(theta);
      graph.tape.forward_all();
      double loss = graph.tape.value1(graph.loss);
      if (!std::isfinite(loss)) {
        out.failed = true;
        out.fail_step = step;
        break;
      }
      graph.tape.backward(graph.loss);
      std::span<const double> grad = graph.tape.param_adjoints();
      bool grad_ok = true;
      for (double gv : grad)
        if (!std::isfinite(gv)) {
          grad_ok = false;
          break;
        }
      if (!grad_ok) {
        out.failed = true;
        out.fail_step = step;
        break;
      }
      opt.update_range(theta, grad, 0, run.layout.system_end(phase), lr_t, cfg);
      opt.update_range(theta, grad, run.layout.final_ofs, run.layout.total, lr_t, cfg);
      ema_update(ema, theta, cfg.ema);

      out.loss_trace.push_back(loss);
      out.lr_trace.push_back(lr_t);
      out.sig_count_trace.push_back(significant_count(
          {theta.data() + run.layout.final_ofs, static_cast<size_t>(kTermCount)}, 0.99));
    }

    // evaluation and dumps always use the EMA parameters
    if (graph.loss != kNoNode) {
      LossGraph eval_graph = [&]() -> LossGraph {
        try {
          return build_loss_graph(run.layout, active, ema, cfg, cfg.dump_batch, false);
        } catch (const NonFiniteValue&) {
          return LossGraph(0);
        }
      }();
      if (!eval_graph.systems.empty()) {
        for (int j = 0; j <= phase; ++j) {
          EvalResult er = eval_mse(eval_graph, j, eval_batches[j]);
          out.eval_mse.push_back(er.mse());
          out.eval_mse_ydot.push_back(er.mse_ydot);
          out.eval_mse_xdot.push_back(er.mse_xdot);
          out.act_dumps.push_back(dump_activations(eval_graph, j, eval_batches[j], cfg.dump_batch));
        }
      } else {
        out.failed = true;
      }
    }
    double worst = std::numeric_limits<double>::infinity();
    if (!out.eval_mse.empty())
      worst = *std::max_element(out.eval_mse.begin(), out.eval_mse.end());
    out.correct = worst < cfg.loss_threshold;

    out.theta = theta;
    out.theta_ema = ema;
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    prev_failed = out.failed;
    run.phases.push_back(std::move(out));
  }

  run.correct_flags.resize(run.phases.size());
  run.consistent_flags.resize(run.phases.size());
  bool all = true;
  for (size_t p = 0; p < run.phases.size(); ++p) {
    run.correct_flags[p] = run.phases[p].correct ? 1 : 0;
    all = all && run.phases[p].correct;
    run.consistent_flags[p] = all ? 1 : 0;
  }
  return run;
}

// ---- seed sweeps -----------------------------------------------------------------------

// Runs seeds across a small worker pool; results come back in seed order and
// per-seed failures are captured, never fatal.
struct SweepEntry {
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunResult result;
};

inline std::vector<SweepEntry> sweep(const TrainConfig& cfg, std::span<const SystemId> curriculum,
                                     std::span<const uint64_t> seeds, int workers = 0,
                                     const std::function<void(const SweepEntry&)>& on_done = {}) {
  if (workers <= 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<int>(workers, static_cast<int>(seeds.size()));
  std::vector<SweepEntry> entries(seeds.size());
  std::mutex mu;
  size_t next = 0;
  auto work = [&] {
    for (;;) {
      size_t mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= seeds.size()) return;
        mine = next++;
      }
      SweepEntry& e = entries[mine];
      e.seed = seeds[mine];
      try {
        e.result = run_curriculum(cfg, curriculum, seeds[mine]);
        e.ok = true;
      } catch (const std::exception& ex) {
        e.ok = false;
        e.error = ex.what();
      }
      if (on_done) {
        std::lock_guard<std::mutex> lock(mu);
        on_done(e);
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  return entries;
}

}  // namespace mass
