#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mass/model.hpp"
#include "mass/sha256.hpp"
#include "mass/trainer.hpp"

// Durable run persistence: one directory per run, raw little-endian float64
// payloads described by a text manifest, every file covered by a SHA-256 so
// analyses replay without retraining and tampering is loud. Writes go to a
// temp directory and rename into place.

namespace mass {

namespace fs = std::filesystem;

struct StoreError : std::runtime_error {
  explicit StoreError(const std::string& w) : std::runtime_error(w) {}
};
struct NotARunRecord : StoreError {
  explicit NotARunRecord(const std::string& p) : StoreError("not a run record: " + p) {}
};
struct MissingArtifact : StoreError {
  explicit MissingArtifact(const std::string& p) : StoreError("missing artifact: " + p) {}
};
struct IncompatibleRecord : StoreError {
  explicit IncompatibleRecord(const std::string& w) : StoreError("incompatible record: " + w) {}
};
struct CorruptRecord : StoreError {
  explicit CorruptRecord(const std::string& w) : StoreError("corrupt record: " + w) {}
};

inline constexpr const char* kStoreVersion = "mass-run/1";

// ---- small io helpers ------------------------------------------------------------

inline void write_text_file(const fs::path& p, const std::string& body) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw StoreError("cannot write " + p.string());
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
}

inline std::string read_text_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw MissingArtifact(p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// raw little-endian float64 array (this code targets little-endian hosts;
// loaders reject records whose manifest disagrees)
inline std::string f64_bytes(std::span<const double> v) {
  std::string s(v.size() * sizeof(double), '\0');
  std::memcpy(s.data(), v.data(), s.size());
  return s;
}

inline std::vector<double> f64_from_bytes(const std::string& s, const std::string& name) {
  if (s.size() % sizeof(double) != 0) throw CorruptRecord(name + " has a partial float64");
  std::vector<double> v(s.size() / sizeof(double));
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

// %.17g round-trips doubles exactly through text
inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_row(std::span<const double> vals) {
  std::string s;
  for (size_t i = 0; i < vals.size(); ++i) {
    if (i) s += ",";
    s += fmt_g17(vals[i]);
  }
  s += "\n";
  return s;
}

// ---- manifests -------------------------------------------------------------------

struct Manifest {
  std::map<std::string, std::string> keys;
  std::map<std::string, std::string> file_hashes;  // relpath -> sha256

  std::string serialize() const {
    std::string s;
    for (const auto& [k, v] : keys) s += k + " = " + v + "\n";
    for (const auto& [p, h] : file_hashes) s += "file " + p + " " + h + "\n";
    return s;
  }

  static Manifest parse(const std::string& body) {
    Manifest m;
    std::istringstream ss(body);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      if (line.rfind("file ", 0) == 0) {
        size_t sp = line.rfind(' ');
        m.file_hashes[line.substr(5, sp - 5)] = line.substr(sp + 1);
      } else {
        size_t eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        m.keys[line.substr(0, eq)] = line.substr(eq + 3);
      }
    }
    return m;
  }
};

// ---- run records ------------------------------------------------------------------

inline std::string curriculum_names(std::span<const SystemId> curriculum) {
  std::string s;
  for (size_t i = 0; i < curriculum.size(); ++i) {
    if (i) s += ",";
    s += system_spec(curriculum[i]).name;
  }
  return s;
}

inline std::vector<SystemId> curriculum_from_names(const std::string& names) {
  std::vector<SystemId> out;
  std::istringstream ss(names);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const SystemSpec* spec = find_system(tok);
    if (!spec) throw IncompatibleRecord("unknown system '" + tok + "'");
    out.push_back(spec->id);
  }
  return out;
}

inline std::string config_text(const TrainConfig& c) {
  std::ostringstream ss;
  ss << "lr = " << fmt_g17(c.lr) << "\n"
     << "weight_decay = " << fmt_g17(c.weight_decay) << "\n"
     << "beta1 = " << fmt_g17(c.beta1) << "\n"
     << "beta2 = " << fmt_g17(c.beta2) << "\n"
     << "batch = " << c.batch << "\n"
     << "steps_per_phase = " << c.steps_per_phase << "\n"
     << "warmup = " << c.warmup << "\n"
     << "ema = " << fmt_g17(c.ema) << "\n"
     << "lambda_b = " << fmt_g17(c.lambda_b) << "\n"
     << "lambda1 = " << fmt_g17(c.lambda1) << "\n"
     << "lambda2 = " << fmt_g17(c.lambda2) << "\n"
     << "loss_threshold = " << fmt_g17(c.loss_threshold) << "\n"
     << "eval_batch = " << c.eval_batch << "\n"
     << "dump_batch = " << c.dump_batch << "\n"
     << "width = " << c.width << "\n"
     << "hidden = " << c.hidden << "\n"
     << "b_init = " << fmt_g17(c.b_init) << "\n"
     << "final_init = " << fmt_g17(c.final_init) << "\n";
  return ss.str();
}

inline TrainConfig config_from_text(const std::string& body) {
  TrainConfig c;
  std::istringstream ss(body);
  std::string line;
  while (std::getline(ss, line)) {
    size_t eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    std::string k = line.substr(0, eq), v = line.substr(eq + 3);
    double x = std::strtod(v.c_str(), nullptr);
    if (k == "lr") c.lr = x;
    else if (k == "weight_decay") c.weight_decay = x;
    else if (k == "beta1") c.beta1 = x;
    else if (k == "beta2") c.beta2 = x;
    else if (k == "batch") c.batch = static_cast<int>(x);
    else if (k == "steps_per_phase") c.steps_per_phase = static_cast<int>(x);
    else if (k == "warmup") c.warmup = static_cast<int>(x);
    else if (k == "ema") c.ema = x;
    else if (k == "lambda_b") c.lambda_b = x;
    else if (k == "lambda1") c.lambda1 = x;
    else if (k == "lambda2") c.lambda2 = x;
    else if (k == "loss_threshold") c.loss_threshold = x;
    else if (k == "eval_batch") c.eval_batch = static_cast<int>(x);
    else if (k == "dump_batch") c.dump_batch = static_cast<int>(x);
    else if (k == "width") c.width = static_cast<int>(x);
    else if (k == "hidden") c.hidden = static_cast<int>(x);
    else if (k == "b_init") c.b_init = x;
    else if (k == "final_init") c.final_init = x;
    else throw IncompatibleRecord("unknown config key '" + k + "'");
  }
  return c;
}

inline std::string phase_dirname(int phase) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "phase_%02d", phase);
  return buf;
}

// Writes the record under dir (atomically via temp + rename) and returns the
// final path. Layout:
//   manifest.txt, config.ini, catalog.txt, tensors.txt, run.log (unhashed)
//   phase_XX/{metrics.csv, eval.csv, params.f64, params_ema.f64, acts_<system>.f64}
inline fs::path save_run(const RunResult& run, const fs::path& dir) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::map<std::string, std::string> files;  // relpath -> content
  files["config.ini"] = config_text(run.config);
  files["catalog.txt"] = TermCatalog::standard().text();
  std::vector<std::string> names;
  for (SystemId id : run.curriculum) names.push_back(system_spec(id).name);
  files["tensors.txt"] = describe_tensors(run.layout, names);

  std::string flags;
  for (size_t p = 0; p < run.phases.size(); ++p) {
    const PhaseOutcome& out = run.phases[p];
    std::string pd = phase_dirname(static_cast<int>(p)) + "/";

    std::string metrics = "step,lr,loss,sig_count\n";
    for (size_t s = 0; s < out.loss_trace.size(); ++s)
      metrics += std::to_string(s) + "," + fmt_g17(out.lr_trace[s]) + "," +
                 fmt_g17(out.loss_trace[s]) + "," + std::to_string(out.sig_count_trace[s]) + "\n";
    files[pd + "metrics.csv"] = metrics;

    std::string ev = "system,mse,mse_ydot,mse_xdot,correct,failed\n";
    for (size_t j = 0; j < out.eval_mse.size(); ++j)
      ev += names[j] + "," + fmt_g17(out.eval_mse[j]) + "," + fmt_g17(out.eval_mse_ydot[j]) + "," +
            fmt_g17(out.eval_mse_xdot[j]) + "," + (out.correct ? "1" : "0") + "," +
            (out.failed ? "1" : "0") + "\n";
    files[pd + "eval.csv"] = ev;

    files[pd + "params.f64"] = f64_bytes(out.theta);
    files[pd + "params_ema.f64"] = f64_bytes(out.theta_ema);
    for (size_t j = 0; j < out.act_dumps.size(); ++j)
      files[pd + "acts_" + names[j] + ".f64"] = f64_bytes(out.act_dumps[j]);
  }

  Manifest m;
  m.keys["version"] = kStoreVersion;
  m.keys["seed"] = std::to_string(run.seed);
  m.keys["curriculum"] = curriculum_names(run.curriculum);
  m.keys["catalog_hash"] = TermCatalog::standard().hash();
  m.keys["phases"] = std::to_string(run.phases.size());
  m.keys["dump_batch"] = std::to_string(run.config.dump_batch);
  m.keys["hash_algorithm"] = "sha256";
  {
    std::string c, k, f;
    for (size_t p = 0; p < run.phases.size(); ++p) {
      c += run.correct_flags[p] ? "1" : "0";
      k += run.consistent_flags[p] ? "1" : "0";
      f += run.phases[p].failed ? "1" : "0";
    }
    m.keys["correct"] = c;
    m.keys["consistent"] = k;
    m.keys["failed"] = f;
  }
  for (const auto& [rel, body] : files) m.file_hashes[rel] = Sha256::hash_hex(body);

  for (const auto& [rel, body] : files) {
    fs::path p = tmp / rel;
    fs::create_directories(p.parent_path());
    write_text_file(p, body);
  }
  write_text_file(tmp / "manifest.txt", m.serialize());

  // timestamps and wall-clock live only in the unhashed log
  std::string log;
  for (size_t p = 0; p < run.phases.size(); ++p)
    log += phase_dirname(static_cast<int>(p)) + " wall_seconds " +
           fmt_g17(run.phases[p].wall_seconds) + "\n";
  write_text_file(tmp / "run.log", log);

  fs::remove_all(dir);
  fs::rename(tmp, dir);
  return dir;
}

// Loaded view of a persisted run. Parameter vectors and dumps are pulled
// eagerly; traces stay in the CSV until asked for.
struct RunRecord {
  fs::path dir;
  Manifest manifest;
  uint64_t seed = 0;
  std::vector<SystemId> curriculum;
  TrainConfig config;
  int phases = 0;
  std::vector<char> correct_flags, consistent_flags, failed_flags;
  std::vector<std::vector<double>> theta;      // per phase
  std::vector<std::vector<double>> theta_ema;  // per phase
  // act_dumps[phase][system] with the trainer's layout
  std::vector<std::vector<std::vector<double>>> act_dumps;
  ModelLayout layout;

  bool correct_at(int phase) const { return correct_flags[phase] != 0; }
};

inline RunRecord load_run(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.txt")) throw NotARunRecord(dir.string());
  RunRecord rec;
  rec.dir = dir;
  rec.manifest = Manifest::parse(read_text_file(dir / "manifest.txt"));
  if (rec.manifest.keys["version"] != kStoreVersion)
    throw IncompatibleRecord("version '" + rec.manifest.keys["version"] + "'");
  if (rec.manifest.keys["catalog_hash"] != TermCatalog::standard().hash())
    throw IncompatibleRecord("catalog hash mismatch");

  // verify every hashed file before trusting anything
  for (const auto& [rel, want] : rec.manifest.file_hashes) {
    std::string body = read_text_file(dir / rel);
    std::string got = Sha256::hash_hex(body);
    if (got != want) throw CorruptRecord(rel + " hash mismatch");
  }

  rec.seed = std::strtoull(rec.manifest.keys["seed"].c_str(), nullptr, 10);
  rec.curriculum = curriculum_from_names(rec.manifest.keys["curriculum"]);
  rec.config = config_from_text(read_text_file(dir / "config.ini"));
  rec.phases = std::atoi(rec.manifest.keys["phases"].c_str());
  rec.layout = ModelLayout::make(rec.curriculum, rec.config.width, rec.config.hidden);

  auto parse_flags = [&](const std::string& key) {
    std::vector<char> out;
    for (char c : rec.manifest.keys[key]) out.push_back(c == '1' ? 1 : 0);
    return out;
  };
  rec.correct_flags = parse_flags("correct");
  rec.consistent_flags = parse_flags("consistent");
  rec.failed_flags = parse_flags("failed");

  std::vector<std::string> names;
  for (SystemId id : rec.curriculum) names.push_back(system_spec(id).name);
  for (int p = 0; p < rec.phases; ++p) {
    std::string pd = phase_dirname(p) + "/";
    rec.theta.push_back(f64_from_bytes(read_text_file(dir / (pd + "params.f64")), "params"));
    rec.theta_ema.push_back(
        f64_from_bytes(read_text_file(dir / (pd + "params_ema.f64")), "params_ema"));
    if (static_cast<int>(rec.theta.back().size()) != rec.layout.total)
      throw CorruptRecord("parameter snapshot has wrong length");
    std::vector<std::vector<double>> dumps;
    for (int j = 0; j <= p && j < static_cast<int>(names.size()); ++j)
      dumps.push_back(
          f64_from_bytes(read_text_file(dir / (pd + "acts_" + names[j] + ".f64")), "acts"));
    rec.act_dumps.push_back(std::move(dumps));
  }
  return rec;
}

// metrics trace re-read for figure emission
struct MetricsTrace {
  std::vector<double> lr, loss;
  std::vector<int> sig_count;
};

inline MetricsTrace load_metrics(const fs::path& run_dir, int phase) {
  MetricsTrace tr;
  std::istringstream ss(read_text_file(run_dir / phase_dirname(phase) / "metrics.csv"));
  std::string line;
  std::getline(ss, line);  // header
  while (std::getline(ss, line)) {
    double step, lr, loss, sig;
    if (std::sscanf(line.c_str(), "%lg,%lg,%lg,%lg", &step, &lr, &loss, &sig) == 4) {
      tr.lr.push_back(lr);
      tr.loss.push_back(loss);
      tr.sig_count.push_back(static_cast<int>(sig));
    }
  }
  return tr;
}

}  // namespace mass
