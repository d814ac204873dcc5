#pragma once

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mass/physics.hpp"
#include "mass/store.hpp"
#include "mass/trainer.hpp"

// Experiment configuration: a sectioned key = value file, validated up front
// (unknown keys are rejected), with command-line flags layered on top.

namespace mass {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& w) : std::runtime_error(w) {}
};

struct ExperimentConfig {
  TrainConfig train;
  std::vector<SystemId> systems = {SystemId::kSho};
  std::vector<uint64_t> seeds = {0};
  std::vector<std::string> analyses = {"counts",    "sig_trace", "clusters", "strips",
                                       "pca",       "theory",    "reffit",   "distill"};
  std::string out = "runs";
  bool plots = true;
  int workers = 0;  // 0 = hardware concurrency

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "train.lr",           "train.weight_decay", "train.beta1",
        "train.beta2",        "train.batch",        "train.steps_per_phase",
        "train.warmup",       "train.ema",          "train.lambda_b",
        "train.lambda1",      "train.lambda2",      "train.loss_threshold",
        "train.eval_batch",   "train.dump_batch",   "train.width",
        "train.hidden",       "train.b_init",       "train.final_init",
        "experiment.systems", "experiment.seeds",   "experiment.analyses",
        "experiment.out",     "experiment.plots",   "experiment.workers",
    };
    return keys;
  }

  void apply(const std::string& dotted_key, const std::string& value);
  std::string to_text() const;
};

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    size_t a = tok.find_first_not_of(" \t");
    size_t b = tok.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(tok.substr(a, b - a + 1));
  }
  return out;
}

// seeds accept comma lists and inclusive ranges: "0..19" or "3,5,9"
inline std::vector<uint64_t> parse_seeds(const std::string& s) {
  std::vector<uint64_t> seeds;
  for (const std::string& tok : split_list(s)) {
    size_t dots = tok.find("..");
    if (dots != std::string::npos) {
      uint64_t lo = std::strtoull(tok.substr(0, dots).c_str(), nullptr, 10);
      uint64_t hi = std::strtoull(tok.substr(dots + 2).c_str(), nullptr, 10);
      if (hi < lo) throw ConfigError("seed range '" + tok + "' is reversed");
      for (uint64_t v = lo; v <= hi; ++v) seeds.push_back(v);
    } else {
      seeds.push_back(std::strtoull(tok.c_str(), nullptr, 10));
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

inline void ExperimentConfig::apply(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
  auto d = [&] { return std::strtod(value.c_str(), nullptr); };
  auto i = [&] { return std::atoi(value.c_str()); };
  if (key == "train.lr") train.lr = d();
  else if (key == "train.weight_decay") train.weight_decay = d();
  else if (key == "train.beta1") train.beta1 = d();
  else if (key == "train.beta2") train.beta2 = d();
  else if (key == "train.batch") train.batch = i();
  else if (key == "train.steps_per_phase") train.steps_per_phase = i();
  else if (key == "train.warmup") train.warmup = i();
  else if (key == "train.ema") train.ema = d();
  else if (key == "train.lambda_b") train.lambda_b = d();
  else if (key == "train.lambda1") train.lambda1 = d();
  else if (key == "train.lambda2") train.lambda2 = d();
  else if (key == "train.loss_threshold") train.loss_threshold = d();
  else if (key == "train.eval_batch") train.eval_batch = i();
  else if (key == "train.dump_batch") train.dump_batch = i();
  else if (key == "train.width") train.width = i();
  else if (key == "train.hidden") train.hidden = i();
  else if (key == "train.b_init") train.b_init = d();
  else if (key == "train.final_init") train.final_init = d();
  else if (key == "experiment.systems") {
    systems.clear();
    for (const std::string& name : split_list(value)) {
      const SystemSpec* spec = find_system(name);
      if (!spec) {
        std::string valid;
        for (const auto& s : all_systems()) valid += (valid.empty() ? "" : ", ") + s.name;
        throw ConfigError("unknown system '" + name + "' (valid: " + valid + ")");
      }
      systems.push_back(spec->id);
    }
    if (systems.empty()) throw ConfigError("system list is empty");
  } else if (key == "experiment.seeds") {
    seeds = parse_seeds(value);
  } else if (key == "experiment.analyses") {
    analyses = split_list(value);
  } else if (key == "experiment.out") {
    out = value;
  } else if (key == "experiment.plots") {
    plots = value == "true" || value == "1" || value == "yes";
  } else if (key == "experiment.workers") {
    workers = i();
  }
}

// "[section]\nkey = value" parser; keys are addressed as section.key
inline ExperimentConfig parse_config_text(const std::string& body) {
  ExperimentConfig cfg;
  std::istringstream ss(body);
  std::string line, section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    size_t h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    size_t a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    size_t b = line.find_last_not_of(" \t\r");
    line = line.substr(a, b - a + 1);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("bad section header at line " + std::to_string(lineno));
      section = line.substr(1, line.size() - 2);
      if (section != "train" && section != "experiment")
        throw ConfigError("unknown section '" + section + "'");
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value at line " + std::to_string(lineno));
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string s) {
      size_t x = s.find_first_not_of(" \t");
      size_t y = s.find_last_not_of(" \t");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    key = trim(key);
    value = trim(value);
    if (section.empty()) throw ConfigError("key outside any section at line " + std::to_string(lineno));
    cfg.apply(section + "." + key, value);
  }
  cfg.train.validate();
  return cfg;
}

inline std::string ExperimentConfig::to_text() const {
  std::ostringstream ss;
  ss << "[train]\n";
  std::istringstream tc(config_text(train));
  std::string line;
  while (std::getline(tc, line)) ss << line << "\n";
  ss << "[experiment]\n";
  ss << "systems = ";
  for (size_t i = 0; i < systems.size(); ++i)
    ss << (i ? "," : "") << system_spec(systems[i]).name;
  ss << "\nseeds = ";
  for (size_t i = 0; i < seeds.size(); ++i) ss << (i ? "," : "") << seeds[i];
  ss << "\nanalyses = ";
  for (size_t i = 0; i < analyses.size(); ++i) ss << (i ? "," : "") << analyses[i];
  ss << "\nout = " << out << "\n";
  ss << "plots = " << (plots ? "true" : "false") << "\n";
  ss << "workers = " << workers << "\n";
  return ss.str();
}

}  // namespace mass
