#pragma once

// Run configuration: a small sectioned key/value format
//
//   [model]
//   type = impflow
//   blocks = 4
//
// Unknown sections or keys are rejected with the offending line number.
// Presets expand to full field sets first; later keys override them.

#include <cctype>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#include "impflow/trainer.hpp"

namespace impflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { ResFlow, ImpFlow };

struct RunConfig {
  DatasetSpec dataset;
  ModelKind model_kind = ModelKind::ImpFlow;
  int blocks = 4;
  int width = 128;
  int depth = 4;  // linear layers per residual net
  double c = 0.999;
  ActivationKind activation = ActivationKind::Sine;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string out_dir;

  void validate() const {
    if (blocks < 1) throw ConfigError("config: model.blocks must be >= 1");
    if (width < 1) throw ConfigError("config: model.width must be >= 1");
    if (depth < 1) throw ConfigError("config: model.depth must be >= 1");
    if (!(c > 0.0 && c <= 1.0)) throw ConfigError("config: model.c must be in (0,1]");
    try {
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  FlowModel build_model(RandomState& rng) const {
    return model_kind == ModelKind::ImpFlow
               ? make_impflow(dataset.data_dim(), blocks, width, depth, activation, c, rng)
               : make_resflow(dataset.data_dim(), blocks, width, depth, activation, c, rng);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline double parse_double(const std::string& v, int line) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(line) + ": not a number: " + v);
  }
}

inline long parse_int(const std::string& v, int line) {
  try {
    size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(line) + ": not an integer: " + v);
  }
}

inline void apply_preset(RunConfig& cfg, const std::string& name, int line) {
  if (name == "checkerboard-desk" || name == "checkerboard-full") {
    cfg.dataset.kind = DatasetKind::Checkerboard2d;
    cfg.model_kind = ModelKind::ImpFlow;
    cfg.blocks = 4;
    cfg.width = 128;
    cfg.depth = 4;
    cfg.c = 0.999;
    cfg.activation = ActivationKind::Sine;
    const bool full = name == "checkerboard-full";
    cfg.train.batch = full ? 5000 : 500;
    cfg.train.iters = full ? 50000 : 5000;
    cfg.train.lr = 1e-3;
    cfg.train.weight_decay = 1e-5;
    return;
  }
  throw ConfigError("config line " + std::to_string(line) + ": unknown preset: " + name);
}

}  // namespace detail

/// Parse the sectioned key/value text into a validated RunConfig.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  int line = 0;
  auto bad_key = [&](const std::string& key) {
    throw ConfigError("config line " + std::to_string(line) + ": unknown key [" + section + "] " + key);
  };
  while (std::getline(in, raw)) {
    ++line;
    std::string s = detail::trim(raw);
    const size_t hash = s.find('#');
    if (hash != std::string::npos) s = detail::trim(s.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw ConfigError("config line " + std::to_string(line) + ": malformed section header");
      section = s.substr(1, s.size() - 2);
      if (section != "run" && section != "model" && section != "train" && section != "solver" &&
          section != "estimator")
        throw ConfigError("config line " + std::to_string(line) + ": unknown section: " + section);
      continue;
    }
    const size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string val = detail::trim(s.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config line " + std::to_string(line) + ": key outside any section");

    if (section == "run") {
      if (key == "preset") detail::apply_preset(cfg, val, line);
      else if (key == "dataset") {
        if (val == "checkerboard2d") cfg.dataset.kind = DatasetKind::Checkerboard2d;
        else if (val == "target1d") cfg.dataset.kind = DatasetKind::Target1d;
        else if (val == "gaussian") cfg.dataset.kind = DatasetKind::Gaussian;
        else throw ConfigError("config line " + std::to_string(line) + ": unknown dataset: " + val);
      } else if (key == "dim") cfg.dataset.dim = static_cast<int>(detail::parse_int(val, line));
      else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(detail::parse_int(val, line));
      else if (key == "out") cfg.out_dir = val;
      else bad_key(key);
    } else if (section == "model") {
      if (key == "type") {
        if (val == "resflow") cfg.model_kind = ModelKind::ResFlow;
        else if (val == "impflow") cfg.model_kind = ModelKind::ImpFlow;
        else throw ConfigError("config line " + std::to_string(line) + ": unknown model type: " + val);
      } else if (key == "blocks") cfg.blocks = static_cast<int>(detail::parse_int(val, line));
      else if (key == "width") cfg.width = static_cast<int>(detail::parse_int(val, line));
      else if (key == "depth") cfg.depth = static_cast<int>(detail::parse_int(val, line));
      else if (key == "c") cfg.c = detail::parse_double(val, line);
      else if (key == "activation") {
        try {
          cfg.activation = activation_from_string(val);
        } catch (const std::invalid_argument& e) {
          throw ConfigError("config line " + std::to_string(line) + ": " + e.what());
        }
      } else bad_key(key);
    } else if (section == "train") {
      if (key == "lr") cfg.train.lr = detail::parse_double(val, line);
      else if (key == "weight_decay") cfg.train.weight_decay = detail::parse_double(val, line);
      else if (key == "batch") cfg.train.batch = static_cast<int>(detail::parse_int(val, line));
      else if (key == "iters") cfg.train.iters = static_cast<int>(detail::parse_int(val, line));
      else if (key == "eval_interval") cfg.train.eval_interval = static_cast<int>(detail::parse_int(val, line));
      else bad_key(key);
    } else if (section == "solver") {
      if (key == "eps_f") cfg.train.solver.eps_f = detail::parse_double(val, line);
      else if (key == "eps_b") cfg.train.solver.eps_b = detail::parse_double(val, line);
      else if (key == "sample_eps") cfg.train.solver.sample_eps = detail::parse_double(val, line);
      else if (key == "max_iter") cfg.train.solver.max_iter = static_cast<int>(detail::parse_int(val, line));
      else bad_key(key);
    } else {  // estimator
      if (key == "mode") {
        if (val == "exact") cfg.train.estimator.mode = LogDetMode::Exact;
        else if (val == "stochastic") cfg.train.estimator.mode = LogDetMode::Stochastic;
        else throw ConfigError("config line " + std::to_string(line) + ": unknown mode: " + val);
      } else if (key == "law") {
        if (val == "geometric") cfg.train.estimator.law = TruncationLaw::Geometric;
        else if (val == "poisson") cfg.train.estimator.law = TruncationLaw::Poisson;
        else throw ConfigError("config line " + std::to_string(line) + ": unknown law: " + val);
      } else if (key == "p") cfg.train.estimator.geometric_p = detail::parse_double(val, line);
      else if (key == "lambda") cfg.train.estimator.poisson_lambda = detail::parse_double(val, line);
      else if (key == "n_exact") cfg.train.estimator.n_exact = static_cast<int>(detail::parse_int(val, line));
      else if (key == "probes") cfg.train.estimator.probes_per_sample = static_cast<int>(detail::parse_int(val, line));
      else bad_key(key);
    }
  }
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

/// Canonical text of the fully resolved configuration (written to the
/// output directory so every run is reproducible from its artifacts).
inline std::string effective_config_string(const RunConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "[run]\n";
  out << "dataset = "
      << (cfg.dataset.kind == DatasetKind::Checkerboard2d
              ? "checkerboard2d"
              : cfg.dataset.kind == DatasetKind::Target1d ? "target1d" : "gaussian")
      << "\n";
  out << "dim = " << cfg.dataset.dim << "\n";
  out << "seed = " << cfg.seed << "\n";
  if (!cfg.out_dir.empty()) out << "out = " << cfg.out_dir << "\n";
  out << "\n[model]\n";
  out << "type = " << (cfg.model_kind == ModelKind::ImpFlow ? "impflow" : "resflow") << "\n";
  out << "blocks = " << cfg.blocks << "\nwidth = " << cfg.width << "\ndepth = " << cfg.depth
      << "\nc = " << cfg.c << "\nactivation = " << to_string(cfg.activation) << "\n";
  out << "\n[train]\n";
  out << "lr = " << cfg.train.lr << "\nweight_decay = " << cfg.train.weight_decay
      << "\nbatch = " << cfg.train.batch << "\niters = " << cfg.train.iters
      << "\neval_interval = " << cfg.train.eval_interval << "\n";
  out << "\n[solver]\n";
  out << "eps_f = " << cfg.train.solver.eps_f << "\neps_b = " << cfg.train.solver.eps_b
      << "\nsample_eps = " << cfg.train.solver.sample_eps
      << "\nmax_iter = " << cfg.train.solver.max_iter << "\n";
  out << "\n[estimator]\n";
  out << "mode = " << (cfg.train.estimator.mode == LogDetMode::Exact ? "exact" : "stochastic")
      << "\nlaw = "
      << (cfg.train.estimator.law == TruncationLaw::Geometric ? "geometric" : "poisson")
      << "\np = " << cfg.train.estimator.geometric_p
      << "\nlambda = " << cfg.train.estimator.poisson_lambda
      << "\nn_exact = " << cfg.train.estimator.n_exact
      << "\nprobes = " << cfg.train.estimator.probes_per_sample << "\n";
  return out.str();
}

}  // namespace impflow
