#pragma once

// A normalizing flow as a sequence of invertible blocks mapping data x to a
// standard-normal latent z. Log-density accumulates the per-block
// change-of-variables terms; sampling runs the chain in reverse.

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "impflow/blocks.hpp"

#include <json.hpp>

namespace impflow {

using FlowBlock = std::variant<ResBlock, ImpBlock>;

struct FlowModel {
  std::vector<FlowBlock> blocks;
  int dim = 0;
};

/// ln N(z; 0, I).
inline double std_normal_logpdf(const Vec& z) {
  const double d = static_cast<double>(z.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * z.squaredNorm();
}

struct FlowForward {
  Vec z;                 // latent image of x
  double logdet = 0.0;   // sum of block change-of-variables terms
  double logprob = 0.0;  // ln p(x)
  int solver_evals = 0;
};

/// Push x through every block, accumulating the log-det terms and solver
/// work. In stochastic mode a fresh (truncation, probe) pair is drawn per
/// block and shared between that block's log-det terms.
inline FlowForward flow_logprob(const FlowModel& model, const Vec& x, const SolverConfig& scfg,
                                const EstimatorConfig& cfg, RandomState* rng = nullptr) {
  if (x.size() != model.dim) throw std::invalid_argument("flow_logprob: dimension mismatch");
  if (cfg.mode == LogDetMode::Stochastic && !rng)
    throw std::invalid_argument("flow_logprob: stochastic mode needs an rng");
  FlowForward out;
  Vec cur = x;
  for (size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const FlowBlock& blk = model.blocks[bi];
    SeriesDraw draw;
    const SeriesDraw* dp = nullptr;
    if (cfg.mode == LogDetMode::Stochastic) {
      draw = SeriesDraw::sample(x.size(), cfg, *rng);
      dp = &draw;
    }
    try {
      BlockResult r = std::holds_alternative<ResBlock>(blk)
                          ? res_forward(std::get<ResBlock>(blk), cur, cfg, dp)
                          : imp_forward(std::get<ImpBlock>(blk), cur, scfg, scfg.eps_f, cfg, dp);
      out.logdet += r.logdet;
      out.solver_evals += r.report.n_evals;
      cur = std::move(r.y);
    } catch (const SolverFailure& e) {
      throw SolverFailure("block " + std::to_string(bi) + ": " + e.what());
    }
  }
  out.z = std::move(cur);
  out.logprob = std_normal_logpdf(out.z) + out.logdet;
  return out;
}

/// Forward map only (no change-of-variables accounting).
inline Vec flow_map(const FlowModel& model, const Vec& x, const SolverConfig& scfg) {
  Vec cur = x;
  for (const FlowBlock& blk : model.blocks) {
    if (const auto* rb = std::get_if<ResBlock>(&blk)) {
      cur = cur + rb->g.forward(cur);
    } else {
      const auto& ib = std::get<ImpBlock>(blk);
      const Vec rhs = ib.gx.forward(cur) + cur;
      auto h = [&](const Vec& z) -> Vec { return rhs - ib.gz.forward(z) - z; };
      SolveReport rep = broyden_solve(h, cur, scfg, scfg.eps_f, -1.0);
      if (!rep.converged) throw SolverFailure("flow_map: root solve did not converge");
      cur = rep.root;
    }
  }
  return cur;
}

/// Map a latent z back to data space (blocks in reverse, inverse maps, the
/// sampling tolerance). Throws SolverFailure when any inverse stalls.
inline Vec flow_invert(const FlowModel& model, const Vec& z, const SolverConfig& scfg,
                       const EstimatorConfig& cfg) {
  Vec cur = z;
  for (auto it = model.blocks.rbegin(); it != model.blocks.rend(); ++it) {
    cur = std::holds_alternative<ResBlock>(*it)
              ? res_inverse(std::get<ResBlock>(*it), cur, scfg, scfg.sample_eps, cfg).y
              : imp_inverse(std::get<ImpBlock>(*it), cur, scfg, scfg.sample_eps, cfg).y;
  }
  return cur;
}

struct SampleBatch {
  Mat samples;        // dim x n_ok
  int n_failed = 0;   // draws whose inverse solve did not converge
};

/// Draw n latents and invert; failed inversions are dropped and counted.
inline SampleBatch flow_sample(const FlowModel& model, int n, const SolverConfig& scfg,
                               const EstimatorConfig& cfg, RandomState& rng) {
  if (n < 1) throw std::invalid_argument("flow_sample: n >= 1");
  SampleBatch out;
  std::vector<Vec> ok;
  ok.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Vec z = rng.normal_vec(model.dim);
    try {
      ok.push_back(flow_invert(model, z, scfg, cfg));
    } catch (const SolverFailure&) {
      ++out.n_failed;
    }
  }
  out.samples.resize(model.dim, static_cast<Eigen::Index>(ok.size()));
  for (size_t i = 0; i < ok.size(); ++i) out.samples.col(static_cast<Eigen::Index>(i)) = ok[i];
  return out;
}

struct NllStats {
  double nats = 0.0;   // mean negative log-likelihood per sample, nats
  double bits = 0.0;   // same in bits (nats / ln 2)
  int solver_evals = 0;
};

/// Mean NLL over the columns of X (exact or stochastic log-det per cfg).
inline NllStats flow_nll(const FlowModel& model, const Mat& X, const SolverConfig& scfg,
                         const EstimatorConfig& cfg, RandomState* rng = nullptr) {
  if (X.cols() < 1) throw std::invalid_argument("flow_nll: empty batch");
  NllStats out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    FlowForward f = flow_logprob(model, X.col(i), scfg, cfg, rng);
    total -= f.logprob;
    out.solver_evals += f.solver_evals;
  }
  out.nats = total / static_cast<double>(X.cols());
  out.bits = out.nats / std::numbers::ln2;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json flow_to_json(const FlowModel& model) {
  nlohmann::json j;
  j["format"] = "impflow-checkpoint-v1";
  j["dim"] = model.dim;
  j["blocks"] = nlohmann::json::array();
  for (const FlowBlock& blk : model.blocks) {
    nlohmann::json jb;
    if (const auto* rb = std::get_if<ResBlock>(&blk)) {
      jb["type"] = "residual";
      jb["g"] = rb->g.to_json();
    } else {
      const auto& ib = std::get<ImpBlock>(blk);
      jb["type"] = "implicit";
      jb["gx"] = ib.gx.to_json();
      jb["gz"] = ib.gz.to_json();
    }
    j["blocks"].push_back(std::move(jb));
  }
  return j;
}

inline FlowModel flow_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "impflow-checkpoint-v1")
    throw std::invalid_argument("checkpoint: unknown format tag");
  FlowModel model;
  model.dim = j.at("dim").get<int>();
  for (const auto& jb : j.at("blocks")) {
    const std::string type = jb.at("type").get<std::string>();
    if (type == "residual") {
      model.blocks.push_back(ResBlock{LipschitzMlp::from_json(jb.at("g"))});
    } else if (type == "implicit") {
      model.blocks.push_back(
          ImpBlock{LipschitzMlp::from_json(jb.at("gx")), LipschitzMlp::from_json(jb.at("gz"))});
    } else {
      throw std::invalid_argument("checkpoint: unknown block type " + type);
    }
  }
  return model;
}

inline void flow_save(const FlowModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << flow_to_json(model).dump(2) << '\n';
}

inline FlowModel flow_load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  return flow_from_json(j);
}

/// Evaluate ln p on a regular 2-D grid and write "x1,x2,logp" CSV rows.
inline void density_grid_csv(const FlowModel& model, const std::string& path, double lo, double hi,
                             int n_per_axis, const SolverConfig& scfg, const EstimatorConfig& cfg) {
  if (model.dim != 2) throw std::invalid_argument("density_grid_csv: 2-D models only");
  if (n_per_axis < 2) throw std::invalid_argument("density_grid_csv: grid size >= 2");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open grid output: " + path);
  out << "x1,x2,logp\n";
  out.precision(12);
  const double step = (hi - lo) / (n_per_axis - 1);
  for (int i = 0; i < n_per_axis; ++i)
    for (int j = 0; j < n_per_axis; ++j) {
      Vec x(2);
      x << lo + i * step, lo + j * step;
      out << x[0] << ',' << x[1] << ',' << flow_logprob(model, x, scfg, cfg).logprob << '\n';
    }
}

}  // namespace impflow
