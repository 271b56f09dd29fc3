// impflow command-line driver.
//
// Commands:
//   train            maximum-likelihood training from a config file
//   eval             test NLL of a checkpoint on fresh dataset samples
//   sample           draw samples from a checkpoint
//   density-grid     log-density over a 2-D lattice, CSV
//   repro-1d         1-D piecewise-line experiments (--exact: closed-form block)
//   theory-check     structural claim checks, JSON reports
//   sensitivity      test-NLL stability across forward-tolerance sweep
//   estimator-audit  bias report for the stochastic log-det value/gradient
//
// Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 failed
// checks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "impflow/config.hpp"
#include "impflow/logdet.hpp"
#include "impflow/model.hpp"
#include "impflow/theory.hpp"
#include "impflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace impflow;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 1;
  std::string mode;  // "", "exact", "stochastic"
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Path to a run configuration file");
  cmd->add_option("--out", opts.out_dir, "Output directory");
  cmd->add_option("--seed", opts.seed, "Random seed")->each([&](const std::string&) {
    opts.seed_set = true;
  });
  cmd->add_option("--workers", opts.workers, "Worker count (results are identical for any value)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--mode", opts.mode, "Log-determinant mode")
      ->check(CLI::IsMember({"exact", "stochastic"}));
}

RunConfig load_config(const CommonOpts& opts, bool allow_empty) {
  std::string text;
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in) throw ConfigError("cannot open config file: " + opts.config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  } else if (!allow_empty) {
    throw ConfigError("this command requires --config");
  }
  RunConfig cfg = parse_config(text);
  if (opts.seed_set) {
    cfg.seed = opts.seed;
    cfg.train.seed = opts.seed;
  }
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (opts.mode == "exact") cfg.train.estimator.mode = LogDetMode::Exact;
  if (opts.mode == "stochastic") cfg.train.estimator.mode = LogDetMode::Stochastic;
  return cfg;
}

/// Reproducibility artifacts: resolved config, seed, build identifier.
void write_run_artifacts(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream(cfg.out_dir + "/effective_config.txt") << effective_config_string(cfg);
  std::ofstream meta(cfg.out_dir + "/run_meta.json");
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["build_id"] = IMPFLOW_BUILD_ID;
  meta << j.dump(2) << '\n';
}

int cmd_train(const CommonOpts& opts) {
  RunConfig cfg = load_config(opts, false);
  write_run_artifacts(cfg);
  RandomState rng(cfg.seed);
  FlowModel model = cfg.build_model(rng);
  TrainHistory hist = train_density(model, cfg.dataset, cfg.train, cfg.out_dir);
  hist.to_csv(cfg.out_dir + "/history.csv");
  flow_save(model, cfg.out_dir + "/model.json");
  RandomState eval_rng = rng.fork(99);
  const Mat test = sample_dataset(cfg.dataset, 2000, eval_rng);
  EstimatorConfig exact = cfg.train.estimator;
  exact.mode = LogDetMode::Exact;
  const NllStats nll = batched_nll(model, test, cfg.train.solver, exact);
  std::cout << "final test NLL: " << nll.nats << " nats (" << nll.bits << " bits), skipped batches: "
            << hist.skipped_total << "\n";
  nlohmann::json j;
  j["test_nll_nats"] = nll.nats;
  j["test_nll_bits"] = nll.bits;
  j["skipped_batches"] = hist.skipped_total;
  std::ofstream(cfg.out_dir + "/final_metrics.json") << j.dump(2) << '\n';
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, int n) {
  RunConfig cfg = load_config(opts, false);
  FlowModel model = flow_load(checkpoint);
  RandomState rng = RandomState(cfg.seed).fork(99);
  const Mat test = sample_dataset(cfg.dataset, n, rng);
  RandomState est = rng.fork(1);
  const NllStats nll = batched_nll(model, test, cfg.train.solver, cfg.train.estimator,
                                   cfg.train.estimator.mode == LogDetMode::Stochastic ? &est : nullptr);
  std::cout << "test NLL over " << n << " samples: " << nll.nats << " nats (" << nll.bits
            << " bits)\n";
  return 0;
}

int cmd_sample(const CommonOpts& opts, const std::string& checkpoint, int n) {
  RunConfig cfg = load_config(opts, true);
  FlowModel model = flow_load(checkpoint);
  RandomState rng(opts.seed_set ? opts.seed : cfg.seed);
  EstimatorConfig exact = cfg.train.estimator;
  exact.mode = LogDetMode::Exact;
  SampleBatch batch = flow_sample(model, n, cfg.train.solver, exact, rng);
  fs::create_directories(opts.out_dir);
  const std::string path = opts.out_dir + "/samples.csv";
  std::ofstream out(path);
  out.precision(12);
  for (Eigen::Index i = 0; i < batch.samples.cols(); ++i) {
    for (Eigen::Index r = 0; r < batch.samples.rows(); ++r)
      out << batch.samples(r, i) << (r + 1 < batch.samples.rows() ? ',' : '\n');
  }
  std::cout << batch.samples.cols() << " samples written to " << path << " ("
            << batch.n_failed << " failed inversions)\n";
  return 0;
}

int cmd_density_grid(const CommonOpts& opts, const std::string& checkpoint, double lo, double hi,
                     int res) {
  RunConfig cfg = load_config(opts, true);
  FlowModel model = flow_load(checkpoint);
  EstimatorConfig exact = cfg.train.estimator;
  exact.mode = LogDetMode::Exact;
  fs::create_directories(opts.out_dir);
  const std::string path = opts.out_dir + "/density_grid.csv";
  density_grid_csv(model, path, lo, hi, res, cfg.train.solver, exact);
  std::cout << "grid written to " << path << "\n";
  return 0;
}

int cmd_repro_1d(const CommonOpts& opts, bool exact, int depth) {
  fs::create_directories(opts.out_dir);
  if (exact) {
    const ImpBlock blk = construct_exact_impflow_1d();
    SolverConfig scfg;
    scfg.eps_f = 1e-10;
    EstimatorConfig ecfg;
    double max_err = 0.0;
    for (int i = 0; i < 1001; ++i) {
      const double x = -1.0 + 2.0 * i / 1000.0;
      const BlockResult r = imp_forward(blk, Vec::Constant(1, x), scfg, scfg.eps_f, ecfg);
      max_err = std::max(max_err, std::abs(r.y[0] - target_1d(x)));
    }
    std::cout << "closed-form 1-D block: max |f(x) - target(x)| = " << max_err
              << " over 1001 grid points\n";
    return max_err <= 1e-5 ? 0 : 4;
  }
  // Trained variant: depth-ell residual stack regression.
  TrainConfig tcfg;
  tcfg.batch = 256;
  tcfg.iters = 20000;
  tcfg.seed = opts.seed_set ? opts.seed : 0;
  RandomState rng(tcfg.seed);
  FlowModel model = make_resflow(1, depth, 128, 4, ActivationKind::ReLU, 0.99, rng);
  const RegressionReport rep = fit_1d_regression(model, tcfg);
  std::cout << "depth " << depth << " residual stack: mse = " << rep.mse
            << ", sup error on [0.25,0.75] = " << rep.sup_error << " (" << rep.iters_run
            << " iterations)\n";
  nlohmann::json j;
  j["depth"] = depth;
  j["mse"] = rep.mse;
  j["sup_error"] = rep.sup_error;
  j["iters"] = rep.iters_run;
  std::ofstream(opts.out_dir + "/repro_1d_depth" + std::to_string(depth) + ".json") << j.dump(2) << '\n';
  return 0;
}

int cmd_theory_check(const CommonOpts& opts) {
  fs::create_directories(opts.out_dir);
  nlohmann::json all = nlohmann::json::array();
  bool ok = true;

  {  // closed-form 1-D construction
    const ImpBlock blk = construct_exact_impflow_1d();
    SolverConfig scfg;
    scfg.eps_f = 1e-10;
    EstimatorConfig ecfg;
    double max_err = 0.0;
    for (int i = 0; i < 1001; ++i) {
      const double x = -1.0 + 2.0 * i / 1000.0;
      max_err = std::max(max_err,
                         std::abs(imp_forward(blk, Vec::Constant(1, x), scfg, scfg.eps_f, ecfg).y[0] -
                                  target_1d(x)));
    }
    BoundReport rep;
    rep.name = "exact_1d_construction";
    rep.upper = 1e-5;
    rep.measured_min = rep.measured_max = max_err;
    rep.pass = max_err <= 1e-5;
    ok = ok && rep.pass;
    all.push_back(rep.to_json());
  }
  {  // composed-Jacobian eigenvalue counterexample
    const CounterexampleReport rep = negative_eigenvalue_counterexample();
    const bool pass = rep.each_contractive && rep.eigenvalues.real() &&
                      rep.eigenvalues.l1.real() < 0 && rep.eigenvalues.l2.real() < 0;
    ok = ok && pass;
    nlohmann::json j = rep.to_json();
    j["name"] = "negative_eigenvalue_counterexample";
    j["pass"] = pass;
    all.push_back(std::move(j));
  }
  {  // bi-Lipschitz ratio intervals
    RandomState rng(opts.seed_set ? opts.seed : 0);
    SolverConfig scfg;
    FlowModel res2 = make_resflow(2, 2, 16, 2, ActivationKind::LipSwish, 0.9, rng);
    auto [rlo, rhi] = resflow_ratio_interval(0.9, 2);
    BoundReport r1 = lipschitz_ratio_check(res2, rlo, rhi, 2000, rng, scfg);
    r1.name = "ratio_res2_kappa0.9";
    ok = ok && r1.pass;
    all.push_back(r1.to_json());
    FlowModel imp1 = make_impflow(2, 1, 16, 2, ActivationKind::LipSwish, 0.9, rng);
    auto [ilo, ihi] = impflow_ratio_interval(0.9);
    BoundReport r2 = lipschitz_ratio_check(imp1, ilo, ihi, 2000, rng, scfg);
    r2.name = "ratio_imp1_kappa0.9";
    ok = ok && r2.pass;
    all.push_back(r2.to_json());
  }

  std::ofstream(opts.out_dir + "/theory_reports.json") << all.dump(2) << '\n';
  for (const auto& j : all)
    std::cout << (j.value("pass", false) ? "PASS " : "FAIL ") << j.value("name", "?") << "\n";
  return ok ? 0 : 4;
}

int cmd_sensitivity(const CommonOpts& opts, const std::string& checkpoint) {
  RunConfig cfg = load_config(opts, true);
  FlowModel model;
  DatasetSpec data;
  if (!checkpoint.empty()) {
    model = flow_load(checkpoint);
    data = cfg.dataset;
  } else {
    // Short training run on the 2-D checkerboard to get a nontrivial model.
    data.kind = DatasetKind::Checkerboard2d;
    TrainConfig tcfg;
    tcfg.batch = 200;
    tcfg.iters = 300;
    tcfg.seed = opts.seed_set ? opts.seed : 0;
    RandomState rng(tcfg.seed);
    model = make_impflow(2, 2, 32, 3, ActivationKind::Sine, 0.99, rng);
    train_density(model, data, tcfg);
  }
  RandomState rng = RandomState(opts.seed_set ? opts.seed : cfg.seed).fork(99);
  const Mat test = sample_dataset(data, 1000, rng);
  EstimatorConfig exact;
  exact.mode = LogDetMode::Exact;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  fs::create_directories(opts.out_dir);
  std::ofstream out(opts.out_dir + "/sensitivity.csv");
  out << "eps_f,nll_nats\n";
  out.precision(12);
  for (double eps : {1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3}) {
    SolverConfig scfg;
    scfg.eps_f = eps;
    const NllStats nll = batched_nll(model, test, scfg, exact);
    out << eps << ',' << nll.nats << '\n';
    lo = std::min(lo, nll.nats);
    hi = std::max(hi, nll.nats);
  }
  const double spread = hi - lo;
  std::cout << "NLL spread over eps_f sweep: " << spread << " nats\n";
  return spread <= 0.02 ? 0 : 4;
}

int cmd_estimator_audit(const CommonOpts& opts, int n_samples) {
  RandomState rng(opts.seed_set ? opts.seed : 0);
  EstimatorConfig cfg;
  cfg.mode = LogDetMode::Stochastic;
  nlohmann::json all = nlohmann::json::array();
  bool ok = true;
  for (int trial = 0; trial < 3; ++trial) {
    LipschitzMlp net = make_mlp(2, 16, 3, ActivationKind::LipSwish, 0.9, rng);
    const Vec x = rng.normal_vec(2);
    const double exact = exact_logdet(net.jacobian(x), false);
    const MlpTrace tr = net.forward_trace(Mat(x));
    auto vjp = [&](const Vec& u) -> Vec { return Mat(net.vjp(tr, Mat(u))).col(0); };
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      const double e = series_logdet_estimate(vjp, 2, cfg, rng);
      sum += e;
      sumsq += e * e;
    }
    const double mean = sum / n_samples;
    const double var = std::max(0.0, sumsq / n_samples - mean * mean);
    const double se = std::sqrt(var / n_samples);
    const bool pass = std::abs(mean - exact) <= 5.0 * std::max(se, 1e-12);
    ok = ok && pass;
    all.push_back({{"trial", trial},
                   {"exact", exact},
                   {"mean", mean},
                   {"std_error", se},
                   {"pass", pass}});
    std::cout << (pass ? "PASS" : "FAIL") << " value estimator trial " << trial << ": exact "
              << exact << ", mean " << mean << " +- " << se << "\n";
  }
  fs::create_directories(opts.out_dir);
  std::ofstream(opts.out_dir + "/estimator_audit.json") << all.dump(2) << '\n';
  return ok ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invertible-flow density estimation: implicit and residual blocks"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string checkpoint;
  int n = 2000;
  bool exact_1d = false;
  int depth = 1;
  double grid_lo = -4.0, grid_hi = 4.0;
  int grid_res = 100;
  int audit_samples = 100000;

  auto* train = app.add_subcommand("train", "Train a model by maximum likelihood");
  add_common(train, opts);
  auto* eval = app.add_subcommand("eval", "Test NLL of a checkpoint");
  add_common(eval, opts);
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--n", n, "Test sample count");
  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  add_common(sample, opts);
  sample->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  sample->add_option("--n", n, "Sample count");
  auto* grid = app.add_subcommand("density-grid", "Log-density lattice CSV");
  add_common(grid, opts);
  grid->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  grid->add_option("--lo", grid_lo, "Lower grid bound");
  grid->add_option("--hi", grid_hi, "Upper grid bound");
  grid->add_option("--res", grid_res, "Points per axis");
  auto* repro = app.add_subcommand("repro-1d", "1-D piecewise-line experiments");
  add_common(repro, opts);
  repro->add_flag("--exact", exact_1d, "Check the closed-form block instead of training");
  repro->add_option("--depth", depth, "Residual stack depth for the trained variant");
  auto* theory = app.add_subcommand("theory-check", "Structural claim checks");
  add_common(theory, opts);
  auto* sens = app.add_subcommand("sensitivity", "Forward-tolerance NLL sweep");
  add_common(sens, opts);
  sens->add_option("--checkpoint", checkpoint, "Optional model checkpoint");
  auto* audit = app.add_subcommand("estimator-audit", "Stochastic log-det bias report");
  add_common(audit, opts);
  audit->add_option("--n", audit_samples, "Estimator draws per trial");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(opts);
    if (eval->parsed()) return cmd_eval(opts, checkpoint, n);
    if (sample->parsed()) return cmd_sample(opts, checkpoint, n);
    if (grid->parsed()) return cmd_density_grid(opts, checkpoint, grid_lo, grid_hi, grid_res);
    if (repro->parsed()) return cmd_repro_1d(opts, exact_1d, depth);
    if (theory->parsed()) return cmd_theory_check(opts);
    if (sens->parsed()) return cmd_sensitivity(opts, checkpoint);
    if (audit->parsed()) return cmd_estimator_audit(opts, audit_samples);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const SolverFailure& e) {
    std::cerr << "solver failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
