#pragma once
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridflow/trainer.hpp"

namespace gridflow {

// Decoded converter angles more than this far below their floor mark a
// mode as infeasible for the scenario.
// A decoded state counts as control-feasible when its angle-floor and
// tap-bound overshoot is zero up to this slack (radians + tap units).
inline constexpr double kModeFeasTol = 1e-3;

// ---------------------------------------------------------------------------
// Scenario sampling
// ---------------------------------------------------------------------------

struct ScenarioOptions {
  int count = 2000;
  uint64_t seed = 42;
  double load_lo = 0.8, load_hi = 1.2;
  double jitter_lo = 0.95, jitter_hi = 1.05;
  int max_attempts_per_scenario = 50;  // oracle-infeasible draws are resampled
};

struct ScenarioSet {
  std::vector<NetworkCase> cases;
  std::vector<AcdcSolution> oracle;
  std::vector<ControlMode> oracle_mode;  // final mode of the first dc link
  int rejected = 0;
};

/// One stochastic operating condition: renewable outputs follow Beta(2,2)
/// scaled by rating, loads get a global factor plus per-bus jitter, and the
/// dispatchable hydro unit covers the remaining balance up to its rating.
inline NetworkCase sample_scenario(const NetworkCase& base, uint64_t seed,
                                   const ScenarioOptions& opt = {}) {
  NetworkCase sc = base;
  Rng rng(seed);

  double renew_total = 0;
  for (const auto& site : base.renewables) {
    double p = rng.beta22() * site.rated;
    sc.buses[size_t(sc.bus_index(site.bus))].p_gen = p;
    renew_total += p;
  }

  double lf = rng.uniform(opt.load_lo, opt.load_hi);
  double load_total = 0;
  for (auto& b : sc.buses) {
    double u = rng.uniform(opt.jitter_lo, opt.jitter_hi);
    b.p_load = b.p_load * lf * u;
    b.q_load = b.q_load * lf * u;
    load_total += b.p_load;
  }

  if (base.hydro) {
    double other_gen = 0;
    for (const auto& b : base.buses) {
      if (b.id == base.hydro->bus) continue;
      bool is_renewable = false;
      for (const auto& site : base.renewables)
        if (site.bus == b.id) is_renewable = true;
      if (!is_renewable && b.kind != BusKind::Slack) other_gen += b.p_gen;
    }
    double want = load_total - renew_total - other_gen;
    sc.buses[size_t(sc.bus_index(base.hydro->bus))].p_gen =
        std::clamp(want, 0.0, base.hydro->rated);
  }
  return sc;
}

inline ScenarioSet generate_scenarios(const NetworkCase& base,
                                      const ScenarioOptions& opt,
                                      const SolverOptions& solver_opt = {}) {
  ScenarioSet set;
  uint64_t draw = 0;
  for (int i = 0; i < opt.count; ++i) {
    bool accepted = false;
    for (int attempt = 0; attempt < opt.max_attempts_per_scenario; ++attempt) {
      NetworkCase sc = sample_scenario(base, mix_seed(opt.seed, draw++), opt);
      try {
        AcdcSolution sol = solve_acdc_sequential(sc, solver_opt);
        set.cases.push_back(std::move(sc));
        set.oracle_mode.push_back(sol.links.empty() ? ControlMode::Mode1
                                                    : sol.links[0].mode);
        set.oracle.push_back(std::move(sol));
        accepted = true;
        break;
      } catch (const Error&) {
        ++set.rejected;
      }
    }
    if (!accepted)
      throw NoConvergenceError("scenario sampling kept hitting oracle-infeasible "
                               "draws",
                               opt.max_attempts_per_scenario, 0.0);
  }
  return set;
}

inline nlohmann::json scenario_set_to_json(const NetworkCase& base,
                                           const ScenarioSet& set) {
  nlohmann::json out;
  out["rejected"] = set.rejected;
  auto& arr = out["scenarios"] = nlohmann::json::array();
  for (size_t i = 0; i < set.cases.size(); ++i) {
    nlohmann::json s;
    s["index"] = i;
    s["oracle_mode"] = set.oracle_mode[i] == ControlMode::Mode1 ? 1 : 2;
    auto& buses = s["buses"] = nlohmann::json::array();
    for (size_t b = 0; b < base.n_buses(); ++b) {
      const Bus& sb = set.cases[i].buses[b];
      buses.push_back({{"id", sb.id},
                       {"p_gen", sb.p_gen},
                       {"q_gen", sb.q_gen},
                       {"p_load", sb.p_load},
                       {"q_load", sb.q_load}});
    }
    s["oracle"] = solution_to_json(set.cases[i], set.oracle[i]);
    arr.push_back(std::move(s));
  }
  return out;
}

inline ScenarioSet scenario_set_from_json(const NetworkCase& base,
                                          const nlohmann::json& j,
                                          const SolverOptions& solver_opt = {}) {
  ScenarioSet set;
  set.rejected = j.value("rejected", 0);
  for (const auto& s : j.at("scenarios")) {
    NetworkCase sc = base;
    for (const auto& bj : s.at("buses")) {
      Bus& b = sc.buses[size_t(sc.bus_index(bj.at("id").get<int>()))];
      b.p_gen = bj.at("p_gen").get<double>();
      b.q_gen = bj.at("q_gen").get<double>();
      b.p_load = bj.at("p_load").get<double>();
      b.q_load = bj.at("q_load").get<double>();
    }
    // oracle states are re-derived rather than trusted from the file
    AcdcSolution sol = solve_acdc_sequential(sc, solver_opt);
    set.oracle_mode.push_back(sol.links.empty() ? ControlMode::Mode1
                                                : sol.links[0].mode);
    set.oracle.push_back(std::move(sol));
    set.cases.push_back(std::move(sc));
  }
  return set;
}

struct SplitIndices {
  std::vector<size_t> train, test;
};

inline SplitIndices split_indices(size_t n, double train_fraction, uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1))
    throw DomainError("train_fraction must lie in (0, 1)");
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, 0x5eed5));
  rng.shuffle(idx);
  SplitIndices s;
  size_t n_train = size_t(train_fraction * double(n));
  s.train.assign(idx.begin(), idx.begin() + long(n_train));
  s.test.assign(idx.begin() + long(n_train), idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// Deployment inference: run per-mode networks, pick by feasibility
// ---------------------------------------------------------------------------

/// Preassembled per-mode forward pass over a fixed topology. The Chebyshev
/// stack and layer weights are packed once so a per-scenario call is a short
/// chain of dense products into preallocated buffers.
class InferenceEngine {
 public:
  InferenceEngine(const NetworkCase& base, const GraphTopology& topo,
                  const std::vector<Eigen::MatrixXd>& basis, const ModelBank& bank)
      : base_(&base), topo_(topo), bank_(&bank), rctx_(make_residual_context(base)) {
    const int n = topo_.n_nodes;
    const int f1 = int(basis.size());
    t_cat_.resize(n, f1 * n);
    for (int j = 0; j < f1; ++j) t_cat_.middleCols(j * n, n) = basis[size_t(j)];
    for (ControlMode m : {ControlMode::Mode1, ControlMode::Mode2}) {
      PerMode& pm = per_mode(m);
      const ChebNetParams& p = bank.params(m);
      if (int(basis.size()) != p.cfg.order + 1)
        throw ShapeMismatchError("basis order does not match bank config");
      pm.theta_wide.clear();
      for (const auto& layer : p.theta) {
        Eigen::MatrixXd tw(layer[0].rows(), long(layer.size()) * layer[0].cols());
        for (size_t j = 0; j < layer.size(); ++j)
          tw.middleCols(long(j) * layer[0].cols(), layer[0].cols()) = layer[j];
        pm.theta_wide.push_back(std::move(tw));
      }
      GraphFeatures f = build_features(base, topo_, m);
      pm.edge_embed = select_z_columns(p.z, topo_) *
                      bank.standardizer(m).apply_edge(f.x_edge);
      pm.x_node_template = f.x_node;
    }
  }

  /// Raw n x 2 output of one mode's network for a scenario.
  Eigen::MatrixXd forward(const NetworkCase& scenario, ControlMode m) {
    PerMode& pm = per_mode(m);
    const ChebNetParams& p = bank_->params(m);
    const Standardizer& st = bank_->standardizer(m);
    const int n = topo_.n_nodes;

    fill_node_features(scenario, m, pm.x_node_template);
    h_.resize(n, 4);
    h_.leftCols(2) = st.apply_node(pm.x_node_template);
    h_.rightCols(2) = pm.edge_embed;

    const int f1 = int(t_cat_.cols()) / n;
    const int n_layers = int(pm.theta_wide.size());
    for (int l = 0; l < n_layers; ++l) {
      const long w_in = p.theta[size_t(l)][0].rows();
      const long w_out = p.theta[size_t(l)][0].cols();
      w_.resize(n, f1 * w_out);
      w_.noalias() = h_ * pm.theta_wide[size_t(l)];
      wstack_.resize(long(f1) * n, w_out);
      for (int j = 0; j < f1; ++j)
        wstack_.middleRows(long(j) * n, n) = w_.middleCols(long(j) * w_out, w_out);
      (void)w_in;
      h_next_.resize(n, w_out);
      h_next_.noalias() = t_cat_ * wstack_;
      if (l + 1 < n_layers)
        h_ = h_next_.array().tanh();
      else
        h_ = h_next_;
    }
    return h_;
  }

  AcdcSolution decode(const NetworkCase& scenario, ControlMode m,
                      const Eigen::MatrixXd& raw) const {
    return decode_state(scenario, topo_, m, raw, bank_->angle_decode);
  }

  double residual_l1(const NetworkCase& scenario, const AcdcSolution& s) const {
    return eval_residuals(rctx_, scenario, s).total_l1();
  }

  const GraphTopology& topology() const { return topo_; }

 private:
  struct PerMode {
    std::vector<Eigen::MatrixXd> theta_wide;
    Eigen::MatrixXd edge_embed;      // scenario-independent H0 right block
    Eigen::MatrixXd x_node_template;  // reused buffer, scenario channels rewritten
  };

  PerMode& per_mode(ControlMode m) { return m == ControlMode::Mode1 ? m1_ : m2_; }

  /// Overwrites only the scenario-dependent node feature entries.
  void fill_node_features(const NetworkCase& sc, ControlMode, Eigen::MatrixXd& x) const {
    for (int i = 0; i < topo_.n_nodes; ++i) {
      const auto& nd = topo_.nodes[size_t(i)];
      if (nd.bus_index < 0) continue;  // converter terminal features are static
      const auto& b = sc.buses[size_t(nd.bus_index)];
      x(i, 0) = b.p_inj();
      if (b.kind == BusKind::PQ || b.kind == BusKind::PCC) x(i, 1) = b.q_inj();
    }
  }

  const NetworkCase* base_;
  GraphTopology topo_;
  const ModelBank* bank_;
  ResidualContext rctx_;
  Eigen::MatrixXd t_cat_;
  PerMode m1_, m2_;
  Eigen::MatrixXd h_, w_, wstack_, h_next_;
};

/// Floor violation of the decoded converter angles plus tap-bound overshoot.
inline double control_violation(const NetworkCase& c, const AcdcSolution& s) {
  double v = 0;
  for (size_t l = 0; l < c.dc_links.size(); ++l) {
    const auto& link = c.dc_links[l];
    const auto& st = s.links[l];
    v += std::max(link.alpha_min - st.alpha, 0.0) +
         std::max(link.gamma_min - st.gamma, 0.0);
    v += std::max(st.k_re - link.k_max, 0.0) + std::max(link.k_min - st.k_re, 0.0) +
         std::max(st.k_iv - link.k_max, 0.0) + std::max(link.k_min - st.k_iv, 0.0);
  }
  return v;
}

struct InferenceOutcome {
  AcdcSolution solution;
  ControlMode mode = ControlMode::Mode1;
  bool infeasible_all = false;
  double violation_mode1 = 0, violation_mode2 = 0;
  double residual_mode1 = -1, residual_mode2 = -1;  // -1: tie-break not needed
};

/// Runs every mode's network once and keeps the decoded states whose control
/// floors hold; among several feasible candidates the smallest total physics
/// residual wins. With none feasible the lesser violator is returned flagged.
inline InferenceOutcome infer_multi(InferenceEngine& eng, const NetworkCase& scenario) {
  InferenceOutcome out;
  AcdcSolution s1 = eng.decode(scenario, ControlMode::Mode1,
                               eng.forward(scenario, ControlMode::Mode1));
  AcdcSolution s2 = eng.decode(scenario, ControlMode::Mode2,
                               eng.forward(scenario, ControlMode::Mode2));
  out.violation_mode1 = control_violation(scenario, s1);
  out.violation_mode2 = control_violation(scenario, s2);
  const bool ok1 = out.violation_mode1 <= kModeFeasTol;
  const bool ok2 = out.violation_mode2 <= kModeFeasTol;

  bool pick1;
  if (ok1 != ok2) {
    pick1 = ok1;
  } else if (ok1) {
    out.residual_mode1 = eng.residual_l1(scenario, s1);
    out.residual_mode2 = eng.residual_l1(scenario, s2);
    pick1 = out.residual_mode1 <= out.residual_mode2;
  } else {
    out.infeasible_all = true;
    pick1 = out.violation_mode1 <= out.violation_mode2;
  }
  out.mode = pick1 ? ControlMode::Mode1 : ControlMode::Mode2;
  out.solution = pick1 ? std::move(s1) : std::move(s2);
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy evaluation against the oracle
// ---------------------------------------------------------------------------

inline constexpr double kAngleDenomFloor = 0.01;  // rad, for relative angle error

struct ScenarioMetrics {
  size_t index = 0;
  ControlMode oracle_mode = ControlMode::Mode1, gnn_mode = ControlMode::Mode1;
  bool mode_correct = false, infeasible_all = false;
  double mre_v = 0, mre_delta = 0;
  double violation_l1 = 0;  // full residual L1 of the network solution
  double violation_pqv = 0;
  double penalty_angle = 0, penalty_tap = 0;
};

struct EvalReport {
  std::vector<ScenarioMetrics> rows;
  Eigen::VectorXd per_bus_mre_v, per_bus_mre_delta;
  double mre_v_mean = 0, mre_delta_mean = 0;
  double violation_mean = 0, violation_variance = 0, violation_std = 0;
  double mode_accuracy = 0;
  int n_mode1 = 0, n_mode2 = 0, n_correct = 0;
};

inline EvalReport evaluate(InferenceEngine& eng, const NetworkCase& base,
                           const std::vector<NetworkCase>& cases,
                           const std::vector<AcdcSolution>& oracle,
                           const std::vector<ControlMode>& oracle_mode) {
  if (cases.size() != oracle.size() || cases.size() != oracle_mode.size())
    throw ShapeMismatchError("evaluate: misaligned scenario arrays");
  EvalReport rep;
  const int n_bus = int(base.n_buses());
  rep.per_bus_mre_v.setZero(n_bus);
  rep.per_bus_mre_delta.setZero(n_bus);

  ResidualContext ctx = make_residual_context(base);
  double viol_sum = 0, viol_sq_sum = 0;
  for (size_t i = 0; i < cases.size(); ++i) {
    InferenceOutcome out = infer_multi(eng, cases[i]);
    ResidualSet rs = eval_residuals(ctx, cases[i], out.solution);

    ScenarioMetrics m;
    m.index = i;
    m.oracle_mode = oracle_mode[i];
    m.gnn_mode = out.mode;
    m.mode_correct = out.mode == oracle_mode[i];
    m.infeasible_all = out.infeasible_all;

    double sv = 0, sd = 0;
    for (int bu = 0; bu < n_bus; ++bu) {
      double ev = std::abs(out.solution.v(bu) - oracle[i].v(bu)) / oracle[i].v(bu);
      double denom = std::max(std::abs(oracle[i].delta(bu)), kAngleDenomFloor);
      double ed = std::abs(out.solution.delta(bu) - oracle[i].delta(bu)) / denom;
      rep.per_bus_mre_v(bu) += ev;
      rep.per_bus_mre_delta(bu) += ed;
      sv += ev;
      sd += ed;
    }
    m.mre_v = sv / n_bus;
    m.mre_delta = sd / n_bus;
    m.violation_l1 = rs.total_l1();
    m.violation_pqv = rs.f_pqv.lpNorm<1>();
    m.penalty_angle = rs.penalty_angle;
    m.penalty_tap = rs.penalty_tap;

    viol_sum += m.violation_l1;
    viol_sq_sum += m.violation_l1 * m.violation_l1;
    rep.mre_v_mean += m.mre_v;
    rep.mre_delta_mean += m.mre_delta;
    if (oracle_mode[i] == ControlMode::Mode1) ++rep.n_mode1;
    else ++rep.n_mode2;
    if (m.mode_correct) ++rep.n_correct;
    rep.rows.push_back(m);
  }
  const double n = double(cases.size());
  rep.per_bus_mre_v /= n;
  rep.per_bus_mre_delta /= n;
  rep.mre_v_mean /= n;
  rep.mre_delta_mean /= n;
  rep.violation_mean = viol_sum / n;
  rep.violation_variance = std::max(viol_sq_sum / n - rep.violation_mean * rep.violation_mean, 0.0);
  rep.violation_std = std::sqrt(rep.violation_variance);
  rep.mode_accuracy = double(rep.n_correct) / n;
  return rep;
}

// ---------------------------------------------------------------------------
// Timing comparison
// ---------------------------------------------------------------------------

struct BenchReport {
  double oracle_mean_us = 0, oracle_std_us = 0;
  double infer_mean_us = 0, infer_std_us = 0;
  double speedup = 0;
  int scenarios = 0;
};

inline BenchReport bench_time(InferenceEngine& eng,
                              const std::vector<NetworkCase>& cases,
                              const SolverOptions& solver_opt = {}) {
  if (cases.empty()) throw DomainError("bench_time: no scenarios");
  BenchReport rep;
  rep.scenarios = int(cases.size());
  using sclock = std::chrono::steady_clock;

  double sum = 0, sq = 0;
  for (const auto& sc : cases) {
    auto t0 = sclock::now();
    AcdcSolution sol = solve_acdc_sequential(sc, solver_opt);
    auto t1 = sclock::now();
    double us = std::chrono::duration<double, std::micro>(t1 - t0).count();
    sum += us;
    sq += us * us;
    (void)sol;
  }
  rep.oracle_mean_us = sum / rep.scenarios;
  rep.oracle_std_us =
      std::sqrt(std::max(sq / rep.scenarios - rep.oracle_mean_us * rep.oracle_mean_us, 0.0));

  sum = 0, sq = 0;
  for (const auto& sc : cases) {
    auto t0 = sclock::now();
    InferenceOutcome out = infer_multi(eng, sc);
    auto t1 = sclock::now();
    double us = std::chrono::duration<double, std::micro>(t1 - t0).count();
    sum += us;
    sq += us * us;
    (void)out;
  }
  rep.infer_mean_us = sum / rep.scenarios;
  rep.infer_std_us =
      std::sqrt(std::max(sq / rep.scenarios - rep.infer_mean_us * rep.infer_mean_us, 0.0));
  rep.speedup = rep.oracle_mean_us / rep.infer_mean_us;
  return rep;
}

// ---------------------------------------------------------------------------
// Topology change study
// ---------------------------------------------------------------------------

struct TripStudy {
  EvalReport intact, tripped;
  double mre_v_ratio = 0, mre_delta_ratio = 0;
};

/// Re-runs the evaluation after removing one AC branch, reusing the trained
/// bank on the changed graph (the spectral stack is rebuilt, parameters are
/// not). Scenario conditions are resampled identically on both topologies.
inline TripStudy topology_study(const NetworkCase& base, const ModelBank& bank,
                                int from, int to, const ScenarioOptions& sc_opt) {
  NetworkCase tripped = apply_topology_change(base, from, to);

  TripStudy study;
  {
    GraphTopology topo = build_graph(base);
    auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)),
                                 bank.mode1.cfg.order);
    InferenceEngine eng(base, topo, basis, bank);
    ScenarioSet set = generate_scenarios(base, sc_opt);
    study.intact = evaluate(eng, base, set.cases, set.oracle, set.oracle_mode);
  }
  {
    GraphTopology topo = build_graph(tripped);
    auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)),
                                 bank.mode1.cfg.order);
    InferenceEngine eng(tripped, topo, basis, bank);
    ScenarioSet set = generate_scenarios(tripped, sc_opt);
    study.tripped = evaluate(eng, tripped, set.cases, set.oracle, set.oracle_mode);
  }
  study.mre_v_ratio = study.tripped.mre_v_mean / std::max(study.intact.mre_v_mean, 1e-15);
  study.mre_delta_ratio =
      study.tripped.mre_delta_mean / std::max(study.intact.mre_delta_mean, 1e-15);
  return study;
}

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

inline std::string metrics_csv(const EvalReport& rep) {
  std::ostringstream out;
  out << "index,oracle_mode,gnn_mode,mode_correct,infeasible_all,mre_v,mre_delta,"
         "violation_l1,violation_pqv,penalty_angle,penalty_tap\n";
  out << std::setprecision(17);
  for (const auto& m : rep.rows)
    out << m.index << ',' << (m.oracle_mode == ControlMode::Mode1 ? 1 : 2) << ','
        << (m.gnn_mode == ControlMode::Mode1 ? 1 : 2) << ',' << (m.mode_correct ? 1 : 0)
        << ',' << (m.infeasible_all ? 1 : 0) << ',' << m.mre_v << ',' << m.mre_delta
        << ',' << m.violation_l1 << ',' << m.violation_pqv << ',' << m.penalty_angle
        << ',' << m.penalty_tap << '\n';
  return out.str();
}

inline std::string per_bus_csv(const NetworkCase& c, const EvalReport& rep) {
  std::ostringstream out;
  out << "bus_id,mre_v,mre_delta\n";
  out << std::setprecision(17);
  for (int i = 0; i < int(c.n_buses()); ++i)
    out << c.buses[size_t(i)].id << ',' << rep.per_bus_mre_v(i) << ','
        << rep.per_bus_mre_delta(i) << '\n';
  return out.str();
}

inline std::string trip_csv(const NetworkCase& c, const TripStudy& study) {
  std::ostringstream out;
  out << "bus_id,mre_v_intact,mre_v_tripped,mre_delta_intact,mre_delta_tripped\n";
  out << std::setprecision(17);
  for (int i = 0; i < int(c.n_buses()); ++i)
    out << c.buses[size_t(i)].id << ',' << study.intact.per_bus_mre_v(i) << ','
        << study.tripped.per_bus_mre_v(i) << ',' << study.intact.per_bus_mre_delta(i)
        << ',' << study.tripped.per_bus_mre_delta(i) << '\n';
  return out.str();
}

/// Violations are reported in units of 1e-5 pu, matching the convention used
/// for the headline comparison table; raw values live in metrics.csv.
inline nlohmann::json summary_json(const EvalReport& rep, const BenchReport* bench) {
  nlohmann::json j;
  j["scenarios"] = rep.rows.size();
  j["mre_v_mean"] = rep.mre_v_mean;
  j["mre_delta_mean"] = rep.mre_delta_mean;
  j["violation_mean_1e5pu"] = rep.violation_mean / 1e-5;
  j["violation_std_1e5pu"] = rep.violation_std / 1e-5;
  j["violation_variance_1e5pu_sq"] = rep.violation_variance / 1e-10;
  j["mode_accuracy"] = rep.mode_accuracy;
  j["n_mode1"] = rep.n_mode1;
  j["n_mode2"] = rep.n_mode2;
  j["n_correct"] = rep.n_correct;
  if (bench) {
    j["oracle_mean_us"] = bench->oracle_mean_us;
    j["oracle_std_us"] = bench->oracle_std_us;
    j["infer_mean_us"] = bench->infer_mean_us;
    j["infer_std_us"] = bench->infer_std_us;
    j["speedup"] = bench->speedup;
  }
  return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  out << content;
}

}  // namespace gridflow
