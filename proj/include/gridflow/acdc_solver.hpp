#pragma once
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridflow/grid_model.hpp"

namespace gridflow {

// 6-pulse bridge constants
inline constexpr double kBridgeGain = 1.3504744742356707;  // 3*sqrt(2)/pi
inline constexpr double kCommDropFactor = 0.9549296585513720;  // 3/pi

/// Active/reactive flow leaving bus i into branch (i,j), receiving-end
/// quantities obtained by swapping arguments and negating delta_ij.
inline std::pair<double, double> branch_flow(double v_i, double v_j, double delta_ij,
                                             double g, double b) {
  double c = std::cos(delta_ij), s = std::sin(delta_ij);
  double p = v_i * v_i * g - v_i * v_j * (g * c + b * s);
  double q = -v_i * v_i * b - v_i * v_j * (g * s - b * c);
  return {p, q};
}

/// Terminal DC voltage of a bridge at firing/extinction angle `angle`.
inline double converter_voltage(double k_tap, double v_c, double angle, double x_c,
                                double i_d) {
  return kBridgeGain * k_tap * v_c * std::cos(angle) - kCommDropFactor * x_c * i_d;
}

inline double dc_line_current(double v_d_re, double v_d_iv, double r_dc) {
  if (r_dc <= 0) throw DomainError("dc_line_current: r_dc must be positive");
  return (v_d_re - v_d_iv) / r_dc;
}

/// Displacement angle of the converter's AC-side current.
inline double power_factor_angle(double v_d, double k_tap, double v_c) {
  double denom = kBridgeGain * k_tap * v_c;
  if (denom <= 0) throw DomainError("power_factor_angle: k*v_c must be positive");
  double c = v_d / denom;
  if (c > 1.0 || c <= 0.0)
    throw DomainError("power_factor_angle: cos(phi) out of (0,1]: " +
                      std::to_string(c));
  return std::acos(c);
}

struct DcLinkState {
  ControlMode mode = ControlMode::Mode1;
  double v_d_re = 0, v_d_iv = 0, i_d = 0;
  double alpha = 0, gamma = 0;  // radians
  double k_re = 0, k_iv = 0;
  double phi_re = 0, phi_iv = 0;
  double p_re = 0, q_re = 0;  // drawn from the rectifier PCC
  double p_iv = 0, q_iv = 0;  // delivered to / drawn at the inverter PCC
};

namespace detail {

// Picks the tap so the converter angle lands mid-band above its floor; the
// bounded tap then fixes the angle that actually results.
struct TapAngle {
  double k, angle;
};

inline TapAngle regulate_tap(double e_req, double v_c, double angle_min, double k_min,
                             double k_max, const char* side) {
  double target = angle_min + deg2rad(10.0);
  double k = e_req / (kBridgeGain * v_c * std::cos(target));
  k = std::clamp(k, k_min, k_max);
  double arg = e_req / (kBridgeGain * k * v_c);
  if (arg >= 1.0)
    throw InfeasibleDcError(std::string(side) +
                            ": commutation voltage too low for required dc voltage");
  if (arg <= 0.0)
    throw InfeasibleDcError(std::string(side) + ": non-positive dc voltage demand");
  double angle = std::acos(arg);
  if (angle < angle_min - 1e-12)
    throw InfeasibleDcError(std::string(side) + ": angle " +
                            std::to_string(rad2deg(angle)) + " deg below floor " +
                            std::to_string(rad2deg(angle_min)) + " deg");
  return {k, std::max(angle, angle_min)};
}

}  // namespace detail

/// Closed-form solve of one converter pair given the PCC voltage magnitudes.
/// Mode 1 regulates dc current at the rectifier and dc voltage at the
/// inverter; mode 2 parks the rectifier at its firing-angle floor and
/// regulates dc current at the inverter. Throws InfeasibleDcError when an
/// angle floor cannot be respected.
inline DcLinkState solve_dc_subsystem(const DcLink& link, double v_c_re, double v_c_iv,
                                      ControlMode mode) {
  if (v_c_re <= 0 || v_c_iv <= 0)
    throw DomainError("solve_dc_subsystem: PCC voltages must be positive");
  DcLinkState st;
  st.mode = mode;
  if (mode == ControlMode::Mode1) {
    if (!link.i_ref_re || !link.v_ref_iv)
      throw ModeDataMissingError("mode 1 requires i_ref_re and v_ref_iv");
    st.i_d = *link.i_ref_re;
    st.v_d_iv = *link.v_ref_iv;
    st.v_d_re = st.v_d_iv + link.r_dc * st.i_d;

    double e_re = st.v_d_re + kCommDropFactor * link.x_c_re * st.i_d;
    auto re = detail::regulate_tap(e_re, v_c_re, link.alpha_min, link.k_min,
                                   link.k_max, "rectifier");
    st.k_re = re.k;
    st.alpha = re.angle;

    double e_iv = st.v_d_iv + kCommDropFactor * link.x_c_iv * st.i_d;
    auto iv = detail::regulate_tap(e_iv, v_c_iv, link.gamma_min, link.k_min,
                                   link.k_max, "inverter");
    st.k_iv = iv.k;
    st.gamma = iv.angle;
  } else {
    if (!link.i_ref_iv) throw ModeDataMissingError("mode 2 requires i_ref_iv");
    st.i_d = *link.i_ref_iv;
    st.alpha = link.alpha_min;

    // highest inverter dc voltage still reachable with gamma at its floor
    double v_iv_cap = kBridgeGain * link.k_max * v_c_iv * std::cos(link.gamma_min) -
                      kCommDropFactor * link.x_c_iv * st.i_d;
    double v_iv_goal = link.v_ref_iv ? std::min(*link.v_ref_iv, v_iv_cap) : v_iv_cap;

    double e_re_goal = v_iv_goal + link.r_dc * st.i_d +
                       kCommDropFactor * link.x_c_re * st.i_d;
    double k_re = e_re_goal / (kBridgeGain * v_c_re * std::cos(link.alpha_min));
    if (!link.v_ref_iv) k_re = 0.5 * (link.k_min + link.k_max);
    st.k_re = std::clamp(k_re, link.k_min, link.k_max);

    st.v_d_re = converter_voltage(st.k_re, v_c_re, st.alpha, link.x_c_re, st.i_d);
    st.v_d_iv = st.v_d_re - link.r_dc * st.i_d;
    if (st.v_d_iv <= 0)
      throw InfeasibleDcError("inverter dc voltage collapsed in mode 2");

    double e_iv = st.v_d_iv + kCommDropFactor * link.x_c_iv * st.i_d;
    auto iv = detail::regulate_tap(e_iv, v_c_iv, link.gamma_min, link.k_min,
                                   link.k_max, "inverter");
    st.k_iv = iv.k;
    st.gamma = iv.angle;
  }

  st.phi_re = power_factor_angle(st.v_d_re, st.k_re, v_c_re);
  st.phi_iv = power_factor_angle(st.v_d_iv, st.k_iv, v_c_iv);
  st.p_re = st.v_d_re * st.i_d;
  st.q_re = st.v_d_re * st.i_d * std::tan(st.phi_re);
  st.p_iv = st.v_d_iv * st.i_d;
  st.q_iv = st.v_d_iv * st.i_d * std::tan(st.phi_iv);
  return st;
}

// ---------------------------------------------------------------------------
// AC side: polar Newton-Raphson on the bus admittance matrix
// ---------------------------------------------------------------------------

struct YBus {
  Eigen::MatrixXd g, b;
};

inline YBus build_ybus(const NetworkCase& c) {
  const int n = int(c.n_buses());
  YBus y{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  for (const auto& br : c.branches) {
    if (!br.closed()) continue;
    int i = c.bus_index(br.from_bus), j = c.bus_index(br.to_bus);
    y.g(i, i) += br.g_series;
    y.g(j, j) += br.g_series;
    y.g(i, j) -= br.g_series;
    y.g(j, i) -= br.g_series;
    y.b(i, i) += br.b_series;
    y.b(j, j) += br.b_series;
    y.b(i, j) -= br.b_series;
    y.b(j, i) -= br.b_series;
  }
  return y;
}

/// P and Q flowing out of each bus into the AC network.
inline void ac_injections(const YBus& y, const Eigen::VectorXd& v,
                          const Eigen::VectorXd& delta, Eigen::VectorXd& p_out,
                          Eigen::VectorXd& q_out) {
  const int n = int(v.size());
  p_out.setZero(n);
  q_out.setZero(n);
  for (int i = 0; i < n; ++i) {
    double pi = 0, qi = 0;
    for (int j = 0; j < n; ++j) {
      if (y.g(i, j) == 0 && y.b(i, j) == 0) continue;
      double d = delta(i) - delta(j);
      double cd = std::cos(d), sd = std::sin(d);
      pi += v(j) * (y.g(i, j) * cd + y.b(i, j) * sd);
      qi += v(j) * (y.g(i, j) * sd - y.b(i, j) * cd);
    }
    p_out(i) = v(i) * pi;
    q_out(i) = v(i) * qi;
  }
}

struct SolverOptions {
  double tol_ac = 1e-10;      // Newton mismatch, infinity norm
  double tol_couple = 1e-8;   // change in PCC exchange quantities
  double tol_total = 1e-6;    // final whole-system residual gate
  int max_newton = 50;
  int max_rounds = 30;
  bool allow_mode_switch = true;
  std::optional<ControlMode> forced_mode;  // overrides case modes, no switching
};

struct AcSolveStats {
  int iterations = 0;
  double mismatch = 0;
};

/// Newton solve with the net scheduled injection per bus supplied in
/// p_spec/q_spec (already including any converter terms). v/delta are taken
/// as the starting point and overwritten with the solution.
inline AcSolveStats solve_ac_newton(const NetworkCase& c, const YBus& y,
                                    const Eigen::VectorXd& p_spec,
                                    const Eigen::VectorXd& q_spec, Eigen::VectorXd& v,
                                    Eigen::VectorXd& delta, const SolverOptions& opt) {
  const int n = int(c.n_buses());
  const int slack = c.slack_index();

  std::vector<int> dtheta_vars, dv_vars;  // bus index per unknown
  for (int i = 0; i < n; ++i) {
    if (i == slack) continue;
    dtheta_vars.push_back(i);
    if (c.buses[size_t(i)].kind != BusKind::PV) dv_vars.push_back(i);
  }
  const int nt = int(dtheta_vars.size()), nv = int(dv_vars.size());
  const int m = nt + nv;

  Eigen::VectorXd p_calc(n), q_calc(n), f(m);
  Eigen::MatrixXd jac(m, m);

  AcSolveStats stats;
  for (int it = 0; it <= opt.max_newton; ++it) {
    ac_injections(y, v, delta, p_calc, q_calc);
    for (int k = 0; k < nt; ++k) f(k) = p_spec(dtheta_vars[size_t(k)]) - p_calc(dtheta_vars[size_t(k)]);
    for (int k = 0; k < nv; ++k) f(nt + k) = q_spec(dv_vars[size_t(k)]) - q_calc(dv_vars[size_t(k)]);

    stats.mismatch = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
    stats.iterations = it;
    if (stats.mismatch < opt.tol_ac) return stats;
    if (it == opt.max_newton)
      throw NoConvergenceError("ac newton did not converge", it, stats.mismatch);

    auto dp_dt = [&](int i, int j) {
      if (i == j) return -q_calc(i) - y.b(i, i) * v(i) * v(i);
      double d = delta(i) - delta(j);
      return v(i) * v(j) * (y.g(i, j) * std::sin(d) - y.b(i, j) * std::cos(d));
    };
    auto dp_dv = [&](int i, int j) {
      if (i == j) return p_calc(i) / v(i) + y.g(i, i) * v(i);
      double d = delta(i) - delta(j);
      return v(i) * (y.g(i, j) * std::cos(d) + y.b(i, j) * std::sin(d));
    };
    auto dq_dt = [&](int i, int j) {
      if (i == j) return p_calc(i) - y.g(i, i) * v(i) * v(i);
      double d = delta(i) - delta(j);
      return -v(i) * v(j) * (y.g(i, j) * std::cos(d) + y.b(i, j) * std::sin(d));
    };
    auto dq_dv = [&](int i, int j) {
      if (i == j) return q_calc(i) / v(i) - y.b(i, i) * v(i);
      double d = delta(i) - delta(j);
      return v(i) * (y.g(i, j) * std::sin(d) - y.b(i, j) * std::cos(d));
    };

    for (int r = 0; r < nt; ++r) {
      int i = dtheta_vars[size_t(r)];
      for (int k = 0; k < nt; ++k) jac(r, k) = dp_dt(i, dtheta_vars[size_t(k)]);
      for (int k = 0; k < nv; ++k) jac(r, nt + k) = dp_dv(i, dv_vars[size_t(k)]);
    }
    for (int r = 0; r < nv; ++r) {
      int i = dv_vars[size_t(r)];
      for (int k = 0; k < nt; ++k) jac(nt + r, k) = dq_dt(i, dtheta_vars[size_t(k)]);
      for (int k = 0; k < nv; ++k) jac(nt + r, nt + k) = dq_dv(i, dv_vars[size_t(k)]);
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible())
      throw SingularJacobianError("singular jacobian at newton iteration " +
                                  std::to_string(it));
    Eigen::VectorXd dx = lu.solve(f);
    for (int k = 0; k < nt; ++k) delta(dtheta_vars[size_t(k)]) += dx(k);
    for (int k = 0; k < nv; ++k) {
      v(dv_vars[size_t(k)]) += dx(nt + k);
      if (v(dv_vars[size_t(k)]) < 1e-3)
        throw NoConvergenceError("voltage collapsed during newton", it,
                                 stats.mismatch);
    }
  }
  return stats;  // unreachable
}

struct AcdcSolution {
  Eigen::VectorXd v, delta;  // by bus index, radians
  std::vector<DcLinkState> links;
  int newton_iterations = 0;  // summed over coupling rounds
  int coupling_rounds = 0;
  double total_residual = 0;  // infinity norm over the full equation set
};

namespace detail {

/// Net scheduled AC injections including converter draws for given states.
inline void scheduled_injections(const NetworkCase& c,
                                 const std::vector<DcLinkState>& states,
                                 Eigen::VectorXd& p_spec, Eigen::VectorXd& q_spec) {
  const int n = int(c.n_buses());
  p_spec.setZero(n);
  q_spec.setZero(n);
  for (int i = 0; i < n; ++i) {
    p_spec(i) = c.buses[size_t(i)].p_inj();
    q_spec(i) = c.buses[size_t(i)].q_inj();
  }
  for (size_t l = 0; l < c.dc_links.size(); ++l) {
    const auto& link = c.dc_links[l];
    const auto& st = states[l];
    int re = c.bus_index(link.rect_pcc), iv = c.bus_index(link.inv_pcc);
    p_spec(re) -= st.p_re;
    q_spec(re) -= st.q_re;
    p_spec(iv) += st.p_iv;
    q_spec(iv) -= st.q_iv;
  }
}

}  // namespace detail

/// Infinity norm of every model equation at a candidate solution: AC power
/// balance (with converter terms), converter voltage laws, the dc line
/// equation, power-factor definitions, and the active control targets.
inline double solution_residual_inf(const NetworkCase& c, const AcdcSolution& sol) {
  YBus y = build_ybus(c);
  Eigen::VectorXd p_calc, q_calc, p_spec, q_spec;
  ac_injections(y, sol.v, sol.delta, p_calc, q_calc);
  detail::scheduled_injections(c, sol.links, p_spec, q_spec);

  double worst = 0;
  const int slack = c.slack_index();
  for (int i = 0; i < int(c.n_buses()); ++i) {
    const auto& b = c.buses[size_t(i)];
    if (i != slack) worst = std::max(worst, std::abs(p_spec(i) - p_calc(i)));
    if (b.kind == BusKind::PQ || b.kind == BusKind::PCC)
      worst = std::max(worst, std::abs(q_spec(i) - q_calc(i)));
    if (b.kind == BusKind::PV || b.kind == BusKind::Slack)
      worst = std::max(worst, std::abs(sol.v(i) - *b.v_ref));
  }
  for (size_t l = 0; l < c.dc_links.size(); ++l) {
    const auto& link = c.dc_links[l];
    const auto& st = sol.links[l];
    double v_re = sol.v(c.bus_index(link.rect_pcc));
    double v_iv = sol.v(c.bus_index(link.inv_pcc));
    worst = std::max(worst, std::abs(st.v_d_re - converter_voltage(st.k_re, v_re,
                                                                   st.alpha,
                                                                   link.x_c_re,
                                                                   st.i_d)));
    worst = std::max(worst, std::abs(st.v_d_iv - converter_voltage(st.k_iv, v_iv,
                                                                   st.gamma,
                                                                   link.x_c_iv,
                                                                   st.i_d)));
    worst = std::max(worst,
                     std::abs(link.r_dc * st.i_d - (st.v_d_re - st.v_d_iv)));
    worst = std::max(worst, std::abs(std::cos(st.phi_re) -
                                     st.v_d_re / (kBridgeGain * st.k_re * v_re)));
    worst = std::max(worst, std::abs(std::cos(st.phi_iv) -
                                     st.v_d_iv / (kBridgeGain * st.k_iv * v_iv)));
    if (st.mode == ControlMode::Mode1) {
      worst = std::max(worst, std::abs(st.i_d - *link.i_ref_re));
      worst = std::max(worst, std::abs(st.v_d_iv - *link.v_ref_iv));
    } else {
      worst = std::max(worst, std::abs(st.alpha - link.alpha_min));
      worst = std::max(worst, std::abs(st.i_d - *link.i_ref_iv));
    }
  }
  return worst;
}

/// Sequential oracle: alternate Newton AC solves with closed-form converter
/// solves until the exchanged PCC quantities settle. A link that proves
/// infeasible under mode 1 control is retried under mode 2 when switching is
/// allowed.
inline AcdcSolution solve_acdc_sequential(const NetworkCase& c,
                                          const SolverOptions& opt = {}) {
  const int n = int(c.n_buses());
  YBus y = build_ybus(c);

  AcdcSolution sol;
  sol.v.setOnes(n);
  sol.delta.setZero(n);
  for (int i = 0; i < n; ++i)
    if (c.buses[size_t(i)].v_ref) sol.v(i) = *c.buses[size_t(i)].v_ref;

  std::vector<ControlMode> modes;
  for (const auto& link : c.dc_links)
    modes.push_back(opt.forced_mode ? *opt.forced_mode : link.mode);

  auto solve_links = [&](std::vector<DcLinkState>& out) {
    out.clear();
    for (size_t l = 0; l < c.dc_links.size(); ++l) {
      const auto& link = c.dc_links[l];
      double v_re = sol.v(c.bus_index(link.rect_pcc));
      double v_iv = sol.v(c.bus_index(link.inv_pcc));
      try {
        out.push_back(solve_dc_subsystem(link, v_re, v_iv, modes[l]));
      } catch (const InfeasibleDcError&) {
        if (modes[l] == ControlMode::Mode1 && opt.allow_mode_switch &&
            !opt.forced_mode && link.i_ref_iv) {
          modes[l] = ControlMode::Mode2;
          out.push_back(solve_dc_subsystem(link, v_re, v_iv, modes[l]));
        } else {
          throw;
        }
      }
    }
  };

  // Links start unloaded: the first round solves the AC network alone, so
  // converter feasibility (and any mode switch) is judged at realistic
  // voltages rather than at the flat start.
  sol.links.assign(c.dc_links.size(), DcLinkState{});

  Eigen::VectorXd p_spec(n), q_spec(n), p_new(n), q_new(n);
  for (int round = 1; round <= opt.max_rounds; ++round) {
    sol.coupling_rounds = round;
    detail::scheduled_injections(c, sol.links, p_spec, q_spec);
    auto stats = solve_ac_newton(c, y, p_spec, q_spec, sol.v, sol.delta, opt);
    sol.newton_iterations += stats.iterations;
    solve_links(sol.links);
    detail::scheduled_injections(c, sol.links, p_new, q_new);

    double drift = std::max((p_new - p_spec).cwiseAbs().maxCoeff(),
                            (q_new - q_spec).cwiseAbs().maxCoeff());
    if (drift < opt.tol_couple) break;
    if (round == opt.max_rounds)
      throw NoConvergenceError("ac/dc coupling did not settle", round, drift);
  }

  sol.total_residual = solution_residual_inf(c, sol);
  if (sol.total_residual > opt.tol_total)
    throw NoConvergenceError("solution failed the whole-system residual gate",
                             sol.coupling_rounds, sol.total_residual);
  return sol;
}

inline nlohmann::json solution_to_json(const NetworkCase& c,
                                       const AcdcSolution& sol) {
  nlohmann::json j;
  j["buses"] = nlohmann::json::array();
  for (size_t i = 0; i < c.n_buses(); ++i)
    j["buses"].push_back({{"id", c.buses[i].id},
                          {"v", sol.v(int(i))},
                          {"delta_rad", sol.delta(int(i))}});
  j["dc_links"] = nlohmann::json::array();
  for (const auto& st : sol.links)
    j["dc_links"].push_back({{"mode", st.mode == ControlMode::Mode1 ? 1 : 2},
                             {"v_d_re", st.v_d_re},
                             {"v_d_iv", st.v_d_iv},
                             {"i_d", st.i_d},
                             {"alpha_deg", rad2deg(st.alpha)},
                             {"gamma_deg", rad2deg(st.gamma)},
                             {"k_re", st.k_re},
                             {"k_iv", st.k_iv},
                             {"phi_re_deg", rad2deg(st.phi_re)},
                             {"phi_iv_deg", rad2deg(st.phi_iv)},
                             {"p_re", st.p_re},
                             {"q_re", st.q_re},
                             {"p_iv", st.p_iv},
                             {"q_iv", st.q_iv}});
  j["newton_iterations"] = sol.newton_iterations;
  j["coupling_rounds"] = sol.coupling_rounds;
  j["total_residual"] = sol.total_residual;
  return j;
}

}  // namespace gridflow
