#pragma once
#include <vector>

#include <Eigen/Dense>

#include "gridflow/acdc_solver.hpp"
#include "gridflow/grid_model.hpp"

namespace gridflow {

/// Flattened physics residuals of a candidate operating state.
/// Component layout (fixed, shared with the training tape):
///   f_pqv:    active-power mismatch at every non-slack bus (bus order),
///             then reactive mismatch at PQ and PCC buses (bus order),
///             then voltage-setpoint error at PV buses (bus order).
///   f_dc_eq:  per link: rectifier bridge law, inverter bridge law,
///             dc line voltage drop, rectifier power-factor law,
///             inverter power-factor law.
///   f_dc_con: per link: the two regulation targets of the active mode.
struct ResidualSet {
  Eigen::VectorXd f_pqv, f_dc_eq, f_dc_con;
  double penalty_angle = 0, penalty_tap = 0;

  double total_l1() const {
    return f_pqv.lpNorm<1>() + f_dc_eq.lpNorm<1>() + f_dc_con.lpNorm<1>() +
           penalty_angle + penalty_tap;
  }
};

struct ResidualContext {
  YBus y;
  std::vector<int> p_rows, q_rows, v_rows;  // bus indices per group
};

inline ResidualContext make_residual_context(const NetworkCase& c) {
  ResidualContext ctx;
  ctx.y = build_ybus(c);
  const int slack = c.slack_index();
  for (int i = 0; i < int(c.n_buses()); ++i) {
    const auto& b = c.buses[size_t(i)];
    if (i != slack) ctx.p_rows.push_back(i);
    if (b.kind == BusKind::PQ || b.kind == BusKind::PCC) ctx.q_rows.push_back(i);
    if (b.kind == BusKind::PV) ctx.v_rows.push_back(i);
  }
  return ctx;
}

inline ResidualSet eval_residuals(const ResidualContext& ctx, const NetworkCase& c,
                                  const AcdcSolution& sol) {
  ResidualSet r;
  Eigen::VectorXd p_calc, q_calc, p_spec, q_spec;
  ac_injections(ctx.y, sol.v, sol.delta, p_calc, q_calc);
  detail::scheduled_injections(c, sol.links, p_spec, q_spec);

  r.f_pqv.resize(long(ctx.p_rows.size() + ctx.q_rows.size() + ctx.v_rows.size()));
  long k = 0;
  for (int i : ctx.p_rows) r.f_pqv(k++) = p_spec(i) - p_calc(i);
  for (int i : ctx.q_rows) r.f_pqv(k++) = q_spec(i) - q_calc(i);
  for (int i : ctx.v_rows) r.f_pqv(k++) = sol.v(i) - *c.buses[size_t(i)].v_ref;

  const long n_link = long(c.dc_links.size());
  r.f_dc_eq.resize(5 * n_link);
  r.f_dc_con.resize(2 * n_link);
  for (long l = 0; l < n_link; ++l) {
    const auto& link = c.dc_links[size_t(l)];
    const auto& st = sol.links[size_t(l)];
    double v_re = sol.v(c.bus_index(link.rect_pcc));
    double v_iv = sol.v(c.bus_index(link.inv_pcc));
    r.f_dc_eq(5 * l + 0) =
        st.v_d_re - converter_voltage(st.k_re, v_re, st.alpha, link.x_c_re, st.i_d);
    r.f_dc_eq(5 * l + 1) =
        st.v_d_iv - converter_voltage(st.k_iv, v_iv, st.gamma, link.x_c_iv, st.i_d);
    r.f_dc_eq(5 * l + 2) = link.r_dc * st.i_d - (st.v_d_re - st.v_d_iv);
    r.f_dc_eq(5 * l + 3) =
        std::cos(st.phi_re) - st.v_d_re / (kBridgeGain * st.k_re * v_re);
    r.f_dc_eq(5 * l + 4) =
        std::cos(st.phi_iv) - st.v_d_iv / (kBridgeGain * st.k_iv * v_iv);

    if (st.mode == ControlMode::Mode1) {
      r.f_dc_con(2 * l + 0) = st.i_d - link.i_ref_re.value_or(0);
      r.f_dc_con(2 * l + 1) = st.v_d_iv - link.v_ref_iv.value_or(0);
    } else {
      r.f_dc_con(2 * l + 0) = st.alpha - link.alpha_min;
      r.f_dc_con(2 * l + 1) = st.i_d - link.i_ref_iv.value_or(0);
    }

    r.penalty_angle += std::max(link.alpha_min - st.alpha, 0.0) +
                       std::max(link.gamma_min - st.gamma, 0.0);
    r.penalty_tap += std::max(st.k_re - link.k_max, 0.0) +
                     std::max(link.k_min - st.k_re, 0.0) +
                     std::max(st.k_iv - link.k_max, 0.0) +
                     std::max(link.k_min - st.k_iv, 0.0);
  }
  return r;
}

}  // namespace gridflow
