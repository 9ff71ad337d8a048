#include <chrono>

#include "catch_amalgamated.hpp"
#include "gridflow/acdc_solver.hpp"
#include "gridflow/residuals.hpp"

using namespace gridflow;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

static const std::string kSmall = std::string(GF_DATA_DIR) + "/fig1_5bus.json";
static const std::string kLarge = std::string(GF_DATA_DIR) + "/ieee30_mod.json";

// Fixture values were frozen from an independent Python solve of the same
// equations (scipy fsolve on the full nonlinear system, residuals < 1e-13);
// the sequential solver must land on the same root.

TEST_CASE("five bus case solves under constant-current control") {
  NetworkCase c = load_case(kSmall);
  AcdcSolution s = solve_acdc_sequential(c);

  const double tol = 1e-9;
  CHECK_THAT(s.v(0), WithinAbs(1.02, tol));
  CHECK_THAT(s.v(1), WithinAbs(1.010252292837254, tol));
  CHECK_THAT(s.v(2), WithinAbs(0.980744676415939, tol));
  CHECK_THAT(s.v(3), WithinAbs(0.984925337230351, tol));
  CHECK_THAT(s.v(4), WithinAbs(0.989395583161947, tol));
  CHECK_THAT(s.delta(0), WithinAbs(0.0, 0.0));
  CHECK_THAT(s.delta(1), WithinAbs(-0.003596183619742, tol));
  CHECK_THAT(s.delta(2), WithinAbs(-0.047622873475779, tol));
  CHECK_THAT(s.delta(3), WithinAbs(-0.034793354171390, tol));
  CHECK_THAT(s.delta(4), WithinAbs(-0.040791633205394, tol));

  REQUIRE(s.links.size() == 1);
  const auto& l = s.links[0];
  CHECK(l.mode == ControlMode::Mode1);
  CHECK_THAT(l.i_d, WithinAbs(0.3, 1e-12));       // regulated current target
  CHECK_THAT(l.v_d_iv, WithinAbs(1.25, 1e-12));   // regulated voltage target
  CHECK_THAT(l.v_d_re, WithinAbs(1.2536, 1e-12)); // target + line drop
  CHECK_THAT(l.alpha, WithinAbs(deg2rad(15.0), 1e-12));
  CHECK_THAT(l.gamma, WithinAbs(deg2rad(24.296797429777), tol));
  CHECK_THAT(l.k_re, WithinAbs(0.968650365006644, tol));
  CHECK_THAT(l.k_iv, WithinAbs(1.05, 1e-12));     // rides its upper bound
  CHECK_THAT(l.p_re, WithinAbs(0.37608, 1e-9));
  CHECK_THAT(l.q_re, WithinAbs(0.125491403842337, tol));
  CHECK_THAT(l.p_iv, WithinAbs(0.375, 1e-9));
  CHECK_THAT(l.q_iv, WithinAbs(0.186881940801445, tol));
}

TEST_CASE("five bus case solves under minimum-angle control when forced") {
  NetworkCase c = load_case(kSmall);
  SolverOptions opt;
  opt.forced_mode = ControlMode::Mode2;
  AcdcSolution s = solve_acdc_sequential(c, opt);

  const double tol = 1e-9;
  CHECK_THAT(s.v(1), WithinAbs(1.015989200442204, tol));
  CHECK_THAT(s.v(2), WithinAbs(0.986269682888680, tol));
  CHECK_THAT(s.v(3), WithinAbs(0.990101475464390, tol));
  CHECK_THAT(s.v(4), WithinAbs(0.991987076953596, tol));

  const auto& l = s.links[0];
  CHECK(l.mode == ControlMode::Mode2);
  CHECK_THAT(l.alpha, WithinAbs(deg2rad(5.0), 1e-12));  // pinned at the floor
  CHECK_THAT(l.i_d, WithinAbs(0.27, 1e-12));            // inverter current target
  CHECK_THAT(l.v_d_re, WithinAbs(1.277877552152191, tol));
  CHECK_THAT(l.v_d_iv, WithinAbs(1.274637552152191, tol));
  CHECK_THAT(l.gamma, WithinAbs(deg2rad(22.694128815401), tol));
  CHECK_THAT(l.k_re, WithinAbs(0.95, 1e-12));  // clamped at its lower bound
  CHECK_THAT(l.k_iv, WithinAbs(1.05, 1e-12));
  CHECK_THAT(l.p_re, WithinAbs(0.345026939081092, tol));
  CHECK_THAT(l.q_re, WithinAbs(0.069389285886410, tol));
  CHECK_THAT(l.q_iv, WithinAbs(0.158912539013190, tol));
}

TEST_CASE("thirty bus case solves under both control schemes") {
  NetworkCase c = load_case(kLarge);

  SECTION("constant current") {
    AcdcSolution s = solve_acdc_sequential(c);
    const double tol = 1e-9;
    CHECK_THAT(s.v(1), WithinAbs(1.043766212894510, tol));
    CHECK_THAT(s.v(3), WithinAbs(1.035624746734968, tol));
    const auto& l = s.links[0];
    CHECK(l.mode == ControlMode::Mode1);
    CHECK_THAT(l.i_d, WithinAbs(0.4, 1e-12));
    CHECK_THAT(l.v_d_re, WithinAbs(1.359, 1e-12));
    CHECK_THAT(l.v_d_iv, WithinAbs(1.355, 1e-12));
    CHECK_THAT(l.alpha, WithinAbs(deg2rad(15.0), 1e-12));
    CHECK_THAT(l.gamma, WithinAbs(deg2rad(18.429709610409), tol));
    CHECK_THAT(l.k_re, WithinAbs(1.026181804880020, tol));
    CHECK_THAT(l.k_iv, WithinAbs(1.05, 1e-12));
    CHECK_THAT(l.p_re, WithinAbs(0.5436, 1e-9));
    CHECK_THAT(l.q_re, WithinAbs(0.198166700691586, tol));
    CHECK_THAT(l.q_iv, WithinAbs(0.226453859496561, tol));
  }
  SECTION("minimum angle") {
    SolverOptions opt;
    opt.forced_mode = ControlMode::Mode2;
    AcdcSolution s = solve_acdc_sequential(c, opt);
    const double tol = 1e-9;
    const auto& l = s.links[0];
    CHECK_THAT(l.i_d, WithinAbs(0.36, 1e-12));
    CHECK_THAT(l.alpha, WithinAbs(deg2rad(5.0), 1e-12));
    CHECK_THAT(l.gamma, WithinAbs(deg2rad(19.060789919235), tol));
    CHECK_THAT(l.k_re, WithinAbs(0.989155915905337, tol));
    CHECK_THAT(l.v_d_re, WithinAbs(1.3586, tol));
    CHECK_THAT(l.v_d_iv, WithinAbs(1.355, tol));
    CHECK_THAT(l.q_re, WithinAbs(0.119096628767286, tol));
    CHECK_THAT(l.q_iv, WithinAbs(0.205166283719101, tol));
  }
}

TEST_CASE("solved states satisfy every physics equation") {
  for (const auto& path : {kSmall, kLarge}) {
    NetworkCase c = load_case(path);
    AcdcSolution s = solve_acdc_sequential(c);
    CHECK(s.total_residual < 1e-6);

    ResidualContext ctx = make_residual_context(c);
    ResidualSet r = eval_residuals(ctx, c, s);
    CHECK(r.f_pqv.cwiseAbs().maxCoeff() < 1e-6);
    CHECK(r.f_dc_eq.cwiseAbs().maxCoeff() < 1e-6);
    CHECK(r.f_dc_con.cwiseAbs().maxCoeff() < 1e-6);
    CHECK(r.penalty_angle == 0.0);
    CHECK(r.penalty_tap == 0.0);

    // whole-system active power: generation covers load plus network loss
    Eigen::VectorXd p_calc, q_calc, p_spec, q_spec;
    ac_injections(ctx.y, s.v, s.delta, p_calc, q_calc);
    detail::scheduled_injections(c, s.links, p_spec, q_spec);
    double imbalance = 0;
    for (int i : ctx.p_rows) imbalance += p_spec(i) - p_calc(i);
    CHECK(std::abs(imbalance) < 1e-6);
  }
}

TEST_CASE("solver runtime stays interactive") {
  for (const auto& path : {kSmall, kLarge}) {
    NetworkCase c = load_case(path);
    auto t0 = std::chrono::steady_clock::now();
    AcdcSolution s = solve_acdc_sequential(c);
    auto t1 = std::chrono::steady_clock::now();
    CHECK(std::chrono::duration<double>(t1 - t0).count() < 1.0);
    CHECK(s.newton_iterations > 0);
    CHECK(s.coupling_rounds >= 2);
  }
}

TEST_CASE("infeasible constant-current control falls back to minimum angle") {
  // raising the current order forces the rectifier below its angle floor,
  // which must flip the link to mode 2 rather than fail
  NetworkCase c = load_case(kSmall);
  c.dc_links[0].i_ref_re = 0.52;
  c.dc_links[0].i_ref_iv = 0.47;
  AcdcSolution s = solve_acdc_sequential(c);
  CHECK(s.links[0].mode == ControlMode::Mode2);
  CHECK_THAT(s.links[0].alpha, WithinAbs(deg2rad(5.0), 1e-12));
  CHECK_THAT(s.links[0].i_d, WithinAbs(0.47, 1e-12));

  // with switching disabled the same order must raise instead
  SolverOptions opt;
  opt.allow_mode_switch = false;
  CHECK_THROWS_AS(solve_acdc_sequential(c, opt), InfeasibleDcError);
}

TEST_CASE("mode order determines the regulated pair") {
  NetworkCase c = load_case(kSmall);
  SolverOptions o1, o2;
  o1.forced_mode = ControlMode::Mode1;
  o2.forced_mode = ControlMode::Mode2;
  AcdcSolution s1 = solve_acdc_sequential(c, o1);
  AcdcSolution s2 = solve_acdc_sequential(c, o2);
  // mode 1 regulates rectifier current, mode 2 pins the firing angle
  CHECK_THAT(s1.links[0].i_d, WithinAbs(*c.dc_links[0].i_ref_re, 1e-12));
  CHECK_THAT(s2.links[0].i_d, WithinAbs(*c.dc_links[0].i_ref_iv, 1e-12));
  CHECK(s2.links[0].alpha < s1.links[0].alpha);
}
