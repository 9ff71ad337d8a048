#include "catch_amalgamated.hpp"
#include "gridflow/harness.hpp"

using namespace gridflow;
using Catch::Matchers::WithinAbs;

static const std::string kSmall = std::string(GF_DATA_DIR) + "/fig1_5bus.json";
static const std::string kLarge = std::string(GF_DATA_DIR) + "/ieee30_mod.json";

namespace {
ModelBank micro_bank(const NetworkCase& base, const ScenarioSet& set) {
  TrainOptions o;
  o.inner_steps = 6;
  o.outer_steps = 2;
  o.batch = 8;
  o.seed = 5;
  return train_all_modes(base, set.cases, set.oracle_mode, o).bank;
}
}  // namespace

TEST_CASE("scenario sampling is seeded and physically plausible") {
  NetworkCase base = load_case(kLarge);
  ScenarioOptions so;
  so.count = 30;
  so.seed = 77;
  ScenarioSet a = generate_scenarios(base, so);
  ScenarioSet b = generate_scenarios(base, so);
  REQUIRE(a.cases.size() == 30);
  CHECK(a.rejected == b.rejected);

  for (size_t i = 0; i < a.cases.size(); ++i) {
    CHECK((a.oracle[i].v - b.oracle[i].v).cwiseAbs().maxCoeff() == 0.0);
    for (const auto& site : base.renewables) {
      double p = a.cases[i].buses[size_t(base.bus_index(site.bus))].p_gen;
      CHECK(p >= 0.0);
      CHECK(p <= site.rated);
    }
    double hydro = a.cases[i].buses[size_t(base.bus_index(base.hydro->bus))].p_gen;
    CHECK(hydro >= 0.0);
    CHECK(hydro <= base.hydro->rated);
    for (size_t bu = 0; bu < base.n_buses(); ++bu) {
      double lo = base.buses[bu].p_load * 0.8 * 0.95 - 1e-12;
      double hi = base.buses[bu].p_load * 1.2 * 1.05 + 1e-12;
      if (base.buses[bu].p_load >= 0) {
        CHECK(a.cases[i].buses[bu].p_load >= lo);
        CHECK(a.cases[i].buses[bu].p_load <= hi);
      }
    }
  }

  // a different seed draws different conditions
  so.seed = 78;
  ScenarioSet c = generate_scenarios(base, so);
  CHECK((c.cases[0].buses[3].p_load != a.cases[0].buses[3].p_load));
}

TEST_CASE("oracle solutions carry zero control violation") {
  for (const auto& path : {kSmall, kLarge}) {
    NetworkCase base = load_case(path);
    ScenarioOptions so;
    so.count = 15;
    so.seed = 3;
    ScenarioSet set = generate_scenarios(base, so);
    for (size_t i = 0; i < set.cases.size(); ++i)
      CHECK(control_violation(set.cases[i], set.oracle[i]) == 0.0);
  }
}

TEST_CASE("the residual pipeline vanishes at oracle solutions") {
  for (const auto& path : {kSmall, kLarge}) {
    NetworkCase base = load_case(path);
    ScenarioOptions so;
    so.count = 25;
    so.seed = 9;
    ScenarioSet set = generate_scenarios(base, so);
    ResidualContext ctx = make_residual_context(base);
    for (size_t i = 0; i < set.cases.size(); ++i) {
      ResidualSet r = eval_residuals(ctx, set.cases[i], set.oracle[i]);
      CHECK(r.total_l1() < 1e-5);
    }
  }
}

TEST_CASE("the packed inference path reproduces the reference forward pass") {
  NetworkCase base = load_case(kLarge);
  ScenarioOptions so;
  so.count = 24;
  so.seed = 11;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);

  GraphTopology topo = build_graph(base);
  auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)), 3);
  InferenceEngine eng(base, topo, basis, bank);

  for (size_t i = 0; i < 5; ++i) {
    for (ControlMode m : {ControlMode::Mode1, ControlMode::Mode2}) {
      Eigen::MatrixXd fast = eng.forward(set.cases[i], m);
      GraphFeatures f = build_features(set.cases[i], topo, m);
      Eigen::MatrixXd h0 = embed(topo, f, bank.standardizer(m), bank.params(m).z);
      Eigen::MatrixXd ref = forward_raw(basis, h0, bank.params(m));
      CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-11);
    }
  }
}

TEST_CASE("mode selection prefers feasibility then smaller residual") {
  NetworkCase base = load_case(kLarge);
  ScenarioOptions so;
  so.count = 24;
  so.seed = 19;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);

  GraphTopology topo = build_graph(base);
  auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)), 3);
  InferenceEngine eng(base, topo, basis, bank);

  for (size_t i = 0; i < 8; ++i) {
    InferenceOutcome out = infer_multi(eng, set.cases[i]);

    AcdcSolution s1 = eng.decode(set.cases[i], ControlMode::Mode1,
                                 eng.forward(set.cases[i], ControlMode::Mode1));
    AcdcSolution s2 = eng.decode(set.cases[i], ControlMode::Mode2,
                                 eng.forward(set.cases[i], ControlMode::Mode2));
    double v1 = control_violation(set.cases[i], s1);
    double v2 = control_violation(set.cases[i], s2);
    CHECK_THAT(out.violation_mode1, WithinAbs(v1, 1e-14));
    CHECK_THAT(out.violation_mode2, WithinAbs(v2, 1e-14));

    bool ok1 = v1 <= kModeFeasTol, ok2 = v2 <= kModeFeasTol;
    if (ok1 != ok2) {
      CHECK(out.mode == (ok1 ? ControlMode::Mode1 : ControlMode::Mode2));
      CHECK(!out.infeasible_all);
    } else if (ok1) {
      // both feasible: the smaller total residual wins the tie
      double r1 = eng.residual_l1(set.cases[i], s1);
      double r2 = eng.residual_l1(set.cases[i], s2);
      CHECK(out.mode == (r1 <= r2 ? ControlMode::Mode1 : ControlMode::Mode2));
      CHECK(out.residual_mode1 >= 0.0);
      CHECK(!out.infeasible_all);
    } else {
      CHECK(out.infeasible_all);
      CHECK(out.mode ==
            (v1 <= v2 ? ControlMode::Mode1 : ControlMode::Mode2));
    }

    const AcdcSolution& picked = out.mode == ControlMode::Mode1 ? s1 : s2;
    CHECK((out.solution.v - picked.v).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("evaluation aggregates per-scenario metrics coherently") {
  NetworkCase base = load_case(kLarge);
  ScenarioOptions so;
  so.count = 30;
  so.seed = 23;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);

  GraphTopology topo = build_graph(base);
  auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)), 3);
  InferenceEngine eng(base, topo, basis, bank);
  EvalReport rep = evaluate(eng, base, set.cases, set.oracle, set.oracle_mode);

  REQUIRE(rep.rows.size() == set.cases.size());
  CHECK(rep.n_mode1 + rep.n_mode2 == int(set.cases.size()));
  CHECK_THAT(rep.mode_accuracy,
             WithinAbs(double(rep.n_correct) / double(set.cases.size()), 1e-15));
  CHECK(rep.per_bus_mre_v.size() == long(base.n_buses()));
  CHECK(rep.violation_variance >= 0.0);
  CHECK(rep.mre_v_mean > 0.0);

  double mean_v = 0;
  for (const auto& m : rep.rows) mean_v += m.mre_v;
  CHECK_THAT(rep.mre_v_mean, WithinAbs(mean_v / double(rep.rows.size()), 1e-12));

  // report writers agree with the aggregates
  std::string csv = metrics_csv(rep);
  CHECK(size_t(std::count(csv.begin(), csv.end(), '\n')) == rep.rows.size() + 1);
  nlohmann::json j = summary_json(rep, nullptr);
  CHECK(j["scenarios"] == rep.rows.size());
  CHECK_THAT(double(j["mre_v_mean"]), WithinAbs(rep.mre_v_mean, 0.0));
}

TEST_CASE("angle error uses a floored denominator near zero angles") {
  // a flat oracle angle profile must not blow the relative error up
  NetworkCase base = load_case(kSmall);
  ScenarioOptions so;
  so.count = 20;
  so.seed = 31;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);
  GraphTopology topo = build_graph(base);
  auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)), 3);
  InferenceEngine eng(base, topo, basis, bank);

  std::vector<AcdcSolution> flat = set.oracle;
  for (auto& s : flat) s.delta.setZero();
  EvalReport rep = evaluate(eng, base, set.cases, flat, set.oracle_mode);
  // worst case error is span/floor, far from infinity
  CHECK(rep.mre_delta_mean < kDeltaSpan / kAngleDenomFloor + 1.0);
  CHECK(std::isfinite(rep.mre_delta_mean));
}

TEST_CASE("timing harness yields positive figures for both solvers") {
  NetworkCase base = load_case(kSmall);
  ScenarioOptions so;
  so.count = 20;
  so.seed = 37;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);
  GraphTopology topo = build_graph(base);
  auto basis = chebyshev_basis(scale_laplacian(laplacian(topo)), 3);
  InferenceEngine eng(base, topo, basis, bank);

  std::vector<NetworkCase> sub(set.cases.begin(), set.cases.begin() + 10);
  BenchReport br = bench_time(eng, sub);
  CHECK(br.oracle_mean_us > 0.0);
  CHECK(br.infer_mean_us > 0.0);
  CHECK(br.speedup > 0.0);
}

TEST_CASE("the trained bank transfers to a tripped topology") {
  NetworkCase base = load_case(kLarge);
  ScenarioOptions so;
  so.count = 24;
  so.seed = 41;
  ScenarioSet set = generate_scenarios(base, so);
  ModelBank bank = micro_bank(base, set);

  ScenarioOptions small = so;
  small.count = 12;
  TripStudy study = topology_study(base, bank, 1, 3, small);
  CHECK(study.intact.rows.size() == 12);
  CHECK(study.tripped.rows.size() == 12);
  CHECK(study.mre_v_ratio > 0.0);
  CHECK(std::isfinite(study.mre_delta_ratio));

  std::string csv = trip_csv(base, study);
  CHECK(size_t(std::count(csv.begin(), csv.end(), '\n')) == base.n_buses() + 1);
}
