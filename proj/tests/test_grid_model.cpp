#include "catch_amalgamated.hpp"
#include "gridflow/grid_model.hpp"
#include "gridflow/acdc_solver.hpp"

using namespace gridflow;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

static const std::string kSmall = std::string(GF_DATA_DIR) + "/fig1_5bus.json";
static const std::string kLarge = std::string(GF_DATA_DIR) + "/ieee30_mod.json";

TEST_CASE("bundled cases load and validate") {
  NetworkCase s = load_case(kSmall);
  CHECK(s.n_buses() == 5);
  CHECK(s.branches.size() == 5);
  CHECK(s.dc_links.size() == 1);
  CHECK(s.buses[size_t(s.slack_index())].kind == BusKind::Slack);

  NetworkCase l = load_case(kLarge);
  CHECK(l.n_buses() == 30);
  CHECK(l.branches.size() == 41);
  CHECK(l.dc_links.size() == 1);
  CHECK(!l.renewables.empty());
  CHECK(l.hydro.has_value());
}

TEST_CASE("per-unit conversion divides by the MVA base") {
  CHECK_THAT(to_per_unit(50.0, 100.0), WithinAbs(0.5, 1e-15));
  CHECK_THROWS_AS(to_per_unit(1.0, 0.0), ValidationError);
}

TEST_CASE("pcc buses carry both ac branches and a dc terminal") {
  NetworkCase c = load_case(kSmall);
  const auto& link = c.dc_links[0];
  CHECK(c.bus(link.rect_bus).kind == BusKind::PCC);
  CHECK(c.bus(link.inv_bus).kind == BusKind::PCC);
  int touching = 0;
  for (const auto& br : c.branches)
    if (br.from_bus == link.rect_bus || br.to_bus == link.rect_bus) ++touching;
  CHECK(touching >= 1);
}

TEST_CASE("validation rejects malformed networks") {
  NetworkCase c = load_case(kSmall);

  SECTION("duplicate bus id") {
    c.buses.push_back(c.buses[0]);
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("missing slack") {
    for (auto& b : c.buses)
      if (b.kind == BusKind::Slack) b.kind = BusKind::PQ;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("two slacks") {
    for (auto& b : c.buses)
      if (b.kind == BusKind::PV) b.kind = BusKind::Slack;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("branch endpoint not a bus") {
    c.branches[0].to_bus = 99;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("inverted tap bounds on a link") {
    c.dc_links[0].k_min = 2.0;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("dc link endpoint must be a pcc bus") {
    for (auto& b : c.buses)
      if (b.id == c.dc_links[0].rect_bus) b.kind = BusKind::PQ;
    CHECK_THROWS_AS(validate(c), ValidationError);
  }
}

TEST_CASE("tripping a branch produces a reduced but connected network") {
  NetworkCase c = load_case(kLarge);
  NetworkCase t = apply_topology_change(c, 1, 3);
  CHECK(t.n_closed_branches() == c.n_closed_branches() - 1);
  CHECK(t.branches.size() == c.branches.size());

  CHECK_THROWS_AS(apply_topology_change(c, 1, 99), ValidationError);
  // 5-bus case has no branch between these ids at all
  NetworkCase s = load_case(kSmall);
  CHECK_THROWS_AS(apply_topology_change(s, 1, 3), ValidationError);
}

TEST_CASE("case json round trip preserves the network") {
  NetworkCase c = load_case(kLarge);
  NetworkCase r = parse_case(case_to_json(c));
  REQUIRE(r.n_buses() == c.n_buses());
  REQUIRE(r.branches.size() == c.branches.size());
  for (size_t i = 0; i < c.buses.size(); ++i) {
    CHECK(r.buses[i].id == c.buses[i].id);
    CHECK(r.buses[i].kind == c.buses[i].kind);
    CHECK_THAT(r.buses[i].p_load, WithinAbs(c.buses[i].p_load, 0.0));
    CHECK_THAT(r.buses[i].q_load, WithinAbs(c.buses[i].q_load, 0.0));
  }
  for (size_t i = 0; i < c.branches.size(); ++i) {
    CHECK_THAT(r.branches[i].g_series, WithinAbs(c.branches[i].g_series, 0.0));
    CHECK_THAT(r.branches[i].b_series, WithinAbs(c.branches[i].b_series, 0.0));
  }
  const auto& a = c.dc_links[0];
  const auto& b = r.dc_links[0];
  CHECK_THAT(b.r_dc, WithinAbs(a.r_dc, 0.0));
  CHECK(b.i_ref_re.value() == a.i_ref_re.value());
  CHECK(b.v_ref_iv.value() == a.v_ref_iv.value());
}

TEST_CASE("branch flow matches the polar power equations") {
  // hand-computed from p = v_i^2 g - v_i v_j (g cos + b sin),
  // q = -v_i^2 b - v_i v_j (g sin - b cos)
  auto [p, q] = branch_flow(1.02, 0.98, 0.05, 1.923, -9.615);
  CHECK_THAT(p, WithinRel(0.56121818061333273, 1e-14));
  CHECK_THAT(q, WithinRel(0.30823194127336784, 1e-14));

  // zero angle, equal voltage, lossless line carries nothing
  auto [p0, q0] = branch_flow(1.0, 1.0, 0.0, 0.0, -5.0);
  CHECK_THAT(p0, WithinAbs(0.0, 1e-15));
  CHECK_THAT(q0, WithinAbs(0.0, 1e-15));
}

TEST_CASE("bridge equations reproduce hand-computed values") {
  CHECK_THAT(kBridgeGain, WithinRel(3.0 * std::sqrt(2.0) / kPi, 1e-15));
  CHECK_THAT(kCommDropFactor, WithinRel(3.0 / kPi, 1e-15));

  double vd = converter_voltage(1.0, 1.0, deg2rad(18.0), 0.1, 0.4);
  CHECK_THAT(vd, WithinRel(1.2461803624700403, 1e-14));

  double phi = power_factor_angle(vd, 1.0, 1.0);
  CHECK_THAT(std::cos(phi), WithinRel(vd / kBridgeGain, 1e-14));
  CHECK_THAT(power_factor_angle(0.85584892474926133 * kBridgeGain, 1.0, 1.0),
             WithinRel(0.54360640554527606, 1e-12));

  CHECK_THAT(dc_line_current(1.2536, 1.25, 0.012), WithinRel(0.3, 1e-12));
  CHECK_THROWS_AS(dc_line_current(1.0, 1.0, 0.0), DomainError);
  CHECK_THROWS_AS(power_factor_angle(2.0, 1.0, 1.0), DomainError);
}
