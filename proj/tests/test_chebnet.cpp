#include "catch_amalgamated.hpp"
#include "gridflow/chebnet.hpp"

using namespace gridflow;
using Catch::Matchers::WithinAbs;

static const std::string kSmall = std::string(GF_DATA_DIR) + "/fig1_5bus.json";
static const std::string kLarge = std::string(GF_DATA_DIR) + "/ieee30_mod.json";

namespace {
struct Built {
  NetworkCase c;
  GraphTopology t;
  std::vector<Eigen::MatrixXd> basis;
};
Built make(const std::string& path, int order = 3) {
  Built b{load_case(path), {}, {}};
  b.t = build_graph(b.c);
  b.basis = chebyshev_basis(scale_laplacian(laplacian(b.t)), order);
  return b;
}
}  // namespace

TEST_CASE("initialization is reproducible and bias free") {
  Built b = make(kSmall);
  ChebNetConfig cfg;
  ChebNetParams p1 = init_params(b.t, cfg, 9);
  ChebNetParams p2 = init_params(b.t, cfg, 9);
  ChebNetParams p3 = init_params(b.t, cfg, 10);

  REQUIRE(p1.theta.size() == cfg.dims.size() - 1);
  for (size_t l = 0; l < p1.theta.size(); ++l) {
    REQUIRE(p1.theta[l].size() == size_t(cfg.order) + 1);
    for (size_t j = 0; j < p1.theta[l].size(); ++j) {
      // one weight block per polynomial degree, nothing else per layer
      CHECK(p1.theta[l][j].rows() == cfg.dims[l]);
      CHECK(p1.theta[l][j].cols() == cfg.dims[l + 1]);
      CHECK((p1.theta[l][j] - p2.theta[l][j]).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  CHECK((p1.z - p2.z).cwiseAbs().maxCoeff() == 0.0);
  CHECK((p1.z - p3.z).cwiseAbs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(init_params(b.t, ChebNetConfig{3, {4, 16, 3}, 0.01}, 1),
                  ValidationError);
}

TEST_CASE("edge weights live only on incident node-edge pairs") {
  Built b = make(kLarge);
  ChebNetConfig cfg;
  ChebNetParams p = init_params(b.t, cfg, 4);
  Eigen::MatrixXd mask = incidence_mask(b.t);

  REQUIRE(p.z.rows() == b.t.n_nodes);
  REQUIRE(p.z.cols() == b.t.n_edge_cols);
  for (long i = 0; i < p.z.rows(); ++i)
    for (long j = 0; j < p.z.cols(); ++j) {
      if (mask(i, j) == 0.0) {
        CHECK(p.z(i, j) == 0.0);
      } else {
        // 1/degree seasoned with small noise
        CHECK(std::abs(p.z(i, j)) > 0.0);
        CHECK(std::abs(p.z(i, j) - 1.0 / mask.row(i).sum()) <= cfg.z_noise + 1e-12);
      }
    }
}

TEST_CASE("embedding stacks node features with aggregated edge features") {
  Built b = make(kSmall);
  ChebNetParams p = init_params(b.t, ChebNetConfig{}, 2);
  GraphFeatures f = build_features(b.c, b.t, ControlMode::Mode1);
  Standardizer st = fit_standardizer({f});

  Eigen::MatrixXd h0 = embed(b.t, f, st, p.z);
  REQUIRE(h0.rows() == b.t.n_nodes);
  REQUIRE(h0.cols() == 4);
  Eigen::MatrixXd xn = st.apply_node(f.x_node);
  CHECK((h0.leftCols(2) - xn).cwiseAbs().maxCoeff() == 0.0);
  Eigen::MatrixXd agg =
      select_z_columns(p.z, b.t) * st.apply_edge(f.x_edge);
  CHECK((h0.rightCols(2) - agg).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("standardizer freezes training moments and round trips json") {
  Built b = make(kLarge);
  std::vector<GraphFeatures> feats;
  for (uint64_t s = 0; s < 4; ++s)
    feats.push_back(build_features(b.c, b.t, ControlMode::Mode1));
  Standardizer st = fit_standardizer(feats);

  Eigen::MatrixXd x = st.apply_node(feats[0].x_node);
  CHECK(x.rows() == b.t.n_nodes);
  // all samples identical here, so standardized columns are centered
  CHECK(std::abs(x.col(0).mean()) < 1e-9);

  Standardizer rt = standardizer_from_json(standardizer_to_json(st));
  CHECK((rt.node_mean - st.node_mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((rt.edge_std - st.edge_std).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(fit_standardizer({}), DomainError);
}

TEST_CASE("forward pass has the right shape and is deterministic") {
  Built b = make(kLarge);
  ChebNetParams p = init_params(b.t, ChebNetConfig{}, 6);
  GraphFeatures f = build_features(b.c, b.t, ControlMode::Mode1);
  Standardizer st = fit_standardizer({f});
  Eigen::MatrixXd h0 = embed(b.t, f, st, p.z);

  Eigen::MatrixXd raw1 = forward_raw(b.basis, h0, p);
  Eigen::MatrixXd raw2 = forward_raw(b.basis, h0, p);
  REQUIRE(raw1.rows() == b.t.n_nodes);
  REQUIRE(raw1.cols() == 2);
  CHECK((raw1 - raw2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("decoded states respect hard bounds by construction") {
  for (double raw : {-50.0, -3.0, -0.2, 0.0, 0.4, 2.0, 80.0}) {
    double v = decode_volt(raw);
    CHECK(v > 1.0 - kVoltSpan - 1e-12);
    CHECK(v < 1.0 + kVoltSpan + 1e-12);
    double d = decode_delta(raw);
    CHECK(std::abs(d) < kDeltaSpan + 1e-12);
    double k = decode_tap(raw, 0.95, 1.05);
    CHECK(k >= 0.95);
    CHECK(k <= 1.05);
    CHECK(decode_angle(raw, 0.1, AngleDecode::Softplus) >= 0.1);
  }
  // squashes are monotone, so orderings survive decoding
  CHECK(decode_volt(-0.5) < decode_volt(0.5));
  CHECK(decode_delta(-1.0) < decode_delta(1.0));
  CHECK(decode_tap(-1.0, 0.9, 1.1) < decode_tap(1.0, 0.9, 1.1));
  // raw decoding can dip below the floor; that slack is what the
  // angle penalty of the training loss drives out
  CHECK(decode_angle(-1.0, 0.1, AngleDecode::Raw) < 0.1);
}

TEST_CASE("decoded solution honours structure the network cannot break") {
  Built b = make(kLarge);
  ChebNetParams p = init_params(b.t, ChebNetConfig{}, 8);
  GraphFeatures f = build_features(b.c, b.t, ControlMode::Mode1);
  Standardizer st = fit_standardizer({f});

  for (ControlMode mode : {ControlMode::Mode1, ControlMode::Mode2}) {
    AcdcSolution s = run_model(b.c, b.t, b.basis, st, p, mode, AngleDecode::Raw);
    REQUIRE(s.v.size() == long(b.c.n_buses()));
    REQUIRE(s.links.size() == 1);
    const auto& link = b.c.dc_links[0];
    const auto& ls = s.links[0];

    CHECK(s.delta(b.c.slack_index()) == 0.0);
    for (int i = 0; i < int(b.c.n_buses()); ++i) {
      if (b.c.buses[size_t(i)].v_ref)
        CHECK_THAT(s.v(i), WithinAbs(*b.c.buses[size_t(i)].v_ref, 1e-12));
    }

    // the regulated current is read straight from the mode's target
    double i_ref = mode == ControlMode::Mode1 ? *link.i_ref_re : *link.i_ref_iv;
    CHECK_THAT(ls.i_d, WithinAbs(i_ref, 1e-12));
    CHECK(ls.k_re >= link.k_min);
    CHECK(ls.k_re <= link.k_max);
    CHECK(ls.k_iv >= link.k_min);
    CHECK(ls.k_iv <= link.k_max);

    // dc voltages follow the bridge law at the decoded angles and taps
    double v_c_re = s.v(b.c.bus_index(link.rect_bus));
    CHECK_THAT(ls.v_d_re,
               WithinAbs(converter_voltage(ls.k_re, v_c_re, ls.alpha,
                                           link.x_c_re, ls.i_d),
                         1e-12));
    CHECK(ls.p_re > 0.0);  // rectifier draws active power
  }
}

TEST_CASE("network parameters round trip through json exactly") {
  Built b = make(kSmall);
  ChebNetParams p = init_params(b.t, ChebNetConfig{}, 12);
  ChebNetParams r = params_from_json(params_to_json(p));
  CHECK(r.cfg.order == p.cfg.order);
  REQUIRE(r.cfg.dims == p.cfg.dims);
  CHECK((r.z - p.z).cwiseAbs().maxCoeff() == 0.0);
  for (size_t l = 0; l < p.theta.size(); ++l)
    for (size_t j = 0; j < p.theta[l].size(); ++j)
      CHECK((r.theta[l][j] - p.theta[l][j]).cwiseAbs().maxCoeff() == 0.0);
}
