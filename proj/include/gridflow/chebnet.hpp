#pragma once
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gridflow/acdc_solver.hpp"
#include "gridflow/graph.hpp"
#include "gridflow/rng.hpp"

namespace gridflow {

struct ChebNetConfig {
  int order = 3;  // Chebyshev degree, basis T_0..T_order
  std::vector<int> dims = {4, 64, 64, 2};
  double z_noise = 0.01;
};

/// Per-channel affine normalization of the raw input features, frozen from
/// the training set.
struct Standardizer {
  Eigen::Vector2d node_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d node_std = Eigen::Vector2d::Ones();
  Eigen::Vector2d edge_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d edge_std = Eigen::Vector2d::Ones();

  Eigen::MatrixXd apply_node(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - node_mean.transpose()).array().rowwise() /
           node_std.transpose().array();
  }
  Eigen::MatrixXd apply_edge(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - edge_mean.transpose()).array().rowwise() /
           edge_std.transpose().array();
  }
};

inline Standardizer fit_standardizer(const std::vector<GraphFeatures>& feats) {
  if (feats.empty()) throw DomainError("fit_standardizer: no features");
  Standardizer s;
  for (int ch = 0; ch < 2; ++ch) {
    double sum = 0, sum2 = 0;
    long n = 0;
    for (const auto& f : feats) {
      sum += f.x_node.col(ch).sum();
      sum2 += f.x_node.col(ch).squaredNorm();
      n += f.x_node.rows();
    }
    s.node_mean(ch) = sum / double(n);
    double var = sum2 / double(n) - s.node_mean(ch) * s.node_mean(ch);
    s.node_std(ch) = std::sqrt(std::max(var, 0.0));
    if (s.node_std(ch) < 1e-8) s.node_std(ch) = 1.0;

    sum = 0, sum2 = 0, n = 0;
    for (const auto& f : feats) {
      sum += f.x_edge.col(ch).sum();
      sum2 += f.x_edge.col(ch).squaredNorm();
      n += f.x_edge.rows();
    }
    s.edge_mean(ch) = sum / double(n);
    var = sum2 / double(n) - s.edge_mean(ch) * s.edge_mean(ch);
    s.edge_std(ch) = std::sqrt(std::max(var, 0.0));
    if (s.edge_std(ch) < 1e-8) s.edge_std(ch) = 1.0;
  }
  return s;
}

struct ChebNetParams {
  ChebNetConfig cfg;
  Eigen::MatrixXd z;  // n_nodes x n_edge_cols, incidence-sparse
  std::vector<std::vector<Eigen::MatrixXd>> theta;  // [layer][j]
};

/// 0/1 pattern of node-edge incidence on the stable column space.
inline Eigen::MatrixXd incidence_mask(const GraphTopology& t) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(t.n_nodes, t.n_edge_cols);
  for (const auto& e : t.edges) {
    m(e.a, e.col) = 1;
    m(e.b, e.col) = 1;
  }
  return m;
}

/// Column sub-matrix of z matching the edges present in a topology.
inline Eigen::MatrixXd select_z_columns(const Eigen::MatrixXd& z,
                                        const GraphTopology& t) {
  Eigen::MatrixXd out(z.rows(), t.n_edges());
  for (int e = 0; e < t.n_edges(); ++e) out.col(e) = z.col(t.edges[size_t(e)].col);
  return out;
}

/// 0/1 selector S with z_selected = z * S.
inline Eigen::MatrixXd column_selector(const GraphTopology& t) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(t.n_edge_cols, t.n_edges());
  for (int e = 0; e < t.n_edges(); ++e) s(t.edges[size_t(e)].col, e) = 1;
  return s;
}

inline ChebNetParams init_params(const GraphTopology& t, const ChebNetConfig& cfg,
                                 uint64_t seed) {
  if (cfg.dims.size() < 2 || cfg.dims.front() != 4 || cfg.dims.back() != 2)
    throw ValidationError("chebnet dims must run from 4 input to 2 output channels");
  ChebNetParams p;
  p.cfg = cfg;
  Rng rng(seed);

  std::vector<int> degree(size_t(t.n_nodes), 0);
  for (const auto& e : t.edges) {
    ++degree[size_t(e.a)];
    ++degree[size_t(e.b)];
  }
  p.z.setZero(t.n_nodes, t.n_edge_cols);
  for (int i = 0; i < t.n_nodes; ++i)
    for (const auto& e : t.edges)
      if (e.a == i || e.b == i)
        p.z(i, e.col) = 1.0 / double(degree[size_t(i)]) +
                        cfg.z_noise * rng.uniform(-1.0, 1.0);

  const int n_layers = int(cfg.dims.size()) - 1;
  p.theta.resize(size_t(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    double bound = std::sqrt(6.0 / double(cfg.dims[size_t(l)] + cfg.dims[size_t(l) + 1]));
    for (int j = 0; j <= cfg.order; ++j) {
      Eigen::MatrixXd th(cfg.dims[size_t(l)], cfg.dims[size_t(l) + 1]);
      for (long r = 0; r < th.rows(); ++r)
        for (long c = 0; c < th.cols(); ++c) th(r, c) = rng.uniform(-bound, bound);
      p.theta[size_t(l)].push_back(std::move(th));
    }
  }
  return p;
}

/// H0 = [x_node | z x_edge], built from standardized features.
inline Eigen::MatrixXd embed(const GraphTopology& t, const GraphFeatures& f,
                             const Standardizer& std_, const Eigen::MatrixXd& z) {
  Eigen::MatrixXd h0(t.n_nodes, 4);
  h0.leftCols(2) = std_.apply_node(f.x_node);
  h0.rightCols(2) = select_z_columns(z, t) * std_.apply_edge(f.x_edge);
  return h0;
}

/// Plain forward pass: H <- act(sum_j T_j H theta_j), tanh on hidden layers,
/// identity on the last. Returns the raw n x 2 output.
inline Eigen::MatrixXd forward_raw(const std::vector<Eigen::MatrixXd>& basis,
                                   const Eigen::MatrixXd& h0,
                                   const ChebNetParams& p) {
  if (int(basis.size()) != p.cfg.order + 1)
    throw ShapeMismatchError("basis order does not match config");
  const int n_layers = int(p.theta.size());
  Eigen::MatrixXd h = h0, acc;
  for (int l = 0; l < n_layers; ++l) {
    acc.setZero(h.rows(), p.theta[size_t(l)][0].cols());
    for (size_t j = 0; j < basis.size(); ++j)
      acc.noalias() += basis[j] * h * p.theta[size_t(l)][j];
    if (l + 1 < n_layers)
      h = acc.array().tanh();
    else
      h = acc;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Output decoding
// ---------------------------------------------------------------------------

enum class AngleDecode {
  Softplus,  // angle = floor + 0.5 softplus(raw), tap = logistic range squash;
             // converter limits hold by construction
  Raw        // angle = floor + 0.5 raw, tap = linear around the band center;
             // limit violations possible and penalized, which both lets taps
             // reach (and signal) their bounds exactly and makes the floor
             // and tap penalties usable as mode-feasibility evidence
};

// Squash scales per output channel. Chosen so a unit move on any raw channel
// shifts its residual rows by a comparable amount: bus angles and voltages
// enter the mismatch through the susceptance matrix (|b_ii| runs to ~80 on
// the bundled cases) while taps enter through the bridge gain (~1.3), so
// without rebalancing one gradient-descent step size cannot serve them all.
constexpr double kVoltSpan = 0.15;     // bus |v - 1| bound
constexpr double kVoltArg = 1.0 / 3.0;
constexpr double kDeltaSpan = 0.3;     // bus angle bound, radians
constexpr double kDeltaArg = 1.0 / 3.0;
constexpr double kAngleScale = 0.5;    // converter angle, radians above floor
constexpr double kTapSteep = 4.0;

inline double decode_volt(double raw) {
  return 1.0 + kVoltSpan * std::tanh(kVoltArg * raw);
}

inline double decode_delta(double raw) {
  return kDeltaSpan * std::tanh(kDeltaArg * raw);
}

inline double decode_angle(double raw, double floor, AngleDecode kind) {
  if (kind == AngleDecode::Softplus) {
    double sp = raw > 0 ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
    return floor + kAngleScale * sp;
  }
  return floor + kAngleScale * raw;
}

inline double decode_tap(double raw, double k_min, double k_max, AngleDecode kind) {
  if (kind == AngleDecode::Raw) return 0.5 * (k_min + k_max) + (k_max - k_min) * raw;
  double x = kTapSteep * raw;
  double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return k_min + (k_max - k_min) * sig;
}

/// Maps raw node outputs to a physical operating state. Bus voltages and
/// angles decode through bounded squashes except where a setpoint pins them;
/// converter dc voltages, current, and power factors then follow from the
/// bridge equations and the mode's regulation targets.
inline AcdcSolution decode_state(const NetworkCase& c, const GraphTopology& t,
                                 ControlMode mode, const Eigen::MatrixXd& raw,
                                 AngleDecode angle_kind) {
  if (raw.rows() != t.n_nodes || raw.cols() != 2)
    throw ShapeMismatchError("decode_state: raw output must be n_nodes x 2");
  const int n_bus = int(c.n_buses());
  const int slack = c.slack_index();

  AcdcSolution s;
  s.v.resize(n_bus);
  s.delta.resize(n_bus);
  for (int i = 0; i < n_bus; ++i) {
    const auto& b = c.buses[size_t(i)];
    if (b.kind == BusKind::PV || b.kind == BusKind::Slack)
      s.v(i) = *b.v_ref;
    else
      s.v(i) = decode_volt(raw(i, 0));
    s.delta(i) = i == slack ? 0.0 : decode_delta(raw(i, 1));
  }

  for (size_t l = 0; l < c.dc_links.size(); ++l) {
    const auto& link = c.dc_links[l];
    int rect_row = n_bus + 2 * int(l), inv_row = rect_row + 1;
    DcLinkState st;
    st.mode = mode;
    st.alpha = decode_angle(raw(rect_row, 0), link.alpha_min, angle_kind);
    st.gamma = decode_angle(raw(inv_row, 0), link.gamma_min, angle_kind);
    st.k_re = decode_tap(raw(rect_row, 1), link.k_min, link.k_max, angle_kind);
    st.k_iv = decode_tap(raw(inv_row, 1), link.k_min, link.k_max, angle_kind);
    if (mode == ControlMode::Mode1) {
      if (!link.i_ref_re) throw ModeDataMissingError("mode 1 requires i_ref_re");
      st.i_d = *link.i_ref_re;
    } else {
      if (!link.i_ref_iv) throw ModeDataMissingError("mode 2 requires i_ref_iv");
      st.i_d = *link.i_ref_iv;
    }
    double v_re = s.v(c.bus_index(link.rect_pcc));
    double v_iv = s.v(c.bus_index(link.inv_pcc));
    st.v_d_re = converter_voltage(st.k_re, v_re, st.alpha, link.x_c_re, st.i_d);
    st.v_d_iv = converter_voltage(st.k_iv, v_iv, st.gamma, link.x_c_iv, st.i_d);

    auto tan_phi = [](double v_d, double k, double v_c) {
      double cphi = v_d / (kBridgeGain * k * v_c);
      double s2 = std::max(1.0 - cphi * cphi, 1e-12);
      return std::sqrt(s2) / std::max(cphi, 1e-3);
    };
    auto safe_acos = [](double x) { return std::acos(std::clamp(x, -1.0, 1.0)); };
    st.phi_re = safe_acos(st.v_d_re / (kBridgeGain * st.k_re * v_re));
    st.phi_iv = safe_acos(st.v_d_iv / (kBridgeGain * st.k_iv * v_iv));
    st.p_re = st.v_d_re * st.i_d;
    st.q_re = st.v_d_re * st.i_d * tan_phi(st.v_d_re, st.k_re, v_re);
    st.p_iv = st.v_d_iv * st.i_d;
    st.q_iv = st.v_d_iv * st.i_d * tan_phi(st.v_d_iv, st.k_iv, v_iv);
    s.links.push_back(st);
  }
  return s;
}

/// Features -> embed -> forward -> decode for one scenario case.
inline AcdcSolution run_model(const NetworkCase& c, const GraphTopology& t,
                              const std::vector<Eigen::MatrixXd>& basis,
                              const Standardizer& std_, const ChebNetParams& p,
                              ControlMode mode, AngleDecode angle_kind) {
  GraphFeatures f = build_features(c, t, mode);
  Eigen::MatrixXd h0 = embed(t, f, std_, p.z);
  Eigen::MatrixXd raw = forward_raw(basis, h0, p);
  return decode_state(c, t, mode, raw, angle_kind);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (long r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw ParseError("expected a matrix as array of arrays");
  Eigen::MatrixXd m(j.size(), j[0].size());
  for (long r = 0; r < m.rows(); ++r) {
    if (j[size_t(r)].size() != size_t(m.cols()))
      throw ParseError("ragged matrix rows");
    for (long c = 0; c < m.cols(); ++c) m(r, c) = j[size_t(r)][size_t(c)].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json params_to_json(const ChebNetParams& p) {
  nlohmann::json j;
  j["order"] = p.cfg.order;
  j["dims"] = p.cfg.dims;
  j["z_noise"] = p.cfg.z_noise;
  j["z"] = detail::matrix_to_json(p.z);
  j["theta"] = nlohmann::json::array();
  for (const auto& layer : p.theta) {
    nlohmann::json jl = nlohmann::json::array();
    for (const auto& th : layer) jl.push_back(detail::matrix_to_json(th));
    j["theta"].push_back(std::move(jl));
  }
  return j;
}

inline ChebNetParams params_from_json(const nlohmann::json& j) {
  ChebNetParams p;
  p.cfg.order = j.at("order").get<int>();
  p.cfg.dims = j.at("dims").get<std::vector<int>>();
  p.cfg.z_noise = j.at("z_noise").get<double>();
  p.z = detail::matrix_from_json(j.at("z"));
  for (const auto& jl : j.at("theta")) {
    std::vector<Eigen::MatrixXd> layer;
    for (const auto& jt : jl) layer.push_back(detail::matrix_from_json(jt));
    p.theta.push_back(std::move(layer));
  }
  if (p.theta.size() + 1 != p.cfg.dims.size())
    throw ParseError("theta layer count does not match dims");
  return p;
}

inline nlohmann::json standardizer_to_json(const Standardizer& s) {
  auto v2 = [](const Eigen::Vector2d& v) {
    return nlohmann::json::array({v(0), v(1)});
  };
  return {{"node_mean", v2(s.node_mean)},
          {"node_std", v2(s.node_std)},
          {"edge_mean", v2(s.edge_mean)},
          {"edge_std", v2(s.edge_std)}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  auto v2 = [&](const char* key) {
    return Eigen::Vector2d(j.at(key)[0].get<double>(), j.at(key)[1].get<double>());
  };
  Standardizer s;
  s.node_mean = v2("node_mean");
  s.node_std = v2("node_std");
  s.edge_mean = v2("edge_mean");
  s.edge_std = v2("edge_std");
  return s;
}

}  // namespace gridflow
