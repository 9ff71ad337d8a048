#pragma once
#include <cstdint>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "gridflow/grid_model.hpp"

namespace gridflow {

enum class NodeKind { AcPq, AcPv, AcSlack, AcPcc, RectTerm, InvTerm };
enum class EdgeKind { AcLine, RectTransformer, InvTransformer, DcLine };

/// Heterogeneous solution graph: one node per AC bus plus a rectifier and an
/// inverter terminal node per dc link; edges are the in-service AC branches,
/// the two converter transformers, and the dc line of each link.
///
/// Edges carry a stable column id assigned on the full branch list (tripped
/// branches keep their id reserved), so parameter matrices indexed by column
/// id stay valid when the working topology loses a branch.
struct GraphTopology {
  struct Node {
    NodeKind kind;
    int bus_index = -1;   // AC nodes
    int link_index = -1;  // converter terminal nodes
  };
  struct Edge {
    int a = 0, b = 0;  // node indices
    EdgeKind kind;
    int source = -1;  // branch index or link index in the case
    int col = 0;       // stable column id
  };

  int n_nodes = 0;
  int n_edge_cols = 0;  // full column space, includes tripped branches
  std::vector<Node> nodes;
  std::vector<Edge> edges;

  int n_edges() const { return int(edges.size()); }
};

inline GraphTopology build_graph(const NetworkCase& c) {
  GraphTopology t;
  const int n_bus = int(c.n_buses());
  const int n_link = int(c.dc_links.size());
  t.n_nodes = n_bus + 2 * n_link;
  t.n_edge_cols = int(c.branches.size()) + 3 * n_link;

  t.nodes.resize(size_t(t.n_nodes));
  for (int i = 0; i < n_bus; ++i) {
    NodeKind k = NodeKind::AcPq;
    switch (c.buses[size_t(i)].kind) {
      case BusKind::PQ: k = NodeKind::AcPq; break;
      case BusKind::PV: k = NodeKind::AcPv; break;
      case BusKind::Slack: k = NodeKind::AcSlack; break;
      case BusKind::PCC: k = NodeKind::AcPcc; break;
    }
    t.nodes[size_t(i)] = {k, i, -1};
  }
  for (int l = 0; l < n_link; ++l) {
    t.nodes[size_t(n_bus + 2 * l)] = {NodeKind::RectTerm, -1, l};
    t.nodes[size_t(n_bus + 2 * l + 1)] = {NodeKind::InvTerm, -1, l};
  }

  for (size_t bi = 0; bi < c.branches.size(); ++bi) {
    const auto& br = c.branches[bi];
    if (!br.closed()) continue;
    t.edges.push_back({c.bus_index(br.from_bus), c.bus_index(br.to_bus),
                       EdgeKind::AcLine, int(bi), int(bi)});
  }
  const int base = int(c.branches.size());
  for (int l = 0; l < n_link; ++l) {
    const auto& link = c.dc_links[size_t(l)];
    int rect = n_bus + 2 * l, inv = n_bus + 2 * l + 1;
    t.edges.push_back({c.bus_index(link.rect_pcc), rect, EdgeKind::RectTransformer, l,
                       base + 3 * l});
    t.edges.push_back({c.bus_index(link.inv_pcc), inv, EdgeKind::InvTransformer, l,
                       base + 3 * l + 1});
    t.edges.push_back({rect, inv, EdgeKind::DcLine, l, base + 3 * l + 2});
  }
  return t;
}

inline uint64_t topology_hash(const GraphTopology& t) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ull;
  };
  mix(uint64_t(t.n_nodes));
  mix(uint64_t(t.n_edge_cols));
  for (const auto& e : t.edges) {
    mix(uint64_t(e.a));
    mix(uint64_t(e.b));
    mix(uint64_t(e.col));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Input features
// ---------------------------------------------------------------------------

/// Per-node and per-edge input channels for one control mode. Node rows
/// follow graph node order; edge rows follow graph edge order.
struct GraphFeatures {
  Eigen::MatrixXd x_node;  // n_nodes x 2
  Eigen::MatrixXd x_edge;  // n_edges x 2
};

inline GraphFeatures build_features(const NetworkCase& c, const GraphTopology& t,
                                    ControlMode mode) {
  GraphFeatures f;
  f.x_node.setZero(t.n_nodes, 2);
  f.x_edge.setZero(t.n_edges(), 2);

  for (int i = 0; i < t.n_nodes; ++i) {
    const auto& nd = t.nodes[size_t(i)];
    switch (nd.kind) {
      case NodeKind::AcPq:
      case NodeKind::AcPcc: {
        const auto& b = c.buses[size_t(nd.bus_index)];
        f.x_node(i, 0) = b.p_inj();
        f.x_node(i, 1) = b.q_inj();
        break;
      }
      case NodeKind::AcPv:
      case NodeKind::AcSlack: {
        const auto& b = c.buses[size_t(nd.bus_index)];
        f.x_node(i, 0) = b.p_inj();
        f.x_node(i, 1) = *b.v_ref;
        break;
      }
      case NodeKind::RectTerm: {
        const auto& l = c.dc_links[size_t(nd.link_index)];
        double i_ref = mode == ControlMode::Mode1 ? l.i_ref_re.value_or(0)
                                                  : l.i_ref_iv.value_or(0);
        f.x_node(i, 0) = l.alpha_min;
        f.x_node(i, 1) = l.x_c_re * i_ref;
        break;
      }
      case NodeKind::InvTerm: {
        const auto& l = c.dc_links[size_t(nd.link_index)];
        f.x_node(i, 0) = l.gamma_min;
        f.x_node(i, 1) = mode == ControlMode::Mode1
                             ? l.v_ref_iv.value_or(0)
                             : l.x_c_iv * l.i_ref_iv.value_or(0);
        break;
      }
    }
  }

  for (int e = 0; e < t.n_edges(); ++e) {
    const auto& ed = t.edges[size_t(e)];
    switch (ed.kind) {
      case EdgeKind::AcLine: {
        const auto& br = c.branches[size_t(ed.source)];
        f.x_edge(e, 0) = br.g_series;
        f.x_edge(e, 1) = br.b_series;
        break;
      }
      case EdgeKind::RectTransformer:
      case EdgeKind::InvTransformer: {
        const auto& l = c.dc_links[size_t(ed.source)];
        f.x_edge(e, 0) = l.k_min;
        f.x_edge(e, 1) = l.k_max;
        break;
      }
      case EdgeKind::DcLine: {
        const auto& l = c.dc_links[size_t(ed.source)];
        f.x_edge(e, 0) = l.r_dc;
        f.x_edge(e, 1) = mode == ControlMode::Mode1 ? l.i_ref_re.value_or(0)
                                                    : l.i_ref_iv.value_or(0);
        break;
      }
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Spectral machinery
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd laplacian(const GraphTopology& t) {
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(t.n_nodes, t.n_nodes);
  for (const auto& e : t.edges) {
    lap(e.a, e.a) += 1;
    lap(e.b, e.b) += 1;
    lap(e.a, e.b) -= 1;
    lap(e.b, e.a) -= 1;
  }
  return lap;
}

/// Largest eigenvalue by power iteration with a deterministic start vector.
inline double spectral_radius(const Eigen::MatrixXd& m, double rel_tol = 1e-10,
                              int max_steps = 10000) {
  const int n = int(m.rows());
  if (n == 0) throw DomainError("spectral_radius: empty matrix");
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x(i) = 1.0 + 1e-3 * double(i % 7) + 1e-4 * double(i);
  x.normalize();
  double prev = 0;
  for (int s = 0; s < max_steps; ++s) {
    Eigen::VectorXd y = m * x;
    double norm = y.norm();
    if (norm < 1e-300) return 0.0;
    x = y / norm;
    double val = x.dot(m * x);
    if (s > 0 && std::abs(val - prev) <= rel_tol * std::max(1.0, std::abs(val)))
      return val;
    prev = val;
  }
  return prev;
}

/// Rescales the Laplacian so its spectrum lands in [-1, 1].
inline Eigen::MatrixXd scale_laplacian(const Eigen::MatrixXd& lap) {
  double zeta = spectral_radius(lap);
  if (zeta < 1e-12) zeta = 1e-12;
  return 2.0 / zeta * lap -
         Eigen::MatrixXd::Identity(lap.rows(), lap.cols());
}

/// T_0..T_order of the matrix Chebyshev recurrence
/// T_{j+1} = 2 L T_j - T_{j-1}, T_0 = I, T_1 = L.
inline std::vector<Eigen::MatrixXd> chebyshev_basis(const Eigen::MatrixXd& l_hat,
                                                    int order) {
  if (order < 0) throw DomainError("chebyshev_basis: order must be >= 0");
  std::vector<Eigen::MatrixXd> basis;
  basis.reserve(size_t(order) + 1);
  basis.push_back(Eigen::MatrixXd::Identity(l_hat.rows(), l_hat.cols()));
  if (order >= 1) basis.push_back(l_hat);
  for (int j = 2; j <= order; ++j)
    basis.push_back(2.0 * l_hat * basis[size_t(j - 1)] - basis[size_t(j - 2)]);
  return basis;
}

/// Memoizes scaled Laplacians and Chebyshev stacks per topology.
class BasisCache {
 public:
  const std::vector<Eigen::MatrixXd>& get(const GraphTopology& t, int order) {
    auto key = std::make_pair(topology_hash(t), order);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto basis = chebyshev_basis(scale_laplacian(laplacian(t)), order);
    return cache_.emplace(key, std::move(basis)).first->second;
  }

 private:
  std::map<std::pair<uint64_t, int>, std::vector<Eigen::MatrixXd>> cache_;
};

}  // namespace gridflow
