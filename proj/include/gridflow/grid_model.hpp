#pragma once
#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/errors.hpp"

namespace gridflow {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

enum class BusKind { PQ, PV, Slack, PCC };
enum class BranchStatus { Closed, Tripped };
enum class ControlMode { Mode1 = 1, Mode2 = 2 };

inline std::string to_string(BusKind k) {
  switch (k) {
    case BusKind::PQ: return "PQ";
    case BusKind::PV: return "PV";
    case BusKind::Slack: return "Slack";
    case BusKind::PCC: return "PCC";
  }
  return "?";
}

struct Bus {
  int id = 0;
  BusKind kind = BusKind::PQ;
  double p_gen = 0, p_load = 0, q_gen = 0, q_load = 0;  // per-unit on base_mva
  std::optional<double> v_ref;                          // PV/Slack only

  double p_inj() const { return p_gen - p_load; }
  double q_inj() const { return q_gen - q_load; }
};

struct AcBranch {
  int from_bus = 0, to_bus = 0;
  double g_series = 0, b_series = 0;  // per-unit series admittance
  BranchStatus status = BranchStatus::Closed;

  bool closed() const { return status == BranchStatus::Closed; }
  bool joins(int a, int b) const {
    return (from_bus == a && to_bus == b) || (from_bus == b && to_bus == a);
  }
};

struct DcLink {
  int rect_pcc = 0, inv_pcc = 0;
  double r_dc = 0;
  double x_c_re = 0, x_c_iv = 0;      // commutation reactances
  double k_min = 0, k_max = 0;        // tap bounds, both sides
  double alpha_min = 0, gamma_min = 0;  // radians
  std::optional<double> i_ref_re, i_ref_iv, v_ref_iv;
  ControlMode mode = ControlMode::Mode1;
};

struct RenewableSite {
  int bus = 0;
  double rated = 0;  // per-unit
};

struct HydroSite {
  int bus = 0;
  double rated = 0;  // per-unit
};

/// Immutable problem statement: buses, AC branches, DC links, per-unit bases.
/// All quantities are per-unit on base_mva; angles in radians.
struct NetworkCase {
  double base_mva = 100.0;
  std::vector<Bus> buses;  // sorted ascending by id
  std::vector<AcBranch> branches;
  std::vector<DcLink> dc_links;

  // scenario metadata (optional, drives the sampling harness)
  std::vector<RenewableSite> renewables;
  std::optional<HydroSite> hydro;

  int bus_index(int id) const {
    auto it = std::lower_bound(buses.begin(), buses.end(), id,
                               [](const Bus& b, int v) { return b.id < v; });
    if (it == buses.end() || it->id != id)
      throw NotFoundError("unknown bus id " + std::to_string(id));
    return int(it - buses.begin());
  }

  const Bus& bus(int id) const { return buses[size_t(bus_index(id))]; }

  int slack_index() const {
    for (size_t i = 0; i < buses.size(); ++i)
      if (buses[i].kind == BusKind::Slack) return int(i);
    throw ValidationError("case has no slack bus");
  }

  size_t n_buses() const { return buses.size(); }

  size_t n_closed_branches() const {
    size_t n = 0;
    for (const auto& br : branches)
      if (br.closed()) ++n;
    return n;
  }
};

inline double to_per_unit(double value_physical, double base_mva) {
  if (base_mva <= 0)
    throw DomainError("base_mva must be positive, got " + std::to_string(base_mva));
  return value_physical / base_mva;
}

namespace detail {

inline bool ac_graph_connected(const NetworkCase& c) {
  const size_t n = c.buses.size();
  if (n == 0) return true;
  std::vector<std::vector<int>> adj(n);
  for (const auto& br : c.branches) {
    if (!br.closed()) continue;
    int a = c.bus_index(br.from_bus), b = c.bus_index(br.to_bus);
    adj[size_t(a)].push_back(b);
    adj[size_t(b)].push_back(a);
  }
  std::vector<char> seen(n, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  size_t reached = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : adj[size_t(u)])
      if (!seen[size_t(v)]) {
        seen[size_t(v)] = 1;
        ++reached;
        q.push(v);
      }
  }
  return reached == n;
}

}  // namespace detail

inline void validate(const NetworkCase& c) {
  if (c.base_mva <= 0) throw ValidationError("base_mva must be positive");
  if (c.buses.empty()) throw ValidationError("case has no buses");

  for (size_t i = 1; i < c.buses.size(); ++i)
    if (c.buses[i - 1].id >= c.buses[i].id)
      throw ValidationError("bus ids must be unique (duplicate id " +
                            std::to_string(c.buses[i].id) + ")");

  int n_slack = 0;
  for (const auto& b : c.buses) {
    bool needs_vref = b.kind == BusKind::PV || b.kind == BusKind::Slack;
    if (needs_vref && !b.v_ref)
      throw ValidationError("bus " + std::to_string(b.id) + " (" + to_string(b.kind) +
                            ") is missing v_ref");
    if (!needs_vref && b.v_ref)
      throw ValidationError("bus " + std::to_string(b.id) + " (" + to_string(b.kind) +
                            ") must not carry v_ref");
    if (b.v_ref && *b.v_ref <= 0)
      throw ValidationError("bus " + std::to_string(b.id) + " has non-positive v_ref");
    if (b.kind == BusKind::Slack) ++n_slack;
  }
  if (n_slack != 1)
    throw ValidationError("case must have exactly one slack bus, found " +
                          std::to_string(n_slack));

  for (size_t i = 0; i < c.branches.size(); ++i) {
    const auto& br = c.branches[i];
    if (br.from_bus == br.to_bus)
      throw ValidationError("branch " + std::to_string(i) + " is a self-loop at bus " +
                            std::to_string(br.from_bus));
    c.bus_index(br.from_bus);  // throws NotFoundError on dangling endpoint
    c.bus_index(br.to_bus);
    for (size_t j = i + 1; j < c.branches.size(); ++j)
      if (c.branches[j].joins(br.from_bus, br.to_bus))
        throw ValidationError("duplicate branch between buses " +
                              std::to_string(br.from_bus) + " and " +
                              std::to_string(br.to_bus));
  }

  std::vector<int> pcc_link_count(c.buses.size(), 0);
  for (const auto& l : c.dc_links) {
    int re = c.bus_index(l.rect_pcc), iv = c.bus_index(l.inv_pcc);
    if (re == iv) throw ValidationError("dc link endpoints coincide");
    if (c.buses[size_t(re)].kind != BusKind::PCC)
      throw ValidationError("dc link rectifier bus " + std::to_string(l.rect_pcc) +
                            " is not a PCC bus");
    if (c.buses[size_t(iv)].kind != BusKind::PCC)
      throw ValidationError("dc link inverter bus " + std::to_string(l.inv_pcc) +
                            " is not a PCC bus");
    ++pcc_link_count[size_t(re)];
    ++pcc_link_count[size_t(iv)];
    if (l.r_dc <= 0) throw ValidationError("dc link r_dc must be positive");
    if (l.x_c_re < 0 || l.x_c_iv < 0)
      throw ValidationError("dc link commutation reactances must be non-negative");
    if (!(l.k_min < l.k_max)) throw ValidationError("dc link requires k_min < k_max");
    if (l.k_min <= 0) throw ValidationError("dc link requires k_min > 0");
    if (!(l.alpha_min > 0 && l.alpha_min < kPi / 2))
      throw ValidationError("alpha_min must lie in (0, pi/2)");
    if (!(l.gamma_min > 0 && l.gamma_min < kPi / 2))
      throw ValidationError("gamma_min must lie in (0, pi/2)");
    if (l.mode == ControlMode::Mode1) {
      if (!l.i_ref_re || !l.v_ref_iv)
        throw ValidationError("mode 1 dc link requires i_ref_re and v_ref_iv");
    } else {
      if (!l.i_ref_iv) throw ValidationError("mode 2 dc link requires i_ref_iv");
    }
    if (l.i_ref_re && *l.i_ref_re <= 0)
      throw ValidationError("i_ref_re must be positive");
    if (l.i_ref_iv && *l.i_ref_iv <= 0)
      throw ValidationError("i_ref_iv must be positive");
    if (l.v_ref_iv && *l.v_ref_iv <= 0)
      throw ValidationError("v_ref_iv must be positive");
  }

  for (size_t i = 0; i < c.buses.size(); ++i) {
    const auto& b = c.buses[i];
    bool has_ac = false;
    for (const auto& br : c.branches)
      if (br.from_bus == b.id || br.to_bus == b.id) has_ac = true;
    if (!has_ac)
      throw ValidationError("bus " + std::to_string(b.id) + " has no AC branch");
    if (b.kind == BusKind::PCC && pcc_link_count[i] == 0)
      throw ValidationError("PCC bus " + std::to_string(b.id) +
                            " has no DC link attached");
  }

  for (const auto& s : c.renewables) c.bus_index(s.bus);
  if (c.hydro) c.bus_index(c.hydro->bus);

  if (!detail::ac_graph_connected(c))
    throw ValidationError("AC graph (closed branches) is disconnected");
}

/// Returns a copy of the case with branch (from,to) tripped. The input is
/// untouched; connectivity of the result is re-validated.
inline NetworkCase apply_topology_change(const NetworkCase& c, int from, int to) {
  NetworkCase out = c;
  auto it = std::find_if(out.branches.begin(), out.branches.end(),
                         [&](const AcBranch& br) { return br.joins(from, to); });
  if (it == out.branches.end())
    throw NotFoundError("no branch between buses " + std::to_string(from) + " and " +
                        std::to_string(to));
  if (!it->closed())
    throw NotFoundError("branch " + std::to_string(from) + "-" + std::to_string(to) +
                        " is already tripped");
  it->status = BranchStatus::Tripped;
  if (!detail::ac_graph_connected(out))
    throw DisconnectionError("tripping branch " + std::to_string(from) + "-" +
                             std::to_string(to) + " splits the AC graph");
  return out;
}

// ---------------------------------------------------------------------------
// JSON case files
// ---------------------------------------------------------------------------

namespace detail {

inline double require_num(const nlohmann::json& j, const char* key,
                          const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_number())
    throw ParseError(ctx + ": missing numeric field '" + key + "'");
  return j[key].get<double>();
}

inline int require_int(const nlohmann::json& j, const char* key,
                       const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_number_integer())
    throw ParseError(ctx + ": missing integer field '" + key + "'");
  return j[key].get<int>();
}

}  // namespace detail

inline NetworkCase parse_case(const nlohmann::json& j) {
  using detail::require_int;
  using detail::require_num;
  NetworkCase c;
  c.base_mva = require_num(j, "base_mva", "case");
  if (!j.contains("buses") || !j["buses"].is_array())
    throw ParseError("case: 'buses' array required");
  for (const auto& jb : j["buses"]) {
    Bus b;
    b.id = require_int(jb, "id", "bus");
    std::string kind = jb.value("kind", "");
    if (kind == "PQ") b.kind = BusKind::PQ;
    else if (kind == "PV") b.kind = BusKind::PV;
    else if (kind == "Slack") b.kind = BusKind::Slack;
    else if (kind == "PCC") b.kind = BusKind::PCC;
    else throw ParseError("bus " + std::to_string(b.id) + ": bad kind '" + kind + "'");
    b.p_gen = jb.value("p_gen", 0.0);
    b.p_load = jb.value("p_load", 0.0);
    b.q_gen = jb.value("q_gen", 0.0);
    b.q_load = jb.value("q_load", 0.0);
    if (jb.contains("v_ref")) b.v_ref = jb["v_ref"].get<double>();
    c.buses.push_back(b);
  }
  std::sort(c.buses.begin(), c.buses.end(),
            [](const Bus& a, const Bus& b) { return a.id < b.id; });

  if (j.contains("branches")) {
    for (const auto& jb : j["branches"]) {
      AcBranch br;
      br.from_bus = require_int(jb, "from", "branch");
      br.to_bus = require_int(jb, "to", "branch");
      std::string ctx = "branch " + std::to_string(br.from_bus) + "-" +
                        std::to_string(br.to_bus);
      if (jb.contains("g") || jb.contains("b")) {
        br.g_series = require_num(jb, "g", ctx);
        br.b_series = require_num(jb, "b", ctx);
      } else {
        double r = require_num(jb, "r", ctx);
        double x = require_num(jb, "x", ctx);
        double z2 = r * r + x * x;
        if (z2 <= 0) throw ParseError(ctx + ": zero impedance");
        br.g_series = r / z2;
        br.b_series = -x / z2;
      }
      std::string st = jb.value("status", "closed");
      if (st == "closed") br.status = BranchStatus::Closed;
      else if (st == "tripped") br.status = BranchStatus::Tripped;
      else throw ParseError(ctx + ": bad status '" + st + "'");
      c.branches.push_back(br);
    }
  }

  if (j.contains("dc_links")) {
    for (const auto& jl : j["dc_links"]) {
      DcLink l;
      l.rect_pcc = require_int(jl, "rect_pcc", "dc_link");
      l.inv_pcc = require_int(jl, "inv_pcc", "dc_link");
      std::string ctx = "dc_link " + std::to_string(l.rect_pcc) + "-" +
                        std::to_string(l.inv_pcc);
      l.r_dc = require_num(jl, "r_dc", ctx);
      l.x_c_re = require_num(jl, "x_c_re", ctx);
      l.x_c_iv = require_num(jl, "x_c_iv", ctx);
      l.k_min = require_num(jl, "k_min", ctx);
      l.k_max = require_num(jl, "k_max", ctx);
      l.alpha_min = deg2rad(require_num(jl, "alpha_min_deg", ctx));
      l.gamma_min = deg2rad(require_num(jl, "gamma_min_deg", ctx));
      int mode = require_int(jl, "mode", ctx);
      if (mode == 1) l.mode = ControlMode::Mode1;
      else if (mode == 2) l.mode = ControlMode::Mode2;
      else throw ParseError(ctx + ": mode must be 1 or 2");
      if (jl.contains("i_ref_re")) l.i_ref_re = jl["i_ref_re"].get<double>();
      if (jl.contains("i_ref_iv")) l.i_ref_iv = jl["i_ref_iv"].get<double>();
      if (jl.contains("v_ref_iv")) l.v_ref_iv = jl["v_ref_iv"].get<double>();
      c.dc_links.push_back(l);
    }
  }

  if (j.contains("renewables")) {
    for (const auto& jr : j["renewables"]) {
      RenewableSite s;
      s.bus = require_int(jr, "bus", "renewable");
      s.rated = to_per_unit(require_num(jr, "rated_mw", "renewable"), c.base_mva);
      c.renewables.push_back(s);
    }
  }
  if (j.contains("hydro")) {
    HydroSite h;
    h.bus = require_int(j["hydro"], "bus", "hydro");
    h.rated = to_per_unit(require_num(j["hydro"], "rated_mw", "hydro"), c.base_mva);
    c.hydro = h;
  }

  validate(c);
  return c;
}

inline NetworkCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open case file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed JSON in " + path + ": " + e.what());
  }
  return parse_case(j);
}

inline nlohmann::json case_to_json(const NetworkCase& c) {
  nlohmann::json j;
  j["base_mva"] = c.base_mva;
  j["buses"] = nlohmann::json::array();
  for (const auto& b : c.buses) {
    nlohmann::json jb{{"id", b.id},     {"kind", to_string(b.kind)},
                      {"p_gen", b.p_gen}, {"p_load", b.p_load},
                      {"q_gen", b.q_gen}, {"q_load", b.q_load}};
    if (b.v_ref) jb["v_ref"] = *b.v_ref;
    j["buses"].push_back(jb);
  }
  j["branches"] = nlohmann::json::array();
  for (const auto& br : c.branches) {
    j["branches"].push_back(
        {{"from", br.from_bus},
         {"to", br.to_bus},
         {"g", br.g_series},
         {"b", br.b_series},
         {"status", br.closed() ? "closed" : "tripped"}});
  }
  j["dc_links"] = nlohmann::json::array();
  for (const auto& l : c.dc_links) {
    nlohmann::json jl{{"rect_pcc", l.rect_pcc},
                      {"inv_pcc", l.inv_pcc},
                      {"r_dc", l.r_dc},
                      {"x_c_re", l.x_c_re},
                      {"x_c_iv", l.x_c_iv},
                      {"k_min", l.k_min},
                      {"k_max", l.k_max},
                      {"alpha_min_deg", rad2deg(l.alpha_min)},
                      {"gamma_min_deg", rad2deg(l.gamma_min)},
                      {"mode", l.mode == ControlMode::Mode1 ? 1 : 2}};
    if (l.i_ref_re) jl["i_ref_re"] = *l.i_ref_re;
    if (l.i_ref_iv) jl["i_ref_iv"] = *l.i_ref_iv;
    if (l.v_ref_iv) jl["v_ref_iv"] = *l.v_ref_iv;
    j["dc_links"].push_back(jl);
  }
  if (!c.renewables.empty()) {
    j["renewables"] = nlohmann::json::array();
    for (const auto& s : c.renewables)
      j["renewables"].push_back({{"bus", s.bus}, {"rated_mw", s.rated * c.base_mva}});
  }
  if (c.hydro)
    j["hydro"] = {{"bus", c.hydro->bus}, {"rated_mw", c.hydro->rated * c.base_mva}};
  return j;
}

inline bool operator==(const Bus& a, const Bus& b) {
  return a.id == b.id && a.kind == b.kind && a.p_gen == b.p_gen &&
         a.p_load == b.p_load && a.q_gen == b.q_gen && a.q_load == b.q_load &&
         a.v_ref == b.v_ref;
}
inline bool operator==(const AcBranch& a, const AcBranch& b) {
  return a.from_bus == b.from_bus && a.to_bus == b.to_bus &&
         a.g_series == b.g_series && a.b_series == b.b_series && a.status == b.status;
}
inline bool operator==(const DcLink& a, const DcLink& b) {
  return a.rect_pcc == b.rect_pcc && a.inv_pcc == b.inv_pcc && a.r_dc == b.r_dc &&
         a.x_c_re == b.x_c_re && a.x_c_iv == b.x_c_iv && a.k_min == b.k_min &&
         a.k_max == b.k_max && a.alpha_min == b.alpha_min &&
         a.gamma_min == b.gamma_min && a.i_ref_re == b.i_ref_re &&
         a.i_ref_iv == b.i_ref_iv && a.v_ref_iv == b.v_ref_iv && a.mode == b.mode;
}
inline bool operator==(const RenewableSite& a, const RenewableSite& b) {
  return a.bus == b.bus && a.rated == b.rated;
}
inline bool operator==(const HydroSite& a, const HydroSite& b) {
  return a.bus == b.bus && a.rated == b.rated;
}
inline bool operator==(const NetworkCase& a, const NetworkCase& b) {
  return a.base_mva == b.base_mva && a.buses == b.buses && a.branches == b.branches &&
         a.dc_links == b.dc_links && a.renewables == b.renewables && a.hydro == b.hydro;
}

}  // namespace gridflow
