#pragma once
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gridflow/errors.hpp"

namespace gridflow::ad {

enum class Op {
  Input, Const,
  Add, Sub, Mul, Div, MatMul, ScalarMul,
  Sin, Cos, Sqrt, Square, Arccos, Tanh, Relu, Exp, Log, Softplus, Logistic,
  ClampMin,
  Sum, Mean, L1Norm, L2NormSq,
  ConcatRows, ConcatCols, SliceRows, SliceCols,
  WideToTall, TallToWide,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::MatMul: return "matmul";
    case Op::ScalarMul: return "scalar-mul";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sqrt: return "sqrt";
    case Op::Square: return "square";
    case Op::Arccos: return "arccos";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Logistic: return "logistic";
    case Op::ClampMin: return "clamp-min";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::L1Norm: return "l1-norm";
    case Op::L2NormSq: return "l2-norm-squared";
    case Op::ConcatRows: return "concat-rows";
    case Op::ConcatCols: return "concat-cols";
    case Op::SliceRows: return "slice-rows";
    case Op::SliceCols: return "slice-cols";
    case Op::WideToTall: return "wide-to-tall";
    case Op::TallToWide: return "tall-to-wide";
  }
  return "?";
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
};

/// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
/// order; recompute() re-runs the whole graph in place after leaf updates so
/// a fixed training graph can be driven without reallocation.
class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> in;
    double scalar = 0;  // ScalarMul factor / ClampMin floor
    int i0 = 0, i1 = 0;  // slice offsets-lengths / reshape block count
    Eigen::MatrixXd value;
    Eigen::MatrixXd adj;
    bool adj_live = false;
  };

  Var input(const Eigen::MatrixXd& v) {
    Var out = push(Op::Input, {}, v);
    check_finite(node(out), out.idx);
    return out;
  }
  Var constant(const Eigen::MatrixXd& v) {
    Var out = push(Op::Const, {}, v);
    check_finite(node(out), out.idx);
    return out;
  }
  Var constant(double s) {
    return constant(Eigen::MatrixXd::Constant(1, 1, s));
  }

  const Eigen::MatrixXd& value(Var v) const { return node(v).value; }

  const Eigen::MatrixXd& grad(Var v) const {
    const Node& n = node(v);
    if (!n.adj_live)
      throw Error("grad unavailable: run backward first (node " +
                  std::to_string(v.idx) + ")");
    return n.adj;
  }

  void set_input(Var v, const Eigen::MatrixXd& m) {
    Node& n = node(v);
    if (n.op != Op::Input && n.op != Op::Const)
      throw Error("set_input on a non-leaf node");
    if (n.value.rows() != m.rows() || n.value.cols() != m.cols())
      throw ShapeMismatchError("set_input shape changed");
    n.value = m;
    stale_ = true;
  }

  /// Re-evaluates every non-leaf node from current leaf values.
  void recompute() {
    for (int i = 0; i < int(nodes_.size()); ++i) {
      Node& n = nodes_[size_t(i)];
      if (n.op != Op::Input && n.op != Op::Const) eval(n);
      check_finite(n, i);
    }
    consumed_ = false;
    stale_ = false;
  }

  void backward(Var loss) {
    if (consumed_)
      throw TapeConsumedError("backward already ran; recompute() before reusing");
    if (stale_) throw Error("leaf values changed; recompute() before backward");
    Node& top = node(loss);
    if (top.value.rows() != 1 || top.value.cols() != 1)
      throw NotScalarError("backward target must be 1x1, got " +
                           std::to_string(top.value.rows()) + "x" +
                           std::to_string(top.value.cols()));
    for (auto& n : nodes_) n.adj_live = false;
    seed_adj(top).setOnes();
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.adj_live || n.op == Op::Input || n.op == Op::Const) continue;
      pull(n);
    }
    consumed_ = true;
  }

  size_t size() const { return nodes_.size(); }

  // --- graph builders -----------------------------------------------------

  Var add(Var a, Var b) { return ew(Op::Add, a, b); }
  Var sub(Var a, Var b) { return ew(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return ew(Op::Mul, a, b); }
  Var div(Var a, Var b) { return ew(Op::Div, a, b); }

  Var matmul(Var a, Var b) {
    if (node(a).value.cols() != node(b).value.rows())
      throw ShapeMismatchError(shape_msg("matmul", a, b));
    Var v = push(Op::MatMul, {a.idx, b.idx},
                 Eigen::MatrixXd(node(a).value.rows(), node(b).value.cols()));
    return finish(v);
  }

  Var scalar_mul(double s, Var a) {
    Var v = push(Op::ScalarMul, {a.idx},
                 Eigen::MatrixXd(node(a).value.rows(), node(a).value.cols()));
    node(v).scalar = s;
    return finish(v);
  }

  Var sin(Var a) { return unary(Op::Sin, a); }
  Var cos(Var a) { return unary(Op::Cos, a); }
  Var sqrt(Var a) { return unary(Op::Sqrt, a); }
  Var square(Var a) { return unary(Op::Square, a); }
  Var arccos(Var a) { return unary(Op::Arccos, a); }
  Var tanh(Var a) { return unary(Op::Tanh, a); }
  Var relu(Var a) { return unary(Op::Relu, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var softplus(Var a) { return unary(Op::Softplus, a); }
  Var logistic(Var a) { return unary(Op::Logistic, a); }

  Var clamp_min(Var a, double floor) {
    Var v = push(Op::ClampMin, {a.idx},
                 Eigen::MatrixXd(node(a).value.rows(), node(a).value.cols()));
    node(v).scalar = floor;
    return finish(v);
  }

  Var sum(Var a) { return reduce(Op::Sum, a); }
  Var mean(Var a) { return reduce(Op::Mean, a); }
  Var l1_norm(Var a) { return reduce(Op::L1Norm, a); }
  Var l2_norm_sq(Var a) { return reduce(Op::L2NormSq, a); }

  Var abs(Var a) { return add(relu(a), relu(scalar_mul(-1.0, a))); }

  Var concat_rows(const std::vector<Var>& parts) { return concat(parts, true); }
  Var concat_cols(const std::vector<Var>& parts) { return concat(parts, false); }

  Var slice_rows(Var a, int r0, int nr) {
    if (r0 < 0 || nr <= 0 || r0 + nr > node(a).value.rows())
      throw ShapeMismatchError("slice-rows out of range");
    Var v = push(Op::SliceRows, {a.idx}, Eigen::MatrixXd(nr, node(a).value.cols()));
    node(v).i0 = r0;
    node(v).i1 = nr;
    return finish(v);
  }

  Var slice_cols(Var a, int c0, int nc) {
    if (c0 < 0 || nc <= 0 || c0 + nc > node(a).value.cols())
      throw ShapeMismatchError("slice-cols out of range");
    Var v = push(Op::SliceCols, {a.idx}, Eigen::MatrixXd(node(a).value.rows(), nc));
    node(v).i0 = c0;
    node(v).i1 = nc;
    return finish(v);
  }

  /// (n x c*B) with per-sample column blocks -> (B*n x c) with row blocks.
  Var wide_to_tall(Var a, int blocks) {
    const auto& m = node(a).value;
    if (blocks <= 0 || m.cols() % blocks != 0)
      throw ShapeMismatchError("wide-to-tall: column count not divisible");
    Var v = push(Op::WideToTall, {a.idx},
                 Eigen::MatrixXd(m.rows() * blocks, m.cols() / blocks));
    node(v).i0 = blocks;
    return finish(v);
  }

  /// Inverse layout change of wide_to_tall.
  Var tall_to_wide(Var a, int blocks) {
    const auto& m = node(a).value;
    if (blocks <= 0 || m.rows() % blocks != 0)
      throw ShapeMismatchError("tall-to-wide: row count not divisible");
    Var v = push(Op::TallToWide, {a.idx},
                 Eigen::MatrixXd(m.rows() / blocks, m.cols() * blocks));
    node(v).i0 = blocks;
    return finish(v);
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool stale_ = false;

  Node& node(Var v) { return nodes_.at(size_t(v.idx)); }
  const Node& node(Var v) const { return nodes_.at(size_t(v.idx)); }

  std::string shape_msg(const char* what, Var a, Var b) {
    auto dim = [this](Var v) {
      return std::to_string(node(v).value.rows()) + "x" +
             std::to_string(node(v).value.cols());
    };
    return std::string(what) + ": incompatible shapes " + dim(a) + " and " + dim(b);
  }

  Var push(Op op, std::vector<int> in, const Eigen::MatrixXd& v) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.value = v;
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
  }

  Var finish(Var v) {
    eval(node(v));
    check_finite(node(v), v.idx);
    return v;
  }

  Var ew(Op op, Var a, Var b) {
    if (node(a).value.rows() != node(b).value.rows() ||
        node(a).value.cols() != node(b).value.cols())
      throw ShapeMismatchError(shape_msg(op_name(op), a, b));
    return finish(push(op, {a.idx, b.idx},
                       Eigen::MatrixXd(node(a).value.rows(), node(a).value.cols())));
  }

  Var unary(Op op, Var a) {
    return finish(push(
        op, {a.idx}, Eigen::MatrixXd(node(a).value.rows(), node(a).value.cols())));
  }

  Var reduce(Op op, Var a) {
    return finish(push(op, {a.idx}, Eigen::MatrixXd(1, 1)));
  }

  Var concat(const std::vector<Var>& parts, bool rows) {
    if (parts.empty()) throw ShapeMismatchError("concat of nothing");
    long r = node(parts[0]).value.rows(), c = node(parts[0]).value.cols();
    long total = rows ? r : c;
    for (size_t i = 1; i < parts.size(); ++i) {
      const auto& m = node(parts[i]).value;
      if (rows ? m.cols() != c : m.rows() != r)
        throw ShapeMismatchError(shape_msg("concat", parts[0], parts[i]));
      total += rows ? m.rows() : m.cols();
    }
    std::vector<int> in;
    for (Var p : parts) in.push_back(p.idx);
    return finish(push(rows ? Op::ConcatRows : Op::ConcatCols, std::move(in),
                       rows ? Eigen::MatrixXd(total, c) : Eigen::MatrixXd(r, total)));
  }

  Eigen::MatrixXd& seed_adj(Node& n) {
    n.adj.setZero(n.value.rows(), n.value.cols());
    n.adj_live = true;
    return n.adj;
  }

  Eigen::MatrixXd& adj_of(int idx) {
    Node& n = nodes_[size_t(idx)];
    if (!n.adj_live) {
      n.adj.setZero(n.value.rows(), n.value.cols());
      n.adj_live = true;
    }
    return n.adj;
  }

  void check_finite(const Node& n, int idx) const {
    if (!n.value.allFinite())
      throw NonFiniteError(std::string("non-finite value out of op '") +
                           op_name(n.op) + "' at tape index " + std::to_string(idx));
  }

  const Eigen::MatrixXd& in_val(const Node& n, size_t k) const {
    return nodes_[size_t(n.in[k])].value;
  }

  void eval(Node& n) {
    switch (n.op) {
      case Op::Input:
      case Op::Const:
        break;
      case Op::Add: n.value = in_val(n, 0) + in_val(n, 1); break;
      case Op::Sub: n.value = in_val(n, 0) - in_val(n, 1); break;
      case Op::Mul: n.value = in_val(n, 0).cwiseProduct(in_val(n, 1)); break;
      case Op::Div: n.value = in_val(n, 0).cwiseQuotient(in_val(n, 1)); break;
      case Op::MatMul: n.value.noalias() = in_val(n, 0) * in_val(n, 1); break;
      case Op::ScalarMul: n.value = n.scalar * in_val(n, 0); break;
      case Op::Sin: n.value = in_val(n, 0).array().sin(); break;
      case Op::Cos: n.value = in_val(n, 0).array().cos(); break;
      case Op::Sqrt: n.value = in_val(n, 0).array().sqrt(); break;
      case Op::Square: n.value = in_val(n, 0).array().square(); break;
      case Op::Arccos: n.value = in_val(n, 0).array().acos(); break;
      case Op::Tanh: n.value = in_val(n, 0).array().tanh(); break;
      case Op::Relu: n.value = in_val(n, 0).cwiseMax(0.0); break;
      case Op::Exp: n.value = in_val(n, 0).array().exp(); break;
      case Op::Log: n.value = in_val(n, 0).array().log(); break;
      case Op::Softplus:
        n.value = in_val(n, 0).unaryExpr([](double x) {
          return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        });
        break;
      case Op::Logistic:
        n.value = in_val(n, 0).unaryExpr([](double x) {
          return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
        });
        break;
      case Op::ClampMin: n.value = in_val(n, 0).cwiseMax(n.scalar); break;
      case Op::Sum: n.value(0, 0) = in_val(n, 0).sum(); break;
      case Op::Mean: n.value(0, 0) = in_val(n, 0).mean(); break;
      case Op::L1Norm: n.value(0, 0) = in_val(n, 0).cwiseAbs().sum(); break;
      case Op::L2NormSq: n.value(0, 0) = in_val(n, 0).squaredNorm(); break;
      case Op::ConcatRows: {
        long r = 0;
        for (int idx : n.in) {
          const auto& m = nodes_[size_t(idx)].value;
          n.value.middleRows(r, m.rows()) = m;
          r += m.rows();
        }
        break;
      }
      case Op::ConcatCols: {
        long c = 0;
        for (int idx : n.in) {
          const auto& m = nodes_[size_t(idx)].value;
          n.value.middleCols(c, m.cols()) = m;
          c += m.cols();
        }
        break;
      }
      case Op::SliceRows: n.value = in_val(n, 0).middleRows(n.i0, n.i1); break;
      case Op::SliceCols: n.value = in_val(n, 0).middleCols(n.i0, n.i1); break;
      case Op::WideToTall: {
        const auto& m = in_val(n, 0);
        long c = m.cols() / n.i0;
        for (long b = 0; b < n.i0; ++b)
          n.value.middleRows(b * m.rows(), m.rows()) = m.middleCols(b * c, c);
        break;
      }
      case Op::TallToWide: {
        const auto& m = in_val(n, 0);
        long r = m.rows() / n.i0;
        for (long b = 0; b < n.i0; ++b)
          n.value.middleCols(b * m.cols(), m.cols()) = m.middleRows(b * r, r);
        break;
      }
    }
  }

  void pull(Node& n) {
    const Eigen::MatrixXd& g = n.adj;
    switch (n.op) {
      case Op::Input:
      case Op::Const:
        break;
      case Op::Add:
        adj_of(n.in[0]) += g;
        adj_of(n.in[1]) += g;
        break;
      case Op::Sub:
        adj_of(n.in[0]) += g;
        adj_of(n.in[1]) -= g;
        break;
      case Op::Mul:
        adj_of(n.in[0]) += g.cwiseProduct(in_val(n, 1));
        adj_of(n.in[1]) += g.cwiseProduct(in_val(n, 0));
        break;
      case Op::Div: {
        const auto& a = in_val(n, 0);
        const auto& b = in_val(n, 1);
        adj_of(n.in[0]) += g.cwiseQuotient(b);
        adj_of(n.in[1]) -= g.cwiseProduct(a).cwiseQuotient(b.cwiseProduct(b));
        break;
      }
      case Op::MatMul:
        adj_of(n.in[0]).noalias() += g * in_val(n, 1).transpose();
        adj_of(n.in[1]).noalias() += in_val(n, 0).transpose() * g;
        break;
      case Op::ScalarMul: adj_of(n.in[0]) += n.scalar * g; break;
      case Op::Sin:
        adj_of(n.in[0]) += g.cwiseProduct(in_val(n, 0).array().cos().matrix());
        break;
      case Op::Cos:
        adj_of(n.in[0]) -= g.cwiseProduct(in_val(n, 0).array().sin().matrix());
        break;
      case Op::Sqrt:
        adj_of(n.in[0]) += 0.5 * g.cwiseQuotient(n.value);
        break;
      case Op::Square:
        adj_of(n.in[0]) += 2.0 * g.cwiseProduct(in_val(n, 0));
        break;
      case Op::Arccos:
        adj_of(n.in[0]) -=
            g.cwiseQuotient((1.0 - in_val(n, 0).array().square()).sqrt().matrix());
        break;
      case Op::Tanh:
        adj_of(n.in[0]) +=
            g.cwiseProduct((1.0 - n.value.array().square()).matrix());
        break;
      case Op::Relu:
        adj_of(n.in[0]) +=
            g.cwiseProduct((in_val(n, 0).array() > 0.0).cast<double>().matrix());
        break;
      case Op::Exp: adj_of(n.in[0]) += g.cwiseProduct(n.value); break;
      case Op::Log: adj_of(n.in[0]) += g.cwiseQuotient(in_val(n, 0)); break;
      case Op::Softplus:
        adj_of(n.in[0]) += g.cwiseProduct(in_val(n, 0).unaryExpr([](double x) {
          return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
        }));
        break;
      case Op::Logistic:
        adj_of(n.in[0]) += g.cwiseProduct(
            n.value.cwiseProduct((1.0 - n.value.array()).matrix()));
        break;
      case Op::ClampMin:
        adj_of(n.in[0]) += g.cwiseProduct(
            (in_val(n, 0).array() > n.scalar).cast<double>().matrix());
        break;
      case Op::Sum:
        adj_of(n.in[0]).array() += g(0, 0);
        break;
      case Op::Mean:
        adj_of(n.in[0]).array() += g(0, 0) / double(in_val(n, 0).size());
        break;
      case Op::L1Norm:
        adj_of(n.in[0]) += g(0, 0) * in_val(n, 0).unaryExpr([](double x) {
          return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
        });
        break;
      case Op::L2NormSq:
        adj_of(n.in[0]) += 2.0 * g(0, 0) * in_val(n, 0);
        break;
      case Op::ConcatRows: {
        long r = 0;
        for (int idx : n.in) {
          long nr = nodes_[size_t(idx)].value.rows();
          adj_of(idx) += g.middleRows(r, nr);
          r += nr;
        }
        break;
      }
      case Op::ConcatCols: {
        long c = 0;
        for (int idx : n.in) {
          long nc = nodes_[size_t(idx)].value.cols();
          adj_of(idx) += g.middleCols(c, nc);
          c += nc;
        }
        break;
      }
      case Op::SliceRows:
        adj_of(n.in[0]).middleRows(n.i0, n.i1) += g;
        break;
      case Op::SliceCols:
        adj_of(n.in[0]).middleCols(n.i0, n.i1) += g;
        break;
      case Op::WideToTall: {
        auto& da = adj_of(n.in[0]);
        long c = da.cols() / n.i0;
        for (long b = 0; b < n.i0; ++b)
          da.middleCols(b * c, c) += g.middleRows(b * da.rows(), da.rows());
        break;
      }
      case Op::TallToWide: {
        auto& da = adj_of(n.in[0]);
        long r = da.rows() / n.i0;
        for (long b = 0; b < n.i0; ++b)
          da.middleRows(b * r, r) += g.middleCols(b * da.cols(), da.cols());
        break;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Numerical gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0;
  int n_checked = 0;
  int n_kinks_skipped = 0;
  bool ok(double tol) const { return max_rel_err <= tol && n_checked > 0; }
};

/// Central-difference check of d loss / d inputs for a graph builder
/// `f(tape, inputs) -> loss`. Entries where two step sizes disagree are
/// treated as sitting on a kink and skipped.
inline GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    std::vector<Eigen::MatrixXd> x0, double step = 1e-6, double kink_tol = 1e-3) {
  auto eval_loss = [&](const std::vector<Eigen::MatrixXd>& xs) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const auto& m : xs) vars.push_back(t.input(m));
    return t.value(f(t, vars))(0, 0);
  };

  Tape t;
  std::vector<Var> vars;
  for (const auto& m : x0) vars.push_back(t.input(m));
  Var loss = f(t, vars);
  t.backward(loss);
  std::vector<Eigen::MatrixXd> analytic;
  for (Var v : vars) analytic.push_back(t.grad(v));

  GradCheckReport rep;
  for (size_t k = 0; k < x0.size(); ++k) {
    for (long i = 0; i < x0[k].rows(); ++i)
      for (long j = 0; j < x0[k].cols(); ++j) {
        auto central = [&](double h) {
          auto xs = x0;
          xs[k](i, j) += h;
          double up = eval_loss(xs);
          xs[k](i, j) -= 2 * h;
          double dn = eval_loss(xs);
          return (up - dn) / (2 * h);
        };
        double d1 = central(step), d2 = central(step * 8);
        if (std::abs(d1 - d2) > kink_tol * std::max(1.0, std::abs(d1))) {
          ++rep.n_kinks_skipped;
          continue;
        }
        double a = analytic[k](i, j);
        double rel = std::abs(a - d1) / std::max(1.0, std::abs(d1));
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.n_checked;
      }
  }
  return rep;
}

}  // namespace gridflow::ad
