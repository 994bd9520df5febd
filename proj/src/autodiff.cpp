#include "vaelab/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace vaelab::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

bool broadcastable(const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return true;
  if (a.size() == 1 || b.size() == 1) return true;
  if (a.rows() == 1 && a.cols() == b.cols()) return true;
  if (b.rows() == 1 && b.cols() == a.cols()) return true;
  return false;
}

// Recycles value/grad buffers across tapes. Training rebuilds an identically
// shaped graph every step; reusing warm buffers keeps the gemms from paying
// allocation and page-fault costs each time.
class BufferPool {
 public:
  Matrix acquire(Index rows, Index cols) {
    auto it = free_.find(rows * cols);
    if (it != free_.end() && !it->second.empty()) {
      Matrix m = std::move(it->second.back());
      it->second.pop_back();
      m.resize(rows, cols);  // same element count: no reallocation
      return m;
    }
    return Matrix(rows, cols);
  }

  void release(Matrix&& m) {
    if (m.size() == 0) return;
    auto& bucket = free_[m.size()];
    if (bucket.size() < 64) bucket.push_back(std::move(m));
  }

 private:
  std::unordered_map<long, std::vector<Matrix>> free_;
};

BufferPool& pool() {
  static thread_local BufferPool p;
  return p;
}

template <typename Expr>
void assign_or_add_array(Matrix& grad, bool& has, Index rows, Index cols,
                         const Expr& e) {
  if (!has) {
    grad = pool().acquire(rows, cols);
    grad.array() = e;
    has = true;
  } else {
    grad.array() += e;
  }
}

template <typename Expr>
void assign_or_add_product(Matrix& grad, bool& has, Index rows, Index cols,
                           const Expr& e) {
  if (!has) {
    grad = pool().acquire(rows, cols);
    grad.noalias() = e;
    has = true;
  } else {
    grad.noalias() += e;
  }
}

}  // namespace

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1)
    throw std::invalid_argument("scalar(): node '" + tape_->label(id_) +
                                "' has shape " + shape_str(v));
  return v(0, 0);
}

Tape::~Tape() {
  for (Node& n : nodes_) {
    pool().release(std::move(n.value));
    if (n.has_grad) pool().release(std::move(n.grad));
  }
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tape::Node Tape::fresh(Op op, int lhs, int rhs, Index rows, Index cols) {
  Node n;
  n.value = pool().acquire(rows, cols);
  n.op = op;
  n.lhs = lhs;
  n.rhs = rhs;
  n.requires_grad = (lhs >= 0 && node(lhs).requires_grad) ||
                    (rhs >= 0 && node(rhs).requires_grad);
  return n;
}

void Tape::check_elementwise(const Matrix& a, const Matrix& b, const char* op) {
  if (!broadcastable(a, b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
}

Var Tape::leaf(Matrix value, bool requires_grad, std::string label) {
  if (value.rows() < 1 || value.cols() < 1)
    throw std::invalid_argument("leaf '" + label + "': empty tensor");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.label = std::move(label);
  return {this, push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
  const Matrix &va = value(a.id()), &vb = value(b.id());
  check_elementwise(va, vb, "add");
  const Matrix& big = va.size() >= vb.size() ? va : vb;
  const Matrix& small = va.size() >= vb.size() ? vb : va;
  Node n = fresh(Op::kAdd, a.id(), b.id(), big.rows(), big.cols());
  if (small.size() == 1)
    n.value.array() = big.array() + small(0, 0);
  else if (small.rows() == 1 && big.rows() > 1)
    n.value.array() = big.array().rowwise() + small.row(0).array();
  else
    n.value = big + small;
  return {this, push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
  const Matrix &va = value(a.id()), &vb = value(b.id());
  check_elementwise(va, vb, "sub");
  const Index rows = std::max(va.rows(), vb.rows());
  const Index cols = std::max(va.cols(), vb.cols());
  Node n = fresh(Op::kSub, a.id(), b.id(), rows, cols);
  if (vb.size() == 1)
    n.value.array() = va.array() - vb(0, 0);
  else if (va.size() == 1)
    n.value.array() = va(0, 0) - vb.array();
  else if (vb.rows() == 1 && va.rows() > 1)
    n.value.array() = va.array().rowwise() - vb.row(0).array();
  else if (va.rows() == 1 && vb.rows() > 1)
    n.value.array() = (-vb).array().rowwise() + va.row(0).array();
  else
    n.value = va - vb;
  return {this, push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
  const Matrix &va = value(a.id()), &vb = value(b.id());
  check_elementwise(va, vb, "mul");
  const Matrix& big = va.size() >= vb.size() ? va : vb;
  const Matrix& small = va.size() >= vb.size() ? vb : va;
  Node n = fresh(Op::kMul, a.id(), b.id(), big.rows(), big.cols());
  if (small.size() == 1)
    n.value.array() = big.array() * small(0, 0);
  else if (small.rows() == 1 && big.rows() > 1)
    n.value.array() = big.array().rowwise() * small.row(0).array();
  else
    n.value = big.cwiseProduct(small);
  return {this, push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) {
  const Matrix &va = value(a.id()), &vb = value(b.id());
  if (va.cols() != vb.rows())
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(va) +
                                " vs " + shape_str(vb));
  Node n = fresh(Op::kMatMul, a.id(), b.id(), va.rows(), vb.cols());
  n.value.noalias() = va * vb;
  return {this, push(std::move(n))};
}

Var Tape::neg(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kNeg, a.id(), -1, va.rows(), va.cols());
  n.value = -va;
  return {this, push(std::move(n))};
}

Var Tape::scale(Var a, double c) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kScale, a.id(), -1, va.rows(), va.cols());
  n.value = c * va;
  n.c0 = c;
  return {this, push(std::move(n))};
}

Var Tape::add_const(Var a, double c) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kAddConst, a.id(), -1, va.rows(), va.cols());
  n.value.array() = va.array() + c;
  n.c0 = c;
  return {this, push(std::move(n))};
}

Var Tape::exp(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kExp, a.id(), -1, va.rows(), va.cols());
  n.value.array() = va.array().exp();
  return {this, push(std::move(n))};
}

Var Tape::log(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kLog, a.id(), -1, va.rows(), va.cols());
  n.value.array() = va.array().log();
  return {this, push(std::move(n))};
}

Var Tape::elu(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kElu, a.id(), -1, va.rows(), va.cols());
  // max/min/exp keep the whole expression packet-vectorized
  n.value.array() = va.array().max(0.0) + (va.array().min(0.0).exp() - 1.0);
  return {this, push(std::move(n))};
}

Var Tape::square(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kSquare, a.id(), -1, va.rows(), va.cols());
  n.value.array() = va.array().square();
  return {this, push(std::move(n))};
}

Var Tape::sum(Var a) {
  Node n = fresh(Op::kSum, a.id(), -1, 1, 1);
  n.value(0, 0) = value(a.id()).sum();
  return {this, push(std::move(n))};
}

Var Tape::rowwise_sum(Var a) {
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kRowSum, a.id(), -1, va.rows(), 1);
  n.value = va.rowwise().sum();
  return {this, push(std::move(n))};
}

Var Tape::slice_cols(Var a, Index first, Index count) {
  const Matrix& va = value(a.id());
  if (first < 0 || count < 1 || first + count > va.cols())
    throw std::invalid_argument("slice_cols: [" + std::to_string(first) + ", " +
                                std::to_string(first + count) +
                                ") out of range for " + shape_str(va));
  Node n = fresh(Op::kSliceCols, a.id(), -1, va.rows(), count);
  n.value = va.middleCols(first, count);
  n.c0 = static_cast<double>(first);
  n.c1 = static_cast<double>(count);
  return {this, push(std::move(n))};
}

Var Tape::clamp(Var a, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  const Matrix& va = value(a.id());
  Node n = fresh(Op::kClamp, a.id(), -1, va.rows(), va.cols());
  n.value.array() = va.array().max(lo).min(hi);
  n.c0 = lo;
  n.c1 = hi;
  return {this, push(std::move(n))};
}

const Matrix& Tape::grad(int id) {
  Node& n = node(id);
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

// Accumulates `g` (shaped like the op output) into the parent, reducing over
// broadcast dimensions. `sign` distinguishes the subtrahend of kSub.
void Tape::accumulate_reduced(int id, const Matrix& g, double sign) {
  Node& p = node(id);
  if (!p.requires_grad) return;
  const Index rows = p.value.rows(), cols = p.value.cols();
  if (rows == g.rows() && cols == g.cols()) {
    assign_or_add_array(p.grad, p.has_grad, rows, cols, sign * g.array());
  } else if (rows == 1 && cols == 1) {
    assign_or_add_array(p.grad, p.has_grad, 1, 1,
                        Eigen::ArrayXXd::Constant(1, 1, sign * g.sum()));
  } else {
    assign_or_add_array(p.grad, p.has_grad, 1, cols,
                        sign * g.array().colwise().sum());
  }
}

void Tape::step_backward(int id) {
  Node& n = node(id);
  const Matrix& g = n.grad;
  Node* a = n.lhs >= 0 ? &node(n.lhs) : nullptr;
  Node* b = n.rhs >= 0 ? &node(n.rhs) : nullptr;
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
      accumulate_reduced(n.lhs, g, 1.0);
      accumulate_reduced(n.rhs, g, 1.0);
      break;
    case Op::kSub:
      accumulate_reduced(n.lhs, g, 1.0);
      accumulate_reduced(n.rhs, g, -1.0);
      break;
    case Op::kMul: {
      auto side = [&](Node& target, const Node& other) {
        if (!target.requires_grad) return;
        const Index rows = target.value.rows(), cols = target.value.cols();
        const Matrix& ov = other.value;
        if (ov.rows() == g.rows() && ov.cols() == g.cols()) {
          if (rows == g.rows() && cols == g.cols())
            assign_or_add_array(target.grad, target.has_grad, rows, cols,
                                g.array() * ov.array());
          else if (rows == 1 && cols == 1)
            assign_or_add_array(target.grad, target.has_grad, 1, 1,
                                Eigen::ArrayXXd::Constant(
                                    1, 1, (g.array() * ov.array()).sum()));
          else
            assign_or_add_array(target.grad, target.has_grad, 1, cols,
                                (g.array() * ov.array()).colwise().sum());
        } else if (ov.size() == 1) {
          assign_or_add_array(target.grad, target.has_grad, rows, cols,
                              g.array() * ov(0, 0));
        } else {  // other is a 1 x cols row
          assign_or_add_array(target.grad, target.has_grad, rows, cols,
                              g.array().rowwise() * ov.row(0).array());
        }
      };
      side(*a, *b);
      side(*b, *a);
      break;
    }
    case Op::kMatMul:
      if (a->requires_grad)
        assign_or_add_product(a->grad, a->has_grad, a->value.rows(),
                              a->value.cols(), g * b->value.transpose());
      if (b->requires_grad)
        assign_or_add_product(b->grad, b->has_grad, b->value.rows(),
                              b->value.cols(), a->value.transpose() * g);
      break;
    case Op::kNeg:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(), -g.array());
      break;
    case Op::kScale:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          n.c0 * g.array());
      break;
    case Op::kAddConst:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(), g.array());
      break;
    case Op::kExp:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          g.array() * n.value.array());
      break;
    case Op::kLog:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          g.array() / a->value.array());
      break;
    case Op::kElu:
      // d/dx = 1 for x > 0, exp(x) = value + 1 otherwise
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          g.array() * (n.value.array() + 1.0).min(1.0));
      break;
    case Op::kSquare:
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          2.0 * g.array() * a->value.array());
      break;
    case Op::kSum:
      assign_or_add_array(a->grad, a->has_grad, a->value.rows(), a->value.cols(),
                          Eigen::ArrayXXd::Constant(a->value.rows(),
                                                    a->value.cols(), g(0, 0)));
      break;
    case Op::kRowSum:
      assign_or_add_array(a->grad, a->has_grad, a->value.rows(), a->value.cols(),
                          g.col(0).array().replicate(1, a->value.cols()));
      break;
    case Op::kSliceCols: {
      if (!a->has_grad) {
        a->grad = pool().acquire(a->value.rows(), a->value.cols());
        a->grad.setZero();
        a->has_grad = true;
      }
      a->grad.middleCols(static_cast<Index>(n.c0), static_cast<Index>(n.c1)) += g;
      break;
    }
    case Op::kClamp: {
      const auto& x = a->value.array();
      assign_or_add_array(a->grad, a->has_grad, g.rows(), g.cols(),
                          g.array() * ((x > n.c0) && (x < n.c1)).cast<double>());
      break;
    }
  }
}

void Tape::backward(Var loss) {
  if (backward_done_)
    throw std::logic_error("backward: already run on this tape");
  Node& l = node(loss.id());
  if (l.value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(l.value));
  if (!l.requires_grad)
    throw std::invalid_argument("backward: loss has no gradient path");
  backward_done_ = true;
  l.grad = Matrix::Constant(1, 1, 1.0);
  l.has_grad = true;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (n.has_grad && n.requires_grad) step_backward(id);
  }
}

double grad_check(const LossBuilder& build, const std::vector<Matrix>& point,
                  double eps) {
  if (!(eps > 1e-8 && eps < 1e-3))
    throw std::invalid_argument("grad_check: eps must lie in (1e-8, 1e-3)");

  auto eval = [&](const std::vector<Matrix>& p, bool want_grads,
                  std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(p.size());
    for (const Matrix& m : p) leaves.push_back(tape.leaf(m, want_grads));
    Var loss = build(tape, leaves);
    double v = loss.scalar();
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
    if (want_grads) {
      tape.backward(loss);
      grads->clear();
      for (const Var& l : leaves) grads->push_back(l.grad());
    }
    return v;
  };

  std::vector<Matrix> analytic;
  eval(point, true, &analytic);

  double worst = 0.0;
  std::vector<Matrix> p = point;
  for (size_t k = 0; k < p.size(); ++k) {
    for (Index i = 0; i < p[k].rows(); ++i) {
      for (Index j = 0; j < p[k].cols(); ++j) {
        const double saved = p[k](i, j);
        const double h = eps * std::max(1.0, std::abs(saved));
        p[k](i, j) = saved + h;
        double fp = eval(p, false, nullptr);
        p[k](i, j) = saved - h;
        double fm = eval(p, false, nullptr);
        p[k](i, j) = saved;
        double fd = (fp - fm) / (2.0 * h);
        double an = analytic[k](i, j);
        if (!std::isfinite(fd) || !std::isfinite(an))
          throw std::runtime_error("grad_check: non-finite derivative");
        worst = std::max(worst, relative_gap(an, fd));
      }
    }
  }
  return worst;
}

}  // namespace vaelab::ad
