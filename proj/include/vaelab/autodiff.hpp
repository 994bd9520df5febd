#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace vaelab::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

// Handle to a node owned by a Tape. Valid until the tape is destroyed.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;  // value of a 1x1 node

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape over dense 64-bit matrices. The graph is rebuilt per
// batch: creating a node computes its value (forward), backward() walks the
// records in reverse creation order, which is a topological order.
class Tape {
 public:
  Tape() = default;
  ~Tape();  // returns node buffers to a thread-local pool
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = false, std::string label = {});

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise; broadcasts 1x1 and 1xN operands
  Var matmul(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var exp(Var a);
  Var log(Var a);
  Var elu(Var a);
  Var square(Var a);
  Var sum(Var a);          // scalar sum of all entries
  Var rowwise_sum(Var a);  // m x n -> m x 1
  Var slice_cols(Var a, Index first, Index count);
  Var clamp(Var a, double lo, double hi);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node with
  // requires_grad on a path to the loss. One call per tape.
  void backward(Var loss);

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Matrix& grad(int id);
  const std::string& label(int id) const { return nodes_[static_cast<size_t>(id)].label; }
  size_t size() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    kLeaf, kAdd, kSub, kMul, kMatMul, kNeg, kScale, kAddConst,
    kExp, kLog, kElu, kSquare, kSum, kRowSum, kSliceCols, kClamp
  };

  struct Node {
    Matrix value;
    Matrix grad;
    Op op = Op::kLeaf;
    int lhs = -1;
    int rhs = -1;
    double c0 = 0.0;
    double c1 = 0.0;
    bool requires_grad = false;
    bool has_grad = false;
    std::string label;
  };

  int push(Node n);
  Node fresh(Op op, int lhs, int rhs, Index rows, Index cols);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  void accumulate_reduced(int id, const Matrix& g, double sign);
  void step_backward(int id);
  static void check_elementwise(const Matrix& a, const Matrix& b, const char* op);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return const_cast<Tape*>(tape_)->grad(id_); }

inline Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var operator-(Var a) { return a.tape()->neg(a); }
inline Var operator*(double c, Var a) { return a.tape()->scale(a, c); }
inline Var operator*(Var a, double c) { return a.tape()->scale(a, c); }
inline Var operator+(Var a, double c) { return a.tape()->add_const(a, c); }
inline Var operator-(Var a, double c) { return a.tape()->add_const(a, -c); }
inline Var vexp(Var a) { return a.tape()->exp(a); }
inline Var vlog(Var a) { return a.tape()->log(a); }
inline Var elu(Var a) { return a.tape()->elu(a); }
inline Var square(Var a) { return a.tape()->square(a); }
inline Var sum(Var a) { return a.tape()->sum(a); }
inline Var rowwise_sum(Var a) { return a.tape()->rowwise_sum(a); }

// |a - b| / (|a| + |b| + 1e-12)
inline double relative_gap(double a, double b) {
  return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-12);
}

// Builds a scalar loss from leaf nodes bound to `point` (all requires_grad).
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Max over all input coordinates of the relative gap between the analytic
// gradient and a central finite difference with step `eps`.
double grad_check(const LossBuilder& build, const std::vector<Matrix>& point,
                  double eps);

}  // namespace vaelab::ad
