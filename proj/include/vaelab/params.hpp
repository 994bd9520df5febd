#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaelab {

struct Param {
  std::string name;
  Eigen::MatrixXd value;
};

// Ordered collection of named parameter matrices. Order is the binding order
// used by tapes, gradients and optimizer state.
class ParamSet {
 public:
  int add(std::string name, Eigen::MatrixXd init) {
    if (find(name) >= 0)
      throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
    items_.push_back({std::move(name), std::move(init)});
    return static_cast<int>(items_.size()) - 1;
  }

  int find(const std::string& name) const {
    for (size_t i = 0; i < items_.size(); ++i)
      if (items_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  Param& at(int i) { return items_.at(static_cast<size_t>(i)); }
  const Param& at(int i) const { return items_.at(static_cast<size_t>(i)); }
  size_t size() const { return items_.size(); }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Param> items_;
};

}  // namespace vaelab
