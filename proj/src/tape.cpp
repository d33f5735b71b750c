#include "cmsf/tape.hpp"

#include <stdexcept>
#include <string>

namespace cmsf {

Var Tape::push_node(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix()});
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return push_node(std::move(value)); }

Var Tape::parameter(Matrix value) { return push_node(std::move(value)); }

Var Tape::record(Matrix value, BackwardFn backward) {
  const Var out = push_node(std::move(value));
  records_.push_back(Record{out.id, std::move(backward)});
  return out;
}

const Matrix& Tape::value(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: unknown node " + std::to_string(v.id));
  return nodes_[v.id].value;
}

const Matrix& Tape::grad(Var v) const {
  if (!has_grads_) throw std::logic_error("Tape::grad: backward() has not run");
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: unknown node " + std::to_string(v.id));
  return nodes_[v.id].grad;
}

Matrix& Tape::grad_buffer(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: unknown node " + std::to_string(v.id));
  return nodes_[v.id].grad;
}

void Tape::backward(Var loss) {
  const Matrix& loss_value = value(loss);
  if (loss_value.rows() != 1 || loss_value.cols() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar (1x1), got " +
                                shape_string(loss_value));
  }
  for (auto& node : nodes_) node.grad = Matrix(node.value.rows(), node.value.cols());
  has_grads_ = true;
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output > loss.id) continue;
    it->backward(*this);
  }
}

}  // namespace cmsf
