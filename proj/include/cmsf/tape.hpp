#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "cmsf/matrix.hpp"

namespace cmsf {

// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode differentiation record. Every node holds a forward value; every
// primitive op appends one record whose backward closure reads the output
// gradient and accumulates into its inputs. Records are replayed in reverse
// order of creation, each exactly once.
//
// A tape is single-threaded. Distinct tapes share no state.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Var constant(Matrix value);
  // A differentiable leaf. Its gradient is available through grad() after
  // backward(); leaves the loss does not reach keep an all-zero gradient.
  Var parameter(Matrix value);
  // Appends the output of a primitive op together with its backward closure.
  Var record(Matrix value, BackwardFn backward);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  // Mutable gradient buffer, for use inside backward closures.
  Matrix& grad_buffer(Var v);

  // Requires a 1x1 loss node. Zeroes every gradient buffer first, so calling
  // it twice on the same tape yields the same result.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
  };
  struct Record {
    std::size_t output;
    BackwardFn backward;
  };

  Var push_node(Matrix value);

  std::vector<Node> nodes_;
  std::vector<Record> records_;
  bool has_grads_ = false;
};

}  // namespace cmsf
