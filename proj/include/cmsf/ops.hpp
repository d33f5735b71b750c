#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "cmsf/matrix.hpp"
#include "cmsf/tape.hpp"

namespace cmsf {

inline constexpr double kNormalizeEps = 1e-12;

// ---- Plain matrix functions (no tape) -------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
// Adds a 1 x cols bias to every row.
Matrix add_bias(const Matrix& x, const Matrix& bias);
Matrix relu(const Matrix& x);
// Throws std::domain_error naming the first row whose norm is <= eps.
Matrix l2_row_normalize(const Matrix& x, double eps = kNormalizeEps);

struct BatchNormState {
  Matrix running_mean;  // 1 x features
  Matrix running_var;   // 1 x features
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(1, features, 0.0), running_var(1, features, 1.0) {}
};

// Evaluation-mode batch norm using the running statistics.
Matrix batch_norm_1d_eval(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          const BatchNormState& state);

// ---- Tape-recorded ops ----------------------------------------------------

Var matmul(Tape& tape, Var a, Var b);
Var add_bias(Tape& tape, Var x, Var bias);
Var relu(Tape& tape, Var x);
// Training-mode batch norm: normalizes each column with the batch mean and the
// biased batch variance, then applies gamma/beta. Updates running statistics
// in `state` (running variance uses the unbiased estimate). Needs >= 2 rows.
Var batch_norm_1d(Tape& tape, Var x, Var gamma, Var beta, BatchNormState& state);
Var l2_row_normalize(Tape& tape, Var x, double eps = kNormalizeEps);
Var sum(Tape& tape, Var x);
Var hadamard(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double factor);

// Per-row loss callback: given row index and row values, returns the row's loss
// and writes d(loss)/d(row) into `grad`.
using RowLossFn =
    std::function<double(std::size_t row, std::span<const double> values, std::span<double> grad)>;

// Mean over rows of a per-row loss. Output is 1x1.
Var mean_row_loss(Tape& tape, Var x, const RowLossFn& loss);

}  // namespace cmsf
