#include "cmsf/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cmsf {
namespace {

void require_bias(const Matrix& x, const Matrix& bias, const char* what) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw std::invalid_argument(std::string(what) + ": bias " + shape_string(bias) +
                                " does not fit input " + shape_string(x));
  }
}

// out += a * b
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* out_row = out.row(i).data();
    const double* a_row = a.row(i).data();
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = a_row[k];
      if (aik == 0.0) continue;
      const double* b_row = b.row(k).data();
      for (std::size_t j = 0; j < p; ++j) out_row[j] += aik * b_row[j];
    }
  }
}

// out += a * b^T
void gemm_bt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), p = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < p; ++j) out(i, j) += dot(a_row, b.row(j));
  }
}

// out += a^T * b
void gemm_at_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const double* a_row = a.row(r).data();
    const double* b_row = b.row(r).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double ari = a_row[i];
      if (ari == 0.0) continue;
      double* out_row = out.row(i).data();
      for (std::size_t j = 0; j < p; ++j) out_row[j] += ari * b_row[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(a) + " x " +
                                shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  gemm_acc(a, b, out);
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_bt: shape mismatch " + shape_string(a) + " x " +
                                shape_string(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  gemm_bt_acc(a, b, out);
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_at: shape mismatch " + shape_string(a) + "^T x " +
                                shape_string(b));
  }
  Matrix out(a.cols(), b.cols());
  gemm_at_acc(a, b, out);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add_bias(const Matrix& x, const Matrix& bias) {
  require_bias(x, bias, "add_bias");
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias(0, j);
  }
  return out;
}

Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix l2_row_normalize(const Matrix& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_row_normalize: eps must be > 0");
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double norm = std::sqrt(squared_norm(row));
    if (!(norm > eps)) {
      throw std::domain_error("l2_row_normalize: row " + std::to_string(i) +
                              " has degenerate norm " + std::to_string(norm));
    }
    for (auto& v : row) v /= norm;
  }
  return out;
}

Matrix batch_norm_1d_eval(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          const BatchNormState& state) {
  require_bias(x, gamma, "batch_norm_1d_eval(gamma)");
  require_bias(x, beta, "batch_norm_1d_eval(beta)");
  require_bias(x, state.running_mean, "batch_norm_1d_eval(running_mean)");
  Matrix out(x.rows(), x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const double inv_std = 1.0 / std::sqrt(state.running_var(0, j) + state.eps);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out(i, j) = gamma(0, j) * (x(i, j) - state.running_mean(0, j)) * inv_std + beta(0, j);
    }
  }
  return out;
}

// ---- Tape-recorded ----------------------------------------------------------

Var matmul(Tape& tape, Var a, Var b) {
  Matrix out = matmul(tape.value(a), tape.value(b));
  return tape.record(std::move(out), [a, b, out_id = tape.node_count()](Tape& t) {
    const Matrix& g = t.grad(Var{out_id});
    gemm_bt_acc(g, t.value(b), t.grad_buffer(a));
    gemm_at_acc(t.value(a), g, t.grad_buffer(b));
  });
}

Var add_bias(Tape& tape, Var x, Var bias) {
  Matrix out = add_bias(tape.value(x), tape.value(bias));
  return tape.record(std::move(out), [x, bias, out_id = tape.node_count()](Tape& t) {
    const Matrix& g = t.grad(Var{out_id});
    Matrix& gx = t.grad_buffer(x);
    Matrix& gb = t.grad_buffer(bias);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) {
        gx(i, j) += g(i, j);
        gb(0, j) += g(i, j);
      }
    }
  });
}

Var relu(Tape& tape, Var x) {
  Matrix out = relu(tape.value(x));
  return tape.record(std::move(out), [x, out_id = tape.node_count()](Tape& t) {
    const Matrix& g = t.grad(Var{out_id});
    const Matrix& in = t.value(x);
    auto gx = t.grad_buffer(x).values();
    const auto gv = g.values();
    const auto iv = in.values();
    for (std::size_t i = 0; i < gv.size(); ++i) {
      if (iv[i] > 0.0) gx[i] += gv[i];
    }
  });
}

Var batch_norm_1d(Tape& tape, Var x, Var gamma, Var beta, BatchNormState& state) {
  const Matrix& in = tape.value(x);
  require_bias(in, tape.value(gamma), "batch_norm_1d(gamma)");
  require_bias(in, tape.value(beta), "batch_norm_1d(beta)");
  require_bias(in, state.running_mean, "batch_norm_1d(running_mean)");
  const std::size_t n = in.rows(), f = in.cols();
  if (n < 2) {
    throw std::invalid_argument("batch_norm_1d: training mode requires batch size >= 2, got " +
                                std::to_string(n));
  }
  const Matrix& g = tape.value(gamma);
  const Matrix& b = tape.value(beta);

  Matrix x_hat(n, f);
  Matrix inv_std(1, f);
  Matrix out(n, f);
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += in(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = in(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + state.eps);
    inv_std(0, j) = is;
    for (std::size_t i = 0; i < n; ++i) {
      x_hat(i, j) = (in(i, j) - mean) * is;
      out(i, j) = g(0, j) * x_hat(i, j) + b(0, j);
    }
    const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
    state.running_mean(0, j) = state.momentum * state.running_mean(0, j) + (1.0 - state.momentum) * mean;
    state.running_var(0, j) = state.momentum * state.running_var(0, j) + (1.0 - state.momentum) * unbiased;
  }

  return tape.record(std::move(out), [x, gamma, beta, x_hat = std::move(x_hat),
                                      inv_std = std::move(inv_std),
                                      out_id = tape.node_count()](Tape& t) {
    const Matrix& gy = t.grad(Var{out_id});
    const Matrix& gam = t.value(gamma);
    Matrix& gx = t.grad_buffer(x);
    Matrix& gg = t.grad_buffer(gamma);
    Matrix& gb = t.grad_buffer(beta);
    const std::size_t rows = gy.rows();
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t j = 0; j < gy.cols(); ++j) {
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        const double dxh = gy(i, j) * gam(0, j);
        sum_dxh += dxh;
        sum_dxh_xh += dxh * x_hat(i, j);
        gg(0, j) += gy(i, j) * x_hat(i, j);
        gb(0, j) += gy(i, j);
      }
      for (std::size_t i = 0; i < rows; ++i) {
        const double dxh = gy(i, j) * gam(0, j);
        gx(i, j) += inv_std(0, j) * (dxh - inv_n * sum_dxh - x_hat(i, j) * inv_n * sum_dxh_xh);
      }
    }
  });
}

Var l2_row_normalize(Tape& tape, Var x, double eps) {
  Matrix out = l2_row_normalize(tape.value(x), eps);
  Matrix norms(tape.value(x).rows(), 1);
  for (std::size_t i = 0; i < norms.rows(); ++i) {
    norms(i, 0) = std::sqrt(squared_norm(tape.value(x).row(i)));
  }
  return tape.record(std::move(out), [x, norms = std::move(norms), out_id = tape.node_count()](Tape& t) {
    const Matrix& gy = t.grad(Var{out_id});
    const Matrix& y = t.value(Var{out_id});
    Matrix& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.rows(); ++i) {
      const double proj = dot(y.row(i), gy.row(i));
      const double inv = 1.0 / norms(i, 0);
      for (std::size_t j = 0; j < gy.cols(); ++j) {
        gx(i, j) += (gy(i, j) - y(i, j) * proj) * inv;
      }
    }
  });
}

Var sum(Tape& tape, Var x) {
  double s = 0.0;
  for (double v : tape.value(x).values()) s += v;
  return tape.record(Matrix(1, 1, s), [x, out_id = tape.node_count()](Tape& t) {
    const double g = t.grad(Var{out_id})(0, 0);
    for (auto& v : t.grad_buffer(x).values()) v += g;
  });
}

Var hadamard(Tape& tape, Var a, Var b) {
  const Matrix& av = tape.value(a);
  const Matrix& bv = tape.value(b);
  require_same_shape(av, bv, "hadamard");
  Matrix out = av;
  auto ov = out.values();
  const auto bvals = bv.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bvals[i];
  return tape.record(std::move(out), [a, b, out_id = tape.node_count()](Tape& t) {
    const auto g = t.grad(Var{out_id}).values();
    const auto avals = t.value(a).values();
    const auto bvals2 = t.value(b).values();
    auto ga = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvals2[i];
    auto gb = t.grad_buffer(b).values();
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avals[i];
  });
}

Var scale(Tape& tape, Var x, double factor) {
  Matrix out = tape.value(x);
  for (auto& v : out.values()) v *= factor;
  return tape.record(std::move(out), [x, factor, out_id = tape.node_count()](Tape& t) {
    const auto g = t.grad(Var{out_id}).values();
    auto gx = t.grad_buffer(x).values();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var mean_row_loss(Tape& tape, Var x, const RowLossFn& loss) {
  const Matrix& in = tape.value(x);
  if (in.rows() == 0) throw std::invalid_argument("mean_row_loss: empty batch");
  Matrix row_grads(in.rows(), in.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < in.rows(); ++i) {
    total += loss(i, in.row(i), row_grads.row(i));
  }
  const double inv_n = 1.0 / static_cast<double>(in.rows());
  return tape.record(Matrix(1, 1, total * inv_n),
                     [x, inv_n, row_grads = std::move(row_grads), out_id = tape.node_count()](Tape& t) {
                       const double g = t.grad(Var{out_id})(0, 0) * inv_n;
                       auto gx = t.grad_buffer(x).values();
                       const auto rg = row_grads.values();
                       for (std::size_t i = 0; i < rg.size(); ++i) gx[i] += g * rg[i];
                     });
}

}  // namespace cmsf
