#pragma once

// Internal numeric kernels shared by the transport solver and the gradient
// tape. Both must execute the exact same floating-point sequence so that a
// taped forward pass reproduces the solver's plan bit-for-bit.

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace otmatch::kernels {

// out[i] = log sum_j exp(S(i,j) + bias[j]); bias may be null (treated as 0).
inline void lse_rows(const Eigen::MatrixXd& S, const Eigen::VectorXd* bias,
                     Eigen::VectorXd& out) {
  const Eigen::Index n = S.rows(), m = S.cols();
  out.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      double v = S(i, j) + (bias ? (*bias)(j) : 0.0);
      if (v > mx) mx = v;
    }
    if (!(mx > -std::numeric_limits<double>::infinity())) {
      out(i) = -std::numeric_limits<double>::infinity();
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      double v = S(i, j) + (bias ? (*bias)(j) : 0.0);
      acc += std::exp(v - mx);
    }
    out(i) = mx + std::log(acc);
  }
}

// out[j] = log sum_i exp(S(i,j) + bias[i]); bias may be null.
inline void lse_cols(const Eigen::MatrixXd& S, const Eigen::VectorXd* bias,
                     Eigen::VectorXd& out) {
  const Eigen::Index n = S.rows(), m = S.cols();
  out.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = S(i, j) + (bias ? (*bias)(i) : 0.0);
      if (v > mx) mx = v;
    }
    if (!(mx > -std::numeric_limits<double>::infinity())) {
      out(j) = -std::numeric_limits<double>::infinity();
      continue;
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = S(i, j) + (bias ? (*bias)(i) : 0.0);
      acc += std::exp(v - mx);
    }
    out(j) = mx + std::log(acc);
  }
}

// Max row-marginal violation of the scaled plan exp(phi_i + L1_i) vs a_i,
// where L1 = lse_rows(S, psi). The solver checks this at the top of each
// iteration after the first.
inline double row_violation(const Eigen::VectorXd& phi,
                            const Eigen::VectorXd& L1,
                            const Eigen::VectorXd& a) {
  double viol = 0.0;
  for (Eigen::Index i = 0; i < phi.size(); ++i) {
    double v = std::abs(std::exp(phi(i) + L1(i)) - a(i));
    if (v > viol) viol = v;
  }
  return viol;
}

}  // namespace otmatch::kernels
