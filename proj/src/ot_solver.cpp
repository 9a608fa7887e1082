#include "otmatch/ot_solver.hpp"

#include <cmath>
#include <limits>

#include "otmatch/kernels.hpp"

namespace otmatch::ot {

CostMatrix CostMatrix::from(Eigen::MatrixXd m) {
  require(m.rows() == m.cols(), ErrorKind::InvalidArgument,
          "cost matrix must be square");
  require(m.rows() >= 2, ErrorKind::InvalidArgument,
          "cost matrix needs batch size >= 2");
  require(m.allFinite(), ErrorKind::NonFinite, "cost matrix has non-finite entries");
  require((m.array() >= 0.0).all(), ErrorKind::InvalidArgument,
          "cost matrix has negative entries");
  return CostMatrix{std::move(m)};
}

void SinkhornConfig::validate() const {
  require(epsilon > 0.0, ErrorKind::InvalidArgument, "epsilon must be > 0");
  require(tolerance > 0.0, ErrorKind::InvalidArgument, "tolerance must be > 0");
  require(max_iters >= 1, ErrorKind::InvalidArgument, "max_iters must be >= 1");
}

namespace {

// Core log-domain loop over arbitrary positive marginals a (rows), b (cols).
// Scaling convention: log pi = S + phi 1^T + 1 psi^T with S = -C/eps.
// psi starts at log(b); each iteration updates phi from the row constraint,
// then psi from the column constraint, so column sums are exact on exit.
struct CoreResult {
  Eigen::MatrixXd S;  // -C/eps, reused to build the plan
  Eigen::VectorXd phi, psi;
  int iterations_used = 0;
  double violation = 0.0;
  bool converged = false;
};

CoreResult sinkhorn_core(const Eigen::MatrixXd& C, const Eigen::VectorXd& a,
                         const Eigen::VectorXd& b, const SinkhornConfig& cfg) {
  const Eigen::Index n = C.rows();
  const Eigen::VectorXd loga = a.array().log().matrix();
  const Eigen::VectorXd logb = b.array().log().matrix();

  CoreResult r;
  r.S = (-1.0 / cfg.epsilon) * C;
  const Eigen::MatrixXd& S = r.S;
  r.phi = Eigen::VectorXd::Zero(n);
  r.psi = logb;
  r.violation = std::numeric_limits<double>::infinity();

  Eigen::VectorXd L1(n), L2(n);
  for (int t = 0; t < cfg.max_iters; ++t) {
    kernels::lse_rows(S, &r.psi, L1);
    if (t > 0) {
      r.violation = kernels::row_violation(r.phi, L1, a);
      if (r.violation < cfg.tolerance) {
        r.converged = true;
        return r;
      }
    }
    r.phi = loga - L1;
    kernels::lse_cols(S, &r.phi, L2);
    r.psi = logb - L2;
    r.iterations_used = t + 1;
  }
  kernels::lse_rows(S, &r.psi, L1);
  r.violation = kernels::row_violation(r.phi, L1, a);
  r.converged = r.violation < cfg.tolerance;
  return r;
}

Eigen::MatrixXd plan_from_potentials(const Eigen::MatrixXd& S,
                                     const Eigen::VectorXd& phi,
                                     const Eigen::VectorXd& psi) {
  const Eigen::Index n = S.rows();
  Eigen::MatrixXd plan(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      plan(i, j) = std::exp(S(i, j) + phi(i) + psi(j));
  return plan;
}

}  // namespace

TransportPlan sinkhorn(const CostMatrix& cost, const SinkhornConfig& config) {
  config.validate();
  const Eigen::Index b = cost.size();
  const Eigen::VectorXd marginal = Eigen::VectorXd::Constant(b, 1.0 / double(b));

  CoreResult core = sinkhorn_core(cost.values, marginal, marginal, config);
  require(core.phi.allFinite() && core.psi.allFinite(), ErrorKind::NonFinite,
          "sinkhorn scalings became non-finite");

  TransportPlan plan;
  plan.values = plan_from_potentials(core.S, core.phi, core.psi);
  require(plan.values.allFinite(), ErrorKind::NonFinite,
          "sinkhorn plan became non-finite");
  plan.total_mass = plan.values.sum();
  plan.log_u = core.phi;
  plan.log_v = core.psi;
  plan.iterations_used = core.iterations_used;
  plan.marginal_violation = core.violation;
  plan.converged = core.converged;
  plan.is_partial = false;
  return plan;
}

TransportPlan partial_sinkhorn(const CostMatrix& cost, double mass,
                               const SinkhornConfig& config) {
  config.validate();
  require(mass > 0.0 && mass <= 1.0, ErrorKind::MassOutOfRange,
          "transported mass must lie in (0, 1]");
  if (mass == 1.0) return sinkhorn(cost, config);

  const Eigen::Index b = cost.size();
  const double xi = 2.0 * cost.values.maxCoeff() + 1.0;

  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(b + 1, b + 1);
  aug.topLeftCorner(b, b) = cost.values;
  aug(b, b) = xi;

  Eigen::VectorXd marginal = Eigen::VectorXd::Constant(b + 1, 1.0 / double(b));
  marginal(b) = 1.0 - mass;

  CoreResult core = sinkhorn_core(aug, marginal, marginal, config);
  require(core.phi.allFinite() && core.psi.allFinite(), ErrorKind::NonFinite,
          "partial sinkhorn scalings became non-finite");

  Eigen::MatrixXd full = plan_from_potentials(core.S, core.phi, core.psi);
  require(full.allFinite(), ErrorKind::NonFinite,
          "partial sinkhorn plan became non-finite");

  TransportPlan plan;
  plan.values = full.topLeftCorner(b, b);
  plan.total_mass = plan.values.sum();
  plan.log_u = core.phi.head(b);
  plan.log_v = core.psi.head(b);
  plan.iterations_used = core.iterations_used;
  plan.marginal_violation = core.violation;
  plan.converged = core.converged;
  plan.is_partial = true;
  return plan;
}

double plan_marginal_violation(const TransportPlan& plan) {
  const Eigen::Index b = plan.size();
  const double expected = 1.0 / double(b);
  double viol = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    double rs = plan.values.row(i).sum();
    double cs = plan.values.col(i).sum();
    if (plan.is_partial) {
      viol = std::max(viol, std::max(0.0, rs - expected));
      viol = std::max(viol, std::max(0.0, cs - expected));
    } else {
      viol = std::max(viol, std::abs(rs - expected));
      viol = std::max(viol, std::abs(cs - expected));
    }
  }
  return viol;
}

double plan_entropy(const TransportPlan& plan) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < plan.values.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.values.cols(); ++j) {
      double p = plan.values(i, j);
      if (p > 0.0) h -= p * std::log(p);
    }
  return h;
}

}  // namespace otmatch::ot
