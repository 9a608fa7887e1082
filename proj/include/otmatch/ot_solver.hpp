#pragma once

// Entropic optimal transport on minibatch cost matrices, solved by
// log-domain Sinkhorn iterations, plus a partial-transport variant that
// routes untransported mass through an appended dummy point.

#include <Eigen/Dense>

#include "otmatch/common.hpp"

namespace otmatch::ot {

// b x b nonnegative pairwise ground costs; rows index modality-X items,
// columns index modality-Y items.
struct CostMatrix {
  Eigen::MatrixXd values;

  // Validates: square, b >= 2, all entries finite and >= 0.
  static CostMatrix from(Eigen::MatrixXd m);

  Eigen::Index size() const { return values.rows(); }
};

struct SinkhornConfig {
  double epsilon = 0.05;
  int max_iters = 2000;
  double tolerance = 1e-6;

  void validate() const;
};

// A coupling with tracked marginals and total mass. For a full plan every
// row/column sums to 1/b within the solver tolerance; for a partial plan the
// sums are bounded above by 1/b and the entries total the transported mass.
struct TransportPlan {
  Eigen::MatrixXd values;
  double total_mass = 1.0;
  Eigen::VectorXd log_u;  // dual scalings, log domain (length b)
  Eigen::VectorXd log_v;
  int iterations_used = 0;
  double marginal_violation = 0.0;
  bool converged = false;
  bool is_partial = false;

  Eigen::Index size() const { return values.rows(); }
};

// The ground-truth pairing plan: diagonal with a fixed mass per pair
// (1/b for full matching, s/b for partial matching of mass s).
struct TargetPlan {
  Eigen::Index b = 0;
  double mass_per_pair = 0.0;
};

// Log-domain Sinkhorn with uniform 1/b marginals. Convergence is declared
// when the max row-marginal violation drops below config.tolerance (column
// marginals are exact after every iteration's final update). Hitting
// max_iters is not an error: the plan is returned with converged = false and
// the violation recorded.
TransportPlan sinkhorn(const CostMatrix& cost, const SinkhornConfig& config);

// Entropic partial OT transporting total mass s in (0, 1]: augments to a
// (b+1) x (b+1) problem with zero-cost dummy edges and corner cost
// 2*max(C) + 1, dummy marginal 1 - s, then returns the b x b sub-plan.
// s = 1 delegates to sinkhorn().
TransportPlan partial_sinkhorn(const CostMatrix& cost, double mass,
                               const SinkhornConfig& config);

// Max over rows/columns of the deviation from the expected marginal:
// |sum - 1/b| for full plans, max(0, sum - 1/b) for partial plans.
double plan_marginal_violation(const TransportPlan& plan);

// Shannon entropy -sum pi log pi (0 log 0 = 0), used by property tests.
double plan_entropy(const TransportPlan& plan);

}  // namespace otmatch::ot
