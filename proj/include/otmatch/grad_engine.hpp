#pragma once

// Minimal purpose-built reverse-mode differentiation engine covering exactly
// the primitives of the matching pipeline: affine maps, tanh, pairwise
// quadratic forms, cosine similarity, square root with floor, log-sum-exp
// reductions, and the bookkeeping ops needed to unroll Sinkhorn iterations
// in the log domain. Values are computed eagerly as ops are recorded, so the
// Sinkhorn loop can make data-dependent stopping decisions; the backward
// sweep then visits recorded ops exactly once in reverse order.
//
// Memory note: the log-sum-exp ops never materialize the b x b intermediate
// S + bias; they store only the reduced vector and recompute the softmax
// weights during the backward sweep, keeping the per-iteration footprint at
// O(b) instead of O(b^2).

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "otmatch/common.hpp"
#include "otmatch/ground_metric.hpp"
#include "otmatch/ot_solver.hpp"

namespace otmatch::grad {

using NodeId = int;

enum class OpKind : std::uint8_t {
  Leaf,           // value; param leaves participate in backward
  MatMul,         // A * B
  AddBias,        // A(i,j) + bias(j)
  Tanh,           // elementwise
  PairQuad,       // Q(i,j) = (a_i - b_j)^T M (a_i - b_j)
  CosSim,         // S(i,j) = <a_i/|a_i|, b_j/|b_j|>, norms floored at 1e-12
  SqrtFloor,      // sqrt(max(x, aux)), zero gradient at/below the floor
  ClampMin,       // max(x, aux), gradient passes only above the floor
  Affine,         // aux * x + aux2 (elementwise)
  Add2,           // aux * A + aux2 * B (same shape)
  SumAll,         // scalar sum of all entries
  MaxEntry,       // scalar max entry; subgradient to the first argmax
  AugmentPartial, // (b+1)x(b+1): top-left block A, corner = scalar input
  LseRows,        // out(i) = log sum_j exp(S(i,j) + bias(j)); bias optional
  LseCols,        // out(j) = log sum_i exp(S(i,j) + bias(i)); bias optional
  LogPiDiag,      // out(i) = S(i,i) + phi(i) + psi(i), i < iaux
  DiagVec,        // out(i) = S(i,i), i < iaux
  RowMaxOffdiag,  // out(i) = max_{j != i} S(i,j); subgradient to first argmax
  ColMaxOffdiag,  // out(j) = max_{i != j} S(i,j)
};

struct Node {
  OpKind kind = OpKind::Leaf;
  NodeId a = -1, b = -1, c = -1;
  double aux = 0.0, aux2 = 0.0;
  Eigen::Index iaux = 0;
  bool needs = false;     // does any parameter leaf feed this node?
  bool received = false;  // did backward accumulate anything here?
  Eigen::MatrixXd val;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd ex1, ex2;        // op-specific caches (CosSim normals)
  std::vector<Eigen::Index> args;  // op-specific argmax indices
};

class Tape {
 public:
  NodeId constant(Eigen::MatrixXd v);
  NodeId param(Eigen::MatrixXd v);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add_bias(NodeId a, NodeId bias);
  NodeId tanh(NodeId a);
  NodeId pair_quad(NodeId a, NodeId b, NodeId m);
  NodeId cos_sim(NodeId a, NodeId b);
  NodeId sqrt_floor(NodeId a, double floor);
  NodeId clamp_min(NodeId a, double floor);
  NodeId affine(NodeId a, double alpha, double beta);
  NodeId add2(NodeId a, NodeId b, double alpha, double beta);
  NodeId sum_all(NodeId a);
  NodeId max_entry(NodeId a);
  NodeId augment_partial(NodeId cost, NodeId corner);
  NodeId lse_rows(NodeId s, NodeId bias /*-1 for none*/);
  NodeId lse_cols(NodeId s, NodeId bias);
  NodeId log_pi_diag(NodeId s, NodeId phi, NodeId psi, Eigen::Index count);
  NodeId diag_vec(NodeId s, Eigen::Index count);
  NodeId row_max_offdiag(NodeId s);
  NodeId col_max_offdiag(NodeId s);

  const Eigen::MatrixXd& val(NodeId id) const { return nodes_[id].val; }
  double scalar(NodeId id) const { return nodes_[id].val(0, 0); }

  // Runs the reverse sweep from a scalar output. Gradients from a previous
  // sweep are discarded; two sweeps over the same tape produce bit-identical
  // results.
  void backward(NodeId output);

  // Zero matrix of the leaf's shape if the sweep never reached it.
  Eigen::MatrixXd grad(NodeId id) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  NodeId push(Node n);
  std::vector<Node> nodes_;
};

// ---- pipeline builders ----------------------------------------------------

// Pairwise ground cost between embedding nodes; M ignored unless Mahalanobis
// (Euclidean routes through PairQuad with a constant identity M, matching the
// value-path cost entries exactly; the square-root floor applies in-tape).
NodeId build_cost(Tape& tape, NodeId za, NodeId zb, metric::MetricKind kind,
                  NodeId m_node);

struct SinkhornUnroll {
  NodeId log_diag = -1;  // node holding log pi_ii for the b real pairs
  int iterations_used = 0;
  bool converged = false;
};

// Unrolls the exact solver recursion on the tape (same kernels, same update
// order, same stopping rule). mass = 1 runs the full problem; mass < 1 builds
// the dummy-augmented problem and returns the real diagonal only.
SinkhornUnroll build_sinkhorn_log_diag(Tape& tape, NodeId cost, double mass,
                                       const ot::SinkhornConfig& config);

// KL(target-diagonal || plan) restricted to the diagonal support:
// full: -(1/b) sum log pi_ii - log b; partial: -(s/b) sum log pi_ii
// + s log(s/b). log pi_ii is floored at log(1e-30).
NodeId build_matching_loss(Tape& tape, NodeId cost, double mass,
                           const ot::SinkhornConfig& config,
                           SinkhornUnroll* unroll_out = nullptr);

NodeId build_contrastive_loss(Tape& tape, NodeId za, NodeId zb, double temperature);
NodeId build_triplet_loss(Tape& tape, NodeId za, NodeId zb, double margin);

// ---- embedding-level gradient API ------------------------------------------

struct GradBundle {
  std::vector<Eigen::MatrixXd> grad_theta;  // modality-X parameter grids
  std::vector<Eigen::MatrixXd> grad_phi;    // modality-Y parameter grids
  Eigen::MatrixXd grad_M;                   // empty unless Mahalanobis
};

// Loss and exact gradients of the matching loss with respect to the raw
// embedding grids (and M for the Mahalanobis metric), differentiated through
// the unrolled Sinkhorn iterations. mass = 1 gives the full matching loss;
// mass < 1 the partial variant.
std::pair<double, GradBundle> backward_mltm(const metric::EmbeddingSet& za,
                                            const metric::EmbeddingSet& zb,
                                            const metric::GroundMetric& metric,
                                            const ot::SinkhornConfig& config,
                                            double mass);

// A differentiation point for the finite-difference checker.
struct MltmPoint {
  Eigen::MatrixXd za, zb;
  metric::MetricKind metric = metric::MetricKind::Euclidean;
  Eigen::MatrixXd M;  // used when metric == Mahalanobis
  double epsilon = 0.1;
  double mass = 1.0;
  ot::SinkhornConfig base_config{0.1, 2000, 1e-6};
};

// Central-difference check of the tape gradient on direction_count randomly
// chosen parameter coordinates (embeddings, plus M under Mahalanobis).
// The Sinkhorn iteration count is frozen at the base point's count for the
// tape pass and both offset evaluations, so the same smooth function is
// differentiated and evaluated. Returns the max relative error
// |g_tape - g_fd| / max(|g_fd|, 1e-8).
double finite_diff_check(const MltmPoint& point, int direction_count, double h,
                         std::uint64_t seed);

}  // namespace otmatch::grad
