#pragma once

// Pairwise ground costs between embedding sets (Euclidean, cosine distance,
// or a learned Mahalanobis form) and maintenance of the symmetric positive
// semidefinite interaction matrix behind the Mahalanobis variant.

#include <Eigen/Dense>

#include "otmatch/common.hpp"
#include "otmatch/ot_solver.hpp"

namespace otmatch::metric {

// b x d embeddings in the shared space; rows are items.
struct EmbeddingSet {
  Eigen::MatrixXd vectors;

  static EmbeddingSet from(Eigen::MatrixXd m);

  Eigen::Index count() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
};

// Symmetric PSD d x d matrix. Construct through validated() (checks symmetry
// within 1e-9 and min eigenvalue >= -1e-10), through project_psd(), or
// through unchecked() when the caller guarantees the invariants.
struct InteractionMatrix {
  Eigen::MatrixXd M;

  static InteractionMatrix validated(Eigen::MatrixXd m);
  static InteractionMatrix unchecked(Eigen::MatrixXd m) {
    return InteractionMatrix{std::move(m)};
  }

  Eigen::Index dim() const { return M.rows(); }
};

enum class MetricKind { Euclidean, CosineDistance, Mahalanobis };

struct GroundMetric {
  MetricKind kind = MetricKind::Euclidean;
  InteractionMatrix interaction;  // used only by Mahalanobis

  static GroundMetric euclidean() { return GroundMetric{MetricKind::Euclidean, {}}; }
  static GroundMetric cosine() { return GroundMetric{MetricKind::CosineDistance, {}}; }
  static GroundMetric mahalanobis(InteractionMatrix m) {
    return GroundMetric{MetricKind::Mahalanobis, std::move(m)};
  }
};

// Floor inside the Mahalanobis square root: keeps the gradient finite when a
// matched pair nearly coincides.
inline constexpr double kMahalanobisSqrtFloor = 1e-12;

// Row norms below this floor are treated as the floor when normalizing for
// cosine similarity, keeping the similarity defined for near-zero vectors.
inline constexpr double kCosineNormFloor = 1e-12;

// Entry (i, j) = distance between za_i and zb_j under the metric.
// Euclidean: sqrt(sum of squared differences) (exactly 0 on identical rows).
// CosineDistance: 1 - cosine similarity, in [0, 2]; row norms floored at 1e-12.
// Mahalanobis: sqrt(max(q, 1e-12)) with q = (f-g)^T M (f-g); throws NonPSD if
// any quadratic form falls below -1e-6 (a corrupted M).
ot::CostMatrix pairwise_cost(const EmbeddingSet& za, const EmbeddingSet& zb,
                             const GroundMetric& metric);

// Raw pairwise cost grid without the CostMatrix square/size validation
// (evaluation ranks rectangular query-candidate grids).
// Cosine similarity between all row pairs, with row norms floored at
// kCosineNormFloor. Shared by the cosine ground cost (1 - similarity) and
// the similarity-based baseline losses and retrieval scoring.
Eigen::MatrixXd cosine_similarity_grid(const Eigen::MatrixXd& za,
                                       const Eigen::MatrixXd& zb);

Eigen::MatrixXd pairwise_cost_grid(const Eigen::MatrixXd& za,
                                   const Eigen::MatrixXd& zb,
                                   const GroundMetric& metric);

// Nearest-PSD projection: symmetrize (raw + raw^T)/2, eigendecompose, clip
// eigenvalues below 1e-8, reconstruct.
InteractionMatrix project_psd(const Eigen::MatrixXd& raw);

inline constexpr double kPsdEigenvalueFloor = 1e-8;

// M = project_psd(0.5 (A + A^T) + I) with A drawn i.i.d. N(0, 0.01).
// Deterministic given seed.
InteractionMatrix init_interaction(Eigen::Index d, std::uint64_t seed);

}  // namespace otmatch::metric
