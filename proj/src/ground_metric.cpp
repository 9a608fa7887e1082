#include "otmatch/ground_metric.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace otmatch::metric {

EmbeddingSet EmbeddingSet::from(Eigen::MatrixXd m) {
  require(m.rows() >= 1 && m.cols() >= 1, ErrorKind::InvalidArgument,
          "embedding set must be non-empty");
  require(m.allFinite(), ErrorKind::NonFinite, "embedding set has non-finite entries");
  return EmbeddingSet{std::move(m)};
}

InteractionMatrix InteractionMatrix::validated(Eigen::MatrixXd m) {
  require(m.rows() == m.cols(), ErrorKind::DimensionMismatch,
          "interaction matrix must be square");
  require(m.allFinite(), ErrorKind::NonFinite,
          "interaction matrix has non-finite entries");
  require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-9, ErrorKind::InvalidArgument,
          "interaction matrix must be symmetric within 1e-9");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  require(es.eigenvalues().minCoeff() >= -1e-10, ErrorKind::NonPSD,
          "interaction matrix must be positive semidefinite");
  return InteractionMatrix{std::move(m)};
}

Eigen::MatrixXd cosine_similarity_grid(const Eigen::MatrixXd& za,
                                       const Eigen::MatrixXd& zb) {
  require(za.cols() == zb.cols(), ErrorKind::DimensionMismatch,
          "embedding sets have different dimensions");
  Eigen::MatrixXd a = za, b = zb;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    a.row(i) /= std::max(a.row(i).norm(), kCosineNormFloor);
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    b.row(j) /= std::max(b.row(j).norm(), kCosineNormFloor);
  return a * b.transpose();
}

namespace {

Eigen::MatrixXd cosine_distance_grid(const Eigen::MatrixXd& za,
                                     const Eigen::MatrixXd& zb) {
  return (-cosine_similarity_grid(za, zb)).array() + 1.0;
}

}  // namespace

Eigen::MatrixXd pairwise_cost_grid(const Eigen::MatrixXd& za,
                                   const Eigen::MatrixXd& zb,
                                   const GroundMetric& metric) {
  require(za.cols() == zb.cols(), ErrorKind::DimensionMismatch,
          "embedding sets have different dimensions");
  const Eigen::Index n = za.rows(), m = zb.rows(), d = za.cols();

  switch (metric.kind) {
    case MetricKind::Euclidean: {
      Eigen::MatrixXd out(n, m);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
          out(i, j) = (za.row(i) - zb.row(j)).norm();
      return out;
    }
    case MetricKind::CosineDistance:
      return cosine_distance_grid(za, zb);
    case MetricKind::Mahalanobis: {
      require(metric.interaction.dim() == d, ErrorKind::DimensionMismatch,
              "interaction matrix dimension does not match embeddings");
      const Eigen::MatrixXd& M = metric.interaction.M;
      Eigen::MatrixXd out(n, m);
      Eigen::RowVectorXd diff(d);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
          diff = za.row(i) - zb.row(j);
          double q = diff * M * diff.transpose();
          require(q >= -1e-6, ErrorKind::NonPSD,
                  "Mahalanobis quadratic form is significantly negative");
          out(i, j) = std::sqrt(std::max(q, kMahalanobisSqrtFloor));
        }
      return out;
    }
  }
  throw Error(ErrorKind::InvalidArgument, "unknown metric kind");
}

ot::CostMatrix pairwise_cost(const EmbeddingSet& za, const EmbeddingSet& zb,
                             const GroundMetric& metric) {
  return ot::CostMatrix::from(pairwise_cost_grid(za.vectors, zb.vectors, metric));
}

InteractionMatrix project_psd(const Eigen::MatrixXd& raw) {
  require(raw.rows() == raw.cols(), ErrorKind::DimensionMismatch,
          "projection input must be square");
  require(raw.allFinite(), ErrorKind::NonFinite, "projection input is non-finite");

  Eigen::MatrixXd sym = 0.5 * (raw + raw.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  Eigen::VectorXd clipped = es.eigenvalues().cwiseMax(kPsdEigenvalueFloor);
  Eigen::MatrixXd rebuilt =
      es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  // Reconstruction reintroduces last-ulp asymmetry; symmetrize once more.
  rebuilt = 0.5 * (rebuilt + rebuilt.transpose());
  return InteractionMatrix::unchecked(std::move(rebuilt));
}

InteractionMatrix init_interaction(Eigen::Index d, std::uint64_t seed) {
  require(d >= 1, ErrorKind::InvalidArgument, "dimension must be >= 1");
  Rng rng(seed);
  Eigen::MatrixXd A(d, d);
  rng.fill_gaussian(A, 0.0, 0.1);  // variance 0.01
  Eigen::MatrixXd base =
      0.5 * (A + A.transpose()) + Eigen::MatrixXd::Identity(d, d);
  return project_psd(base);
}

}  // namespace otmatch::metric
