#include "otmatch/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "otmatch/common.hpp"
#include "otmatch/kernels.hpp"

namespace otmatch::losses {

namespace {

constexpr double kDiagFloor = 1e-30;

ot::SinkhornConfig resolve_config(double epsilon,
                                  const ot::SinkhornConfig* overrides) {
  ot::SinkhornConfig cfg;
  if (overrides != nullptr) cfg = *overrides;
  cfg.epsilon = epsilon;
  return cfg;
}

double diag_kl(const ot::TransportPlan& plan, double per_pair_mass) {
  const Eigen::Index b = plan.size();
  double sum_log = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    sum_log += std::log(std::max(plan.values(i, i), kDiagFloor));
  }
  // sum_i w * (log w - log pi_ii) with w = per-pair target mass.
  return per_pair_mass *
         (static_cast<double>(b) * std::log(per_pair_mass) - sum_log);
}

}  // namespace

const char* loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::MLTM:
      return "mltm";
    case LossKind::MLTM_POT:
      return "mltm-pot";
    case LossKind::Contrastive:
      return "contrastive";
    case LossKind::Triplet:
      return "triplet";
  }
  return "unknown";
}

double mltm_loss(const metric::EmbeddingSet& za, const metric::EmbeddingSet& zb,
                 const metric::GroundMetric& metric, double epsilon,
                 const ot::SinkhornConfig* solver_config) {
  require(za.count() == zb.count(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");
  const auto cost = metric::pairwise_cost(za, zb, metric);
  const auto plan = ot::sinkhorn(cost, resolve_config(epsilon, solver_config));
  return diag_kl(plan, 1.0 / static_cast<double>(plan.size()));
}

double mltm_pot_loss(const metric::EmbeddingSet& za,
                     const metric::EmbeddingSet& zb,
                     const metric::GroundMetric& metric, double epsilon,
                     double mass, const ot::SinkhornConfig* solver_config) {
  require(za.count() == zb.count(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");
  const auto cost = metric::pairwise_cost(za, zb, metric);
  const auto plan =
      ot::partial_sinkhorn(cost, mass, resolve_config(epsilon, solver_config));
  return diag_kl(plan, mass / static_cast<double>(plan.size()));
}

double contrastive_loss(const metric::EmbeddingSet& za,
                        const metric::EmbeddingSet& zb, double temperature) {
  require(temperature > 0.0, ErrorKind::InvalidArgument,
          "temperature must be positive");
  require(za.count() == zb.count(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");
  const Eigen::Index b = za.count();
  const Eigen::MatrixXd logits =
      metric::cosine_similarity_grid(za.vectors, zb.vectors) / temperature;
  Eigen::VectorXd row_lse(b), col_lse(b);
  kernels::lse_rows(logits, nullptr, row_lse);
  kernels::lse_cols(logits, nullptr, col_lse);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    total += (row_lse(i) - logits(i, i)) + (col_lse(i) - logits(i, i));
  }
  return total / static_cast<double>(b);
}

double triplet_loss(const metric::EmbeddingSet& za,
                    const metric::EmbeddingSet& zb, double margin) {
  require(margin > 0.0, ErrorKind::InvalidArgument, "margin must be positive");
  require(za.count() == zb.count(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");
  const Eigen::Index b = za.count();
  const Eigen::MatrixXd sims =
      metric::cosine_similarity_grid(za.vectors, zb.vectors);
  if (b < 2) return 0.0;  // no in-batch negatives to contrast against
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    double hardest_row = -std::numeric_limits<double>::infinity();
    double hardest_col = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j == i) continue;
      hardest_row = std::max(hardest_row, sims(i, j));
      hardest_col = std::max(hardest_col, sims(j, i));
    }
    total += std::max(0.0, margin - sims(i, i) + hardest_row);
    total += std::max(0.0, margin - sims(i, i) + hardest_col);
  }
  return total / static_cast<double>(b);
}

double loss_value(const metric::EmbeddingSet& za,
                  const metric::EmbeddingSet& zb,
                  const metric::GroundMetric& metric,
                  const LossConfig& config) {
  ot::SinkhornConfig solver{config.epsilon, config.sinkhorn_max_iters,
                            config.sinkhorn_tolerance};
  switch (config.kind) {
    case LossKind::MLTM:
      return mltm_loss(za, zb, metric, config.epsilon, &solver);
    case LossKind::MLTM_POT:
      return mltm_pot_loss(za, zb, metric, config.epsilon, config.mass,
                           &solver);
    case LossKind::Contrastive:
      return contrastive_loss(za, zb, config.temperature);
    case LossKind::Triplet:
      return triplet_loss(za, zb, config.margin);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown loss kind");
}

}  // namespace otmatch::losses
