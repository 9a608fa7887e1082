#include "otmatch/eval.hpp"

#include <algorithm>
#include <cmath>

#include "otmatch/common.hpp"

namespace otmatch::eval {

namespace {

constexpr double kNormFloor = 1e-12;

void check_alignment(const Eigen::MatrixXd& scores,
                     const std::vector<Eigen::Index>& alignment) {
  require(static_cast<Eigen::Index>(alignment.size()) == scores.rows(),
          ErrorKind::LengthMismatch,
          "alignment length must equal the number of row queries");
  for (const Eigen::Index a : alignment) {
    require(a >= 0 && a < scores.cols(), ErrorKind::InvalidArgument,
            "alignment entry outside the candidate range");
  }
}

}  // namespace

Eigen::Index rank_in_row(const Eigen::MatrixXd& scores, Eigen::Index row,
                         Eigen::Index truth_col) {
  const double truth = scores(row, truth_col);
  Eigen::Index rank = 1;
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    if (scores(row, j) > truth || (scores(row, j) == truth && j < truth_col)) {
      ++rank;
    }
  }
  return rank;
}

Eigen::Index rank_in_col(const Eigen::MatrixXd& scores, Eigen::Index col,
                         Eigen::Index truth_row) {
  const double truth = scores(truth_row, col);
  Eigen::Index rank = 1;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (scores(i, col) > truth || (scores(i, col) == truth && i < truth_row)) {
      ++rank;
    }
  }
  return rank;
}

double recall_at_k_rows(const Eigen::MatrixXd& scores,
                        const std::vector<Eigen::Index>& alignment, int k) {
  check_alignment(scores, alignment);
  require(k >= 1, ErrorKind::InvalidArgument, "k must be at least 1");
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (rank_in_row(scores, i, alignment[static_cast<std::size_t>(i)]) <= k) {
      ++hits;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(scores.rows());
}

double recall_at_k_cols(const Eigen::MatrixXd& scores,
                        const std::vector<Eigen::Index>& alignment, int k) {
  check_alignment(scores, alignment);
  require(k >= 1, ErrorKind::InvalidArgument, "k must be at least 1");
  // Column query alignment[i] has true row i.
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::Index col = alignment[static_cast<std::size_t>(i)];
    if (rank_in_col(scores, col, i) <= k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(scores.rows());
}

double modality_gap(const Eigen::MatrixXd& za, const Eigen::MatrixXd& zb) {
  require(za.cols() == zb.cols(), ErrorKind::DimensionMismatch,
          "embedding sets have different dimensions");
  require(za.rows() >= 1 && zb.rows() >= 1, ErrorKind::InvalidArgument,
          "modality gap needs non-empty embedding sets");
  const auto centroid = [](const Eigen::MatrixXd& z) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double norm = z.row(i).norm();
      require(norm >= kNormFloor, ErrorKind::ZeroVector,
              "cannot normalize a zero embedding");
      mean += z.row(i) / norm;
    }
    return Eigen::RowVectorXd(mean / static_cast<double>(z.rows()));
  };
  return (centroid(za) - centroid(zb)).norm();
}

RankingMatrix rank(const model::Checkpoint& ckpt, const Eigen::MatrixXd& xs,
                   const Eigen::MatrixXd& ys) {
  const Eigen::MatrixXd za = model::forward_encode(ckpt.encoders.enc_x, xs);
  const Eigen::MatrixXd zb = model::forward_encode(ckpt.encoders.enc_y, ys);
  RankingMatrix out;
  const losses::LossKind kind = ckpt.config.loss.kind;
  if (kind == losses::LossKind::MLTM || kind == losses::LossKind::MLTM_POT) {
    out.scores = -metric::pairwise_cost_grid(za, zb, ckpt.ground_metric());
    out.kind = "negated-cost";
  } else {
    out.scores = metric::cosine_similarity_grid(za, zb);
    out.kind = "cosine";
  }
  require(out.scores.allFinite(), ErrorKind::NonFinite,
          "ranking scores are non-finite");
  return out;
}

RetrievalReport evaluate_checkpoint(const model::Checkpoint& ckpt,
                                    const data::PairedDataset& test) {
  require(test.count() >= 1, ErrorKind::InvalidArgument,
          "test split is empty");
  const Eigen::MatrixXd xs = test.xs.cast<double>();
  const Eigen::MatrixXd ys = test.ys.cast<double>();
  const RankingMatrix ranking = rank(ckpt, xs, ys);

  RetrievalReport report;
  report.r1_a2t = recall_at_k_rows(ranking.scores, test.alignment, 1);
  report.r5_a2t = recall_at_k_rows(ranking.scores, test.alignment, 5);
  report.r10_a2t = recall_at_k_rows(ranking.scores, test.alignment, 10);
  report.r1_t2a = recall_at_k_cols(ranking.scores, test.alignment, 1);
  report.r5_t2a = recall_at_k_cols(ranking.scores, test.alignment, 5);
  report.r10_t2a = recall_at_k_cols(ranking.scores, test.alignment, 10);

  const Eigen::MatrixXd za = model::forward_encode(ckpt.encoders.enc_x, xs);
  const Eigen::MatrixXd zb = model::forward_encode(ckpt.encoders.enc_y, ys);
  report.modality_gap = modality_gap(za, zb);
  return report;
}

}  // namespace otmatch::eval
