#pragma once

// Retrieval evaluation: full cross-modal score grids, recall-at-k in both
// query directions with a deterministic lowest-index tie-break, and the
// modality-gap metric (distance between the centroids of the two modalities'
// unit-normalized embeddings).

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "otmatch/data.hpp"
#include "otmatch/ground_metric.hpp"
#include "otmatch/model.hpp"

namespace otmatch::eval {

// Score grid over a test split: rows are modality-X items, columns are
// modality-Y items, higher scores mean better matches.
struct RankingMatrix {
  Eigen::MatrixXd scores;
  std::string kind;  // "negated-cost" or "cosine"
};

struct RetrievalReport {
  double r1_a2t = 0.0, r5_a2t = 0.0, r10_a2t = 0.0;  // row queries (x -> y)
  double r1_t2a = 0.0, r5_t2a = 0.0, r10_t2a = 0.0;  // column queries (y -> x)
  double modality_gap = 0.0;

  double avg_r1() const { return 0.5 * (r1_a2t + r1_t2a); }
};

// 1-based rank of a candidate among a score list: 1 + (number of strictly
// better candidates) + (number of equal candidates with a lower index).
Eigen::Index rank_in_row(const Eigen::MatrixXd& scores, Eigen::Index row,
                         Eigen::Index truth_col);
Eigen::Index rank_in_col(const Eigen::MatrixXd& scores, Eigen::Index col,
                         Eigen::Index truth_row);

// Percentage of row queries i whose true column alignment[i] ranks in the
// top k of row i; alignment must be a permutation of the column indices.
double recall_at_k_rows(const Eigen::MatrixXd& scores,
                        const std::vector<Eigen::Index>& alignment, int k);
// Percentage of column queries j whose true row (the i with alignment[i] == j)
// ranks in the top k of column j.
double recall_at_k_cols(const Eigen::MatrixXd& scores,
                        const std::vector<Eigen::Index>& alignment, int k);

// ||mean(normalized za rows) - mean(normalized zb rows)||_2; raises
// ZeroVector if any row norm is below 1e-12.
double modality_gap(const Eigen::MatrixXd& za, const Eigen::MatrixXd& zb);

// Encodes both sides with the checkpoint's encoders and scores every query
// against every candidate: negated learned ground cost for matching-loss
// checkpoints, cosine similarity for contrastive/triplet checkpoints.
RankingMatrix rank(const model::Checkpoint& ckpt, const Eigen::MatrixXd& xs,
                   const Eigen::MatrixXd& ys);

// Full report (R@{1,5,10} both directions + modality gap) on a test split,
// using the split's alignment as ground truth.
RetrievalReport evaluate_checkpoint(const model::Checkpoint& ckpt,
                                    const data::PairedDataset& test);

}  // namespace otmatch::eval
