#pragma once

// Batch matching losses over paired embedding sets: the entropic-matching
// loss (KL between the diagonal pairing target and the Sinkhorn plan), its
// partial-mass variant for corrupted correspondences, and the contrastive
// and triplet baselines. These are value-level evaluations; training-time
// gradients come from the tape in grad_engine.hpp, which encodes the same
// formulas.

#include "otmatch/ground_metric.hpp"
#include "otmatch/ot_solver.hpp"

namespace otmatch::losses {

enum class LossKind { MLTM, MLTM_POT, Contrastive, Triplet };

const char* loss_kind_name(LossKind kind);

// One bundle of loss hyperparameters; fields irrelevant to `kind` are ignored.
struct LossConfig {
  LossKind kind = LossKind::MLTM;
  double epsilon = 0.05;      // Sinkhorn regularization (matching losses)
  double mass = 1.0;          // transported mass s in (0,1] (partial variant)
  double temperature = 0.07;  // contrastive temperature
  double margin = 0.2;        // triplet margin
  int sinkhorn_max_iters = 2000;
  double sinkhorn_tolerance = 1e-6;
};

// KL(diagonal target || Sinkhorn plan) = -(1/b) sum_i log pi_ii - log b,
// with pi_ii floored at 1e-30 inside the log.
double mltm_loss(const metric::EmbeddingSet& za, const metric::EmbeddingSet& zb,
                 const metric::GroundMetric& metric, double epsilon,
                 const ot::SinkhornConfig* solver_config = nullptr);

// Partial-mass variant: the plan transports total mass s via the
// dummy-node-augmented problem, the target puts s/b on each diagonal entry,
// and the loss is the KL restricted to the real block:
// sum_i (s/b) log((s/b)/pi_ii) = -(s/b) sum_i log pi_ii + s log(s/b).
// At s = 1 this is exactly mltm_loss.
double mltm_pot_loss(const metric::EmbeddingSet& za,
                     const metric::EmbeddingSet& zb,
                     const metric::GroundMetric& metric, double epsilon,
                     double mass,
                     const ot::SinkhornConfig* solver_config = nullptr);

// Symmetric InfoNCE with cosine-similarity logits divided by the temperature;
// mean over the batch of both retrieval directions' cross-entropy terms.
double contrastive_loss(const metric::EmbeddingSet& za,
                        const metric::EmbeddingSet& zb, double temperature);

// Hardest-in-batch-negative hinge with cosine similarity, both directions:
// mean_i max(0, margin - s(a_i,b_i) + max_{j != i} s(a_i,b_j)) plus the
// symmetric column term.
double triplet_loss(const metric::EmbeddingSet& za,
                    const metric::EmbeddingSet& zb, double margin);

// Dispatch on config.kind.
double loss_value(const metric::EmbeddingSet& za,
                  const metric::EmbeddingSet& zb,
                  const metric::GroundMetric& metric, const LossConfig& config);

}  // namespace otmatch::losses
