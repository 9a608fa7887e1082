#pragma once

// Dual MLP encoders, the Adam optimizer with a projected step for the
// interaction matrix, the mini-batch training loop, and checkpoint
// persistence ("MLTM" binary format, version-checked, CRC-protected).

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "otmatch/data.hpp"
#include "otmatch/grad_engine.hpp"
#include "otmatch/ground_metric.hpp"
#include "otmatch/losses.hpp"

namespace otmatch::model {

struct Layer {
  Eigen::MatrixXd weight;  // input_dim x output_dim (applied as x * W)
  Eigen::VectorXd bias;    // output_dim
  bool tanh_activation = false;
};

struct Encoder {
  std::vector<Layer> layers;

  Eigen::Index input_dim() const {
    return layers.empty() ? 0 : layers.front().weight.rows();
  }
  Eigen::Index output_dim() const {
    return layers.empty() ? 0 : layers.back().weight.cols();
  }
  void validate() const;  // nonempty, chained dims, finite parameters
};

struct EncoderPair {
  Encoder enc_x, enc_y;  // same output dimension
};

// Two-layer tanh MLP (hidden layer + linear head) with Xavier-style
// N(0, 1/fan_in) weight entries and zero biases, drawn from `rng`.
Encoder init_mlp_encoder(Eigen::Index input_dim, Eigen::Index hidden_dim,
                         Eigen::Index output_dim, Rng& rng);

// Applies the encoder layers to a b x input_dim grid (values only).
Eigen::MatrixXd forward_encode(const Encoder& encoder,
                               const Eigen::MatrixXd& inputs);

// Records the same computation on a tape; `inputs` is a constant leaf and
// the returned ids in `param_ids` correspond to encoder tensors in layer
// order (weight, bias, weight, bias, ...).
grad::NodeId encode_on_tape(grad::Tape& tape, const Encoder& encoder,
                            const Eigen::MatrixXd& inputs,
                            std::vector<grad::NodeId>& param_ids);

struct TrainConfig {
  losses::LossConfig loss;
  metric::MetricKind metric = metric::MetricKind::Mahalanobis;
  Eigen::Index batch_size = 256;  // clamped to the dataset size
  int epochs = 30;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Eigen::Index embedding_dim = 8;
  Eigen::Index hidden_dim = 64;

  void validate() const;
};

// First and second Adam moments for every trainable tensor, in the fixed
// order: enc_x tensors, enc_y tensors, then M when the metric is learned.
struct AdamState {
  std::vector<Eigen::MatrixXd> m, v;
  std::uint64_t step = 0;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint16_t version = kCheckpointVersion;
  TrainConfig config;
  EncoderPair encoders;
  Eigen::MatrixXd interaction;  // d x d; identity when the metric is fixed
  AdamState opt;
  int epoch = 0;

  metric::GroundMetric ground_metric() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_r1_t2a = 0.0;
  double val_r1_a2t = 0.0;
  double modality_gap = 0.0;
};

// Initialization exactly as train() performs it (encoders from the seed
// stream; M = project_psd(0.5 (A + A^T) + I) with A ~ N(0, 0.01) when the
// metric is learned, identity otherwise).
Checkpoint init_checkpoint(const data::PairedDataset& dataset,
                           const TrainConfig& config);

// Mini-batch training: per epoch, shuffle all pairs, walk them in batches
// (a trailing batch smaller than 2 is dropped), and for each batch compute
// the configured loss on the tape, backpropagate, and apply Adam updates
// (with a PSD projection after every M step). Validation retrieval metrics
// are computed each epoch on `test` when given, otherwise on a 10% tail
// slice held out from training (or the training data itself when the
// dataset is too small to carve a slice). Deterministic given the config.
// learning_rate == 0 leaves all state bit-identical to initialization.
std::pair<Checkpoint, std::vector<EpochRecord>> train(
    const data::PairedDataset& dataset, const TrainConfig& config,
    const data::PairedDataset* test = nullptr);

// ---- persistence -------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Error precedence: bad magic -> FormatError; unsupported version ->
// VersionMismatch; checksum/truncation -> CorruptChecksum; malformed
// payload -> FormatError.
Checkpoint load_checkpoint(const std::string& path);

// Field-by-field equality (exact floating-point comparison), for tests and
// the determinism harness.
bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b);

}  // namespace otmatch::model
