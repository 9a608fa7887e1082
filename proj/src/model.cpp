#include "otmatch/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "otmatch/eval.hpp"

namespace otmatch::model {

namespace {

bool matrix_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace

// ---- encoders ------------------------------------------------------------------

void Encoder::validate() const {
  require(!layers.empty(), ErrorKind::InvalidArgument,
          "encoder must have at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    require(l.weight.rows() >= 1 && l.weight.cols() >= 1,
            ErrorKind::DimensionMismatch, "encoder layer weight is empty");
    require(l.bias.size() == l.weight.cols(), ErrorKind::DimensionMismatch,
            "encoder bias length must match the layer output dimension");
    require(matrix_finite(l.weight) && l.bias.allFinite(),
            ErrorKind::NonFinite, "encoder parameters must be finite");
    if (i + 1 < layers.size()) {
      require(l.weight.cols() == layers[i + 1].weight.rows(),
              ErrorKind::DimensionMismatch, "encoder layer dimensions must chain");
    }
  }
}

Encoder init_mlp_encoder(Eigen::Index input_dim, Eigen::Index hidden_dim,
                         Eigen::Index output_dim, Rng& rng) {
  require(input_dim >= 1 && hidden_dim >= 1 && output_dim >= 1,
          ErrorKind::InvalidArgument, "encoder dimensions must be positive");
  Encoder enc;
  Layer hidden;
  hidden.weight.resize(input_dim, hidden_dim);
  rng.fill_gaussian(hidden.weight, 0.0,
                    1.0 / std::sqrt(static_cast<double>(input_dim)));
  hidden.bias = Eigen::VectorXd::Zero(hidden_dim);
  hidden.tanh_activation = true;
  enc.layers.push_back(std::move(hidden));

  Layer head;
  head.weight.resize(hidden_dim, output_dim);
  rng.fill_gaussian(head.weight, 0.0,
                    1.0 / std::sqrt(static_cast<double>(hidden_dim)));
  head.bias = Eigen::VectorXd::Zero(output_dim);
  head.tanh_activation = false;
  enc.layers.push_back(std::move(head));
  return enc;
}

Eigen::MatrixXd forward_encode(const Encoder& encoder,
                               const Eigen::MatrixXd& inputs) {
  encoder.validate();
  require(inputs.cols() == encoder.input_dim(), ErrorKind::DimensionMismatch,
          "input dimension does not match the encoder");
  Eigen::MatrixXd cur = inputs;
  for (const Layer& l : encoder.layers) {
    cur = (cur * l.weight).rowwise() + l.bias.transpose();
    if (l.tanh_activation) cur = cur.array().tanh().matrix();
  }
  return cur;
}

grad::NodeId encode_on_tape(grad::Tape& tape, const Encoder& encoder,
                            const Eigen::MatrixXd& inputs,
                            std::vector<grad::NodeId>& param_ids) {
  encoder.validate();
  require(inputs.cols() == encoder.input_dim(), ErrorKind::DimensionMismatch,
          "input dimension does not match the encoder");
  grad::NodeId cur = tape.constant(inputs);
  for (const Layer& l : encoder.layers) {
    const grad::NodeId w = tape.param(l.weight);
    const grad::NodeId b = tape.param(l.bias);
    param_ids.push_back(w);
    param_ids.push_back(b);
    cur = tape.add_bias(tape.matmul(cur, w), b);
    if (l.tanh_activation) cur = tape.tanh(cur);
  }
  return cur;
}

// ---- config --------------------------------------------------------------------

void TrainConfig::validate() const {
  require(batch_size >= 2, ErrorKind::InvalidArgument,
          "batch size must be at least 2");
  require(epochs >= 0, ErrorKind::InvalidArgument,
          "epoch count must be non-negative");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0,
          ErrorKind::InvalidArgument, "learning rate must be non-negative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 &&
              adam_beta2 < 1.0,
          ErrorKind::InvalidArgument, "Adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, ErrorKind::InvalidArgument,
          "Adam epsilon must be positive");
  require(embedding_dim >= 1 && hidden_dim >= 1, ErrorKind::InvalidArgument,
          "model dimensions must be positive");
  switch (loss.kind) {
    case losses::LossKind::MLTM_POT:
      require(loss.mass > 0.0 && loss.mass <= 1.0, ErrorKind::MassOutOfRange,
              "transported mass must lie in (0, 1]");
      [[fallthrough]];
    case losses::LossKind::MLTM:
      require(std::isfinite(loss.epsilon) && loss.epsilon > 0.0,
              ErrorKind::InvalidArgument, "epsilon must be positive");
      require(loss.sinkhorn_max_iters >= 1, ErrorKind::InvalidArgument,
              "solver iteration cap must be positive");
      break;
    case losses::LossKind::Contrastive:
      require(loss.temperature > 0.0, ErrorKind::InvalidArgument,
              "temperature must be positive");
      break;
    case losses::LossKind::Triplet:
      require(loss.margin > 0.0, ErrorKind::InvalidArgument,
              "margin must be positive");
      break;
  }
}

// ---- initialization --------------------------------------------------------------

metric::GroundMetric Checkpoint::ground_metric() const {
  metric::GroundMetric gm;
  switch (config.metric) {
    case metric::MetricKind::Euclidean:
      gm = metric::GroundMetric::euclidean();
      break;
    case metric::MetricKind::CosineDistance:
      gm = metric::GroundMetric::cosine();
      break;
    case metric::MetricKind::Mahalanobis:
      gm = metric::GroundMetric::mahalanobis(
          metric::InteractionMatrix::unchecked(interaction));
      break;
  }
  return gm;
}

namespace {

// Fixed parameter order shared by the Adam state and the update loop:
// enc_x tensors, enc_y tensors, then M when the metric is learned and the
// loss actually differentiates it.
bool metric_is_trained(const TrainConfig& config) {
  return config.metric == metric::MetricKind::Mahalanobis &&
         (config.loss.kind == losses::LossKind::MLTM ||
          config.loss.kind == losses::LossKind::MLTM_POT);
}

}  // namespace

Checkpoint init_checkpoint(const data::PairedDataset& dataset,
                           const TrainConfig& config) {
  config.validate();
  require(dataset.count() >= 2, ErrorKind::InvalidArgument,
          "dataset must contain at least two pairs");
  Checkpoint ckpt;
  ckpt.config = config;
  Rng rng(config.seed);
  ckpt.encoders.enc_x = init_mlp_encoder(dataset.dim_x(), config.hidden_dim,
                                         config.embedding_dim, rng);
  ckpt.encoders.enc_y = init_mlp_encoder(dataset.dim_y(), config.hidden_dim,
                                         config.embedding_dim, rng);
  if (config.metric == metric::MetricKind::Mahalanobis) {
    Eigen::MatrixXd a(config.embedding_dim, config.embedding_dim);
    rng.fill_gaussian(a, 0.0, 0.1);
    const Eigen::MatrixXd sym =
        0.5 * (a + a.transpose()) +
        Eigen::MatrixXd::Identity(config.embedding_dim, config.embedding_dim);
    ckpt.interaction = metric::project_psd(sym).M;
  } else {
    ckpt.interaction = Eigen::MatrixXd::Identity(config.embedding_dim,
                                                 config.embedding_dim);
  }

  const auto add_moments = [&](const Eigen::MatrixXd& shape_like) {
    ckpt.opt.m.push_back(Eigen::MatrixXd::Zero(shape_like.rows(), shape_like.cols()));
    ckpt.opt.v.push_back(Eigen::MatrixXd::Zero(shape_like.rows(), shape_like.cols()));
  };
  for (const Encoder* enc : {&ckpt.encoders.enc_x, &ckpt.encoders.enc_y}) {
    for (const Layer& l : enc->layers) {
      add_moments(l.weight);
      add_moments(Eigen::MatrixXd(l.bias));
    }
  }
  if (metric_is_trained(config)) add_moments(ckpt.interaction);
  ckpt.opt.step = 0;
  ckpt.epoch = 0;
  return ckpt;
}

// ---- training --------------------------------------------------------------------

namespace {

struct ValSplit {
  Eigen::MatrixXd xs, ys;
  std::vector<Eigen::Index> alignment;
};

Eigen::MatrixXd rows_to_double(const Eigen::MatrixXf& grid, Eigen::Index begin,
                               Eigen::Index count) {
  return grid.middleRows(begin, count).cast<double>();
}

// One Adam update over all tensors; the projected step for M (last tensor)
// is handled by the caller.
void adam_update(Eigen::MatrixXd& param, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                 const Eigen::MatrixXd& grad, const TrainConfig& cfg,
                 double bias_corr1, double bias_corr2) {
  m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
  v = (cfg.adam_beta2 * v.array() +
       (1.0 - cfg.adam_beta2) * grad.array().square())
          .matrix();
  const Eigen::ArrayXXd m_hat = m.array() / bias_corr1;
  const Eigen::ArrayXXd v_hat = v.array() / bias_corr2;
  param.array() -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
}

}  // namespace

std::pair<Checkpoint, std::vector<EpochRecord>> train(
    const data::PairedDataset& dataset, const TrainConfig& config,
    const data::PairedDataset* test) {
  Checkpoint ckpt = init_checkpoint(dataset, config);
  const Eigen::Index n_total = dataset.count();

  // Validation split: an explicit test split when given; otherwise a 10%
  // tail slice held out from training; degenerately, the training rows
  // themselves when the dataset is too small to carve a slice. Carved and
  // degenerate splits use the dataset's claimed row pairing as truth.
  Eigen::Index n_train = n_total;
  ValSplit val;
  if (test != nullptr && test->count() > 0) {
    val.xs = test->xs.cast<double>();
    val.ys = test->ys.cast<double>();
    val.alignment = test->alignment;
  } else {
    const auto n_val = static_cast<Eigen::Index>(
        std::floor(0.1 * static_cast<double>(n_total)));
    if (n_val >= 1 && n_total - n_val >= 2) {
      n_train = n_total - n_val;
      val.xs = rows_to_double(dataset.xs, n_train, n_val);
      val.ys = rows_to_double(dataset.ys, n_train, n_val);
      val.alignment.resize(static_cast<std::size_t>(n_val));
      std::iota(val.alignment.begin(), val.alignment.end(), Eigen::Index{0});
    } else {
      val.xs = rows_to_double(dataset.xs, 0, n_total);
      val.ys = rows_to_double(dataset.ys, 0, n_total);
      val.alignment.resize(static_cast<std::size_t>(n_total));
      std::iota(val.alignment.begin(), val.alignment.end(), Eigen::Index{0});
    }
  }
  const Eigen::Index batch = std::min(config.batch_size, n_train);
  require(batch >= 2, ErrorKind::InvalidArgument,
          "training needs at least two pairs per batch");

  const bool train_m = metric_is_trained(config);
  const ot::SinkhornConfig sink_cfg{config.loss.epsilon,
                                    config.loss.sinkhorn_max_iters,
                                    config.loss.sinkhorn_tolerance};

  Rng shuffle_rng(config.seed ^ 0x5deece66dULL);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  std::vector<EpochRecord> history;
  history.reserve(static_cast<std::size_t>(config.epochs));
  std::uint64_t global_step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int steps = 0;

    for (Eigen::Index start = 0; start < n_train; start += batch) {
      const Eigen::Index bs = std::min(batch, n_train - start);
      if (bs < 2) break;  // a trailing single pair cannot form a batch
      ++global_step;

      Eigen::MatrixXd xb(bs, dataset.dim_x());
      Eigen::MatrixXd yb(bs, dataset.dim_y());
      for (Eigen::Index k = 0; k < bs; ++k) {
        const Eigen::Index row = order[static_cast<std::size_t>(start + k)];
        xb.row(k) = dataset.xs.row(row).cast<double>();
        yb.row(k) = dataset.ys.row(row).cast<double>();
      }

      grad::Tape tape;
      std::vector<grad::NodeId> params;
      const grad::NodeId za = encode_on_tape(tape, ckpt.encoders.enc_x, xb, params);
      const grad::NodeId zb = encode_on_tape(tape, ckpt.encoders.enc_y, yb, params);
      grad::NodeId m_node = -1;
      if (config.metric == metric::MetricKind::Mahalanobis) {
        m_node = train_m ? tape.param(ckpt.interaction)
                         : tape.constant(ckpt.interaction);
      }

      grad::NodeId loss_node = -1;
      switch (config.loss.kind) {
        case losses::LossKind::MLTM:
          loss_node = grad::build_matching_loss(
              tape, grad::build_cost(tape, za, zb, config.metric, m_node), 1.0,
              sink_cfg);
          break;
        case losses::LossKind::MLTM_POT:
          loss_node = grad::build_matching_loss(
              tape, grad::build_cost(tape, za, zb, config.metric, m_node),
              config.loss.mass, sink_cfg);
          break;
        case losses::LossKind::Contrastive:
          loss_node =
              grad::build_contrastive_loss(tape, za, zb, config.loss.temperature);
          break;
        case losses::LossKind::Triplet:
          loss_node = grad::build_triplet_loss(tape, za, zb, config.loss.margin);
          break;
      }

      const double loss_val = tape.scalar(loss_node);
      require(std::isfinite(loss_val), ErrorKind::NonFinite,
              "training step " + std::to_string(global_step) +
                  ": loss is non-finite");
      loss_sum += loss_val;
      ++steps;

      if (config.learning_rate == 0.0) continue;  // bit-exact no-op contract

      tape.backward(loss_node);
      std::vector<Eigen::MatrixXd> grads;
      grads.reserve(params.size() + 1);
      for (const grad::NodeId id : params) grads.push_back(tape.grad(id));
      if (train_m) grads.push_back(tape.grad(m_node));
      for (const Eigen::MatrixXd& g : grads) {
        require(matrix_finite(g), ErrorKind::NonFinite,
                "training step " + std::to_string(global_step) +
                    ": gradient is non-finite");
      }

      ckpt.opt.step += 1;
      const double bias_corr1 =
          1.0 - std::pow(config.adam_beta1, static_cast<double>(ckpt.opt.step));
      const double bias_corr2 =
          1.0 - std::pow(config.adam_beta2, static_cast<double>(ckpt.opt.step));

      std::size_t slot = 0;
      for (Encoder* enc : {&ckpt.encoders.enc_x, &ckpt.encoders.enc_y}) {
        for (Layer& layer : enc->layers) {
          adam_update(layer.weight, ckpt.opt.m[slot], ckpt.opt.v[slot],
                      grads[slot], config, bias_corr1, bias_corr2);
          ++slot;
          Eigen::MatrixXd bias_mat = layer.bias;
          adam_update(bias_mat, ckpt.opt.m[slot], ckpt.opt.v[slot], grads[slot],
                      config, bias_corr1, bias_corr2);
          layer.bias = bias_mat.col(0);
          ++slot;
        }
      }
      if (train_m) {
        adam_update(ckpt.interaction, ckpt.opt.m[slot], ckpt.opt.v[slot],
                    grads[slot], config, bias_corr1, bias_corr2);
        ckpt.interaction = metric::project_psd(ckpt.interaction).M;
#ifndef NDEBUG
        metric::InteractionMatrix::validated(ckpt.interaction);
#endif
      }
    }

    // Per-epoch validation retrieval.
    const Eigen::MatrixXd za_val = forward_encode(ckpt.encoders.enc_x, val.xs);
    const Eigen::MatrixXd zb_val = forward_encode(ckpt.encoders.enc_y, val.ys);
    Eigen::MatrixXd scores;
    if (config.loss.kind == losses::LossKind::MLTM ||
        config.loss.kind == losses::LossKind::MLTM_POT) {
      scores = -metric::pairwise_cost_grid(za_val, zb_val, ckpt.ground_metric());
    } else {
      scores = metric::cosine_similarity_grid(za_val, zb_val);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    rec.val_r1_a2t = eval::recall_at_k_rows(scores, val.alignment, 1);
    rec.val_r1_t2a = eval::recall_at_k_cols(scores, val.alignment, 1);
    rec.modality_gap = eval::modality_gap(za_val, zb_val);
    history.push_back(rec);
    ckpt.epoch = epoch + 1;
  }

  return {std::move(ckpt), std::move(history)};
}

// ---- persistence -------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'L', 'T', 'M'};

std::uint32_t crc32_ieee(const unsigned char* data, std::size_t size) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1U) ? 0xEDB88320U ^ (c >> 1) : (c >> 1);
      }
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFU;
  for (std::size_t i = 0; i < size; ++i) {
    crc = table[(crc ^ data[i]) & 0xFFU] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFU;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* data, std::size_t size) { buf_.append(data, size); }
  void matrix(const Eigen::MatrixXd& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
    }
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t begin, std::size_t end)
      : buf_(buf), pos_(begin), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(u8()) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  Eigen::MatrixXd matrix() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    require(static_cast<std::uint64_t>(rows) * cols <= (1ULL << 28),
            ErrorKind::FormatError, "checkpoint tensor implausibly large");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f64();
    }
    return m;
  }
  bool exhausted() const { return pos_ == end_; }

 private:
  void need(std::size_t n) {
    require(pos_ + n <= end_, ErrorKind::FormatError,
            "checkpoint payload ends unexpectedly");
  }
  const std::string& buf_;
  std::size_t pos_, end_;
};

void write_encoder(Writer& w, const Encoder& enc) {
  w.u8(static_cast<std::uint8_t>(enc.layers.size()));
  for (const Layer& l : enc.layers) {
    w.matrix(l.weight);
    w.u32(static_cast<std::uint32_t>(l.bias.size()));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) w.f64(l.bias(i));
    w.u8(l.tanh_activation ? 1 : 0);
  }
}

Encoder read_encoder(Reader& r) {
  Encoder enc;
  const std::uint8_t count = r.u8();
  for (std::uint8_t i = 0; i < count; ++i) {
    Layer l;
    l.weight = r.matrix();
    const std::uint32_t blen = r.u32();
    require(blen <= (1U << 24), ErrorKind::FormatError,
            "checkpoint bias implausibly large");
    l.bias.resize(blen);
    for (std::uint32_t k = 0; k < blen; ++k) l.bias(k) = r.f64();
    l.tanh_activation = r.u8() != 0;
    enc.layers.push_back(std::move(l));
  }
  return enc;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  Writer w;
  w.raw(kCkptMagic, 4);
  w.u16(ckpt.version);

  const TrainConfig& c = ckpt.config;
  w.u32(static_cast<std::uint32_t>(c.loss.kind));
  w.f64(c.loss.epsilon);
  w.f64(c.loss.mass);
  w.f64(c.loss.temperature);
  w.f64(c.loss.margin);
  w.u32(static_cast<std::uint32_t>(c.loss.sinkhorn_max_iters));
  w.f64(c.loss.sinkhorn_tolerance);
  w.u32(static_cast<std::uint32_t>(c.metric));
  w.u64(static_cast<std::uint64_t>(c.batch_size));
  w.i32(c.epochs);
  w.f64(c.learning_rate);
  w.u64(c.seed);
  w.f64(c.adam_beta1);
  w.f64(c.adam_beta2);
  w.f64(c.adam_eps);
  w.u64(static_cast<std::uint64_t>(c.embedding_dim));
  w.u64(static_cast<std::uint64_t>(c.hidden_dim));

  w.i32(ckpt.epoch);
  w.u64(ckpt.opt.step);
  write_encoder(w, ckpt.encoders.enc_x);
  write_encoder(w, ckpt.encoders.enc_y);
  w.matrix(ckpt.interaction);
  w.u32(static_cast<std::uint32_t>(ckpt.opt.m.size()));
  for (std::size_t i = 0; i < ckpt.opt.m.size(); ++i) {
    w.matrix(ckpt.opt.m[i]);
    w.matrix(ckpt.opt.v[i]);
  }

  const std::uint32_t crc = crc32_ieee(
      reinterpret_cast<const unsigned char*>(w.bytes().data()), w.bytes().size());
  Writer trailer;
  trailer.u32(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::IoError,
          "cannot open checkpoint for writing: " + path);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  out.write(trailer.bytes().data(),
            static_cast<std::streamsize>(trailer.bytes().size()));
  out.flush();
  require(out.good(), ErrorKind::IoError, "checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::IoError, "cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  require(!in.bad(), ErrorKind::IoError, "checkpoint read failed: " + path);
  const std::string buf = std::move(ss).str();

  // Precedence: magic, then version, then checksum, then payload shape.
  require(buf.size() >= 4, ErrorKind::CorruptChecksum,
          "checkpoint file is truncated");
  require(std::memcmp(buf.data(), kCkptMagic, 4) == 0, ErrorKind::FormatError,
          "bad checkpoint magic");
  require(buf.size() >= 6, ErrorKind::CorruptChecksum,
          "checkpoint file is truncated");
  Reader header(buf, 4, buf.size());
  const std::uint16_t version = header.u16();
  require(version == kCheckpointVersion, ErrorKind::VersionMismatch,
          "unsupported checkpoint version " + std::to_string(version));
  require(buf.size() >= 10, ErrorKind::CorruptChecksum,
          "checkpoint file is truncated");
  const std::uint32_t stored_crc =
      static_cast<std::uint8_t>(buf[buf.size() - 4]) |
      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[buf.size() - 3]))
       << 8) |
      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[buf.size() - 2]))
       << 16) |
      (static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[buf.size() - 1]))
       << 24);
  const std::uint32_t computed_crc = crc32_ieee(
      reinterpret_cast<const unsigned char*>(buf.data()), buf.size() - 4);
  require(stored_crc == computed_crc, ErrorKind::CorruptChecksum,
          "checkpoint checksum mismatch");

  Reader r(buf, 6, buf.size() - 4);
  Checkpoint ckpt;
  ckpt.version = version;
  TrainConfig& c = ckpt.config;
  const std::uint32_t loss_kind = r.u32();
  require(loss_kind <= 3, ErrorKind::FormatError, "unknown loss kind");
  c.loss.kind = static_cast<losses::LossKind>(loss_kind);
  c.loss.epsilon = r.f64();
  c.loss.mass = r.f64();
  c.loss.temperature = r.f64();
  c.loss.margin = r.f64();
  c.loss.sinkhorn_max_iters = static_cast<int>(r.u32());
  c.loss.sinkhorn_tolerance = r.f64();
  const std::uint32_t metric_kind = r.u32();
  require(metric_kind <= 2, ErrorKind::FormatError, "unknown metric kind");
  c.metric = static_cast<metric::MetricKind>(metric_kind);
  c.batch_size = static_cast<Eigen::Index>(r.u64());
  c.epochs = r.i32();
  c.learning_rate = r.f64();
  c.seed = r.u64();
  c.adam_beta1 = r.f64();
  c.adam_beta2 = r.f64();
  c.adam_eps = r.f64();
  c.embedding_dim = static_cast<Eigen::Index>(r.u64());
  c.hidden_dim = static_cast<Eigen::Index>(r.u64());

  ckpt.epoch = r.i32();
  ckpt.opt.step = r.u64();
  ckpt.encoders.enc_x = read_encoder(r);
  ckpt.encoders.enc_y = read_encoder(r);
  ckpt.interaction = r.matrix();
  const std::uint32_t moment_count = r.u32();
  require(moment_count <= 64, ErrorKind::FormatError,
          "checkpoint moment list implausibly large");
  for (std::uint32_t i = 0; i < moment_count; ++i) {
    ckpt.opt.m.push_back(r.matrix());
    ckpt.opt.v.push_back(r.matrix());
  }
  require(r.exhausted(), ErrorKind::FormatError,
          "checkpoint has trailing bytes");
  return ckpt;
}

namespace {

bool matrices_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.rows() == 0 || (a.array() == b.array()).all());
}

bool encoders_equal(const Encoder& a, const Encoder& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const Layer& la = a.layers[i];
    const Layer& lb = b.layers[i];
    if (la.tanh_activation != lb.tanh_activation) return false;
    if (!matrices_equal(la.weight, lb.weight)) return false;
    if (la.bias.size() != lb.bias.size() ||
        (la.bias.size() > 0 && !(la.bias.array() == lb.bias.array()).all())) {
      return false;
    }
  }
  return true;
}

}  // namespace

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
  const TrainConfig& ca = a.config;
  const TrainConfig& cb = b.config;
  if (a.version != b.version || a.epoch != b.epoch ||
      a.opt.step != b.opt.step) {
    return false;
  }
  if (ca.loss.kind != cb.loss.kind || ca.loss.epsilon != cb.loss.epsilon ||
      ca.loss.mass != cb.loss.mass ||
      ca.loss.temperature != cb.loss.temperature ||
      ca.loss.margin != cb.loss.margin ||
      ca.loss.sinkhorn_max_iters != cb.loss.sinkhorn_max_iters ||
      ca.loss.sinkhorn_tolerance != cb.loss.sinkhorn_tolerance ||
      ca.metric != cb.metric || ca.batch_size != cb.batch_size ||
      ca.epochs != cb.epochs || ca.learning_rate != cb.learning_rate ||
      ca.seed != cb.seed || ca.adam_beta1 != cb.adam_beta1 ||
      ca.adam_beta2 != cb.adam_beta2 || ca.adam_eps != cb.adam_eps ||
      ca.embedding_dim != cb.embedding_dim || ca.hidden_dim != cb.hidden_dim) {
    return false;
  }
  if (!encoders_equal(a.encoders.enc_x, b.encoders.enc_x) ||
      !encoders_equal(a.encoders.enc_y, b.encoders.enc_y)) {
    return false;
  }
  if (!matrices_equal(a.interaction, b.interaction)) return false;
  if (a.opt.m.size() != b.opt.m.size()) return false;
  for (std::size_t i = 0; i < a.opt.m.size(); ++i) {
    if (!matrices_equal(a.opt.m[i], b.opt.m[i]) ||
        !matrices_equal(a.opt.v[i], b.opt.v[i])) {
      return false;
    }
  }
  return true;
}

}  // namespace otmatch::model
