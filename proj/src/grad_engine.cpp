#include "otmatch/grad_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "otmatch/kernels.hpp"

namespace otmatch::grad {

namespace {

constexpr double kLogFloor = 1e-30;

bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace

// ---- recording --------------------------------------------------------------

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::constant(Eigen::MatrixXd v) {
  Node n;
  n.kind = OpKind::Leaf;
  n.needs = false;
  n.val = std::move(v);
  return push(std::move(n));
}

NodeId Tape::param(Eigen::MatrixXd v) {
  Node n;
  n.kind = OpKind::Leaf;
  n.needs = true;
  n.val = std::move(v);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.kind = OpKind::MatMul;
  n.a = a;
  n.b = b;
  n.needs = nodes_[a].needs || nodes_[b].needs;
  n.val = nodes_[a].val * nodes_[b].val;
  return push(std::move(n));
}

NodeId Tape::add_bias(NodeId a, NodeId bias) {
  const Eigen::MatrixXd& A = nodes_[a].val;
  const Eigen::MatrixXd& v = nodes_[bias].val;
  require(v.cols() == 1 && v.rows() == A.cols(), ErrorKind::DimensionMismatch,
          "bias vector length must match matrix columns");
  Node n;
  n.kind = OpKind::AddBias;
  n.a = a;
  n.b = bias;
  n.needs = nodes_[a].needs || nodes_[bias].needs;
  n.val = A.rowwise() + v.col(0).transpose();
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.kind = OpKind::Tanh;
  n.a = a;
  n.needs = nodes_[a].needs;
  n.val = nodes_[a].val.array().tanh().matrix();
  return push(std::move(n));
}

NodeId Tape::pair_quad(NodeId a, NodeId b, NodeId m) {
  const Eigen::MatrixXd& A = nodes_[a].val;
  const Eigen::MatrixXd& B = nodes_[b].val;
  const Eigen::MatrixXd& M = nodes_[m].val;
  require(A.cols() == B.cols() && M.rows() == A.cols() && M.cols() == A.cols(),
          ErrorKind::DimensionMismatch, "pair_quad operand dimensions disagree");
  Node n;
  n.kind = OpKind::PairQuad;
  n.a = a;
  n.b = b;
  n.c = m;
  n.needs = nodes_[a].needs || nodes_[b].needs || nodes_[m].needs;
  // Per-pair evaluation keeps the floating-point order identical to the
  // non-differentiated cost path, so both produce bit-equal cost matrices.
  n.val.resize(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
      const Eigen::RowVectorXd diff = A.row(i) - B.row(j);
      n.val(i, j) = diff * M * diff.transpose();
    }
  }
  return push(std::move(n));
}

NodeId Tape::cos_sim(NodeId a, NodeId b) {
  const Eigen::MatrixXd& A = nodes_[a].val;
  const Eigen::MatrixXd& B = nodes_[b].val;
  require(A.cols() == B.cols(), ErrorKind::DimensionMismatch,
          "cos_sim operand dimensions disagree");
  Node n;
  n.kind = OpKind::CosSim;
  n.a = a;
  n.b = b;
  n.needs = nodes_[a].needs || nodes_[b].needs;
  n.ex1 = A;
  n.ex2 = B;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    n.ex1.row(i) /= std::max(A.row(i).norm(), metric::kCosineNormFloor);
  }
  for (Eigen::Index j = 0; j < B.rows(); ++j) {
    n.ex2.row(j) /= std::max(B.row(j).norm(), metric::kCosineNormFloor);
  }
  n.val = n.ex1 * n.ex2.transpose();
  return push(std::move(n));
}

NodeId Tape::sqrt_floor(NodeId a, double floor) {
  Node n;
  n.kind = OpKind::SqrtFloor;
  n.a = a;
  n.aux = floor;
  n.needs = nodes_[a].needs;
  n.val = nodes_[a].val.cwiseMax(floor).cwiseSqrt();
  return push(std::move(n));
}

NodeId Tape::clamp_min(NodeId a, double floor) {
  Node n;
  n.kind = OpKind::ClampMin;
  n.a = a;
  n.aux = floor;
  n.needs = nodes_[a].needs;
  n.val = nodes_[a].val.cwiseMax(floor);
  return push(std::move(n));
}

NodeId Tape::affine(NodeId a, double alpha, double beta) {
  Node n;
  n.kind = OpKind::Affine;
  n.a = a;
  n.aux = alpha;
  n.aux2 = beta;
  n.needs = nodes_[a].needs;
  if (beta == 0.0) {
    n.val = alpha * nodes_[a].val;
  } else {
    n.val = (alpha * nodes_[a].val.array() + beta).matrix();
  }
  return push(std::move(n));
}

NodeId Tape::add2(NodeId a, NodeId b, double alpha, double beta) {
  require(nodes_[a].val.rows() == nodes_[b].val.rows() &&
              nodes_[a].val.cols() == nodes_[b].val.cols(),
          ErrorKind::DimensionMismatch, "add2 operand shapes disagree");
  Node n;
  n.kind = OpKind::Add2;
  n.a = a;
  n.b = b;
  n.aux = alpha;
  n.aux2 = beta;
  n.needs = nodes_[a].needs || nodes_[b].needs;
  if (alpha == 1.0 && beta == 1.0) {
    n.val = nodes_[a].val + nodes_[b].val;
  } else if (alpha == 1.0 && beta == -1.0) {
    n.val = nodes_[a].val - nodes_[b].val;
  } else {
    n.val = alpha * nodes_[a].val + beta * nodes_[b].val;
  }
  return push(std::move(n));
}

NodeId Tape::sum_all(NodeId a) {
  Node n;
  n.kind = OpKind::SumAll;
  n.a = a;
  n.needs = nodes_[a].needs;
  n.val.setConstant(1, 1, nodes_[a].val.sum());
  return push(std::move(n));
}

NodeId Tape::max_entry(NodeId a) {
  const Eigen::MatrixXd& A = nodes_[a].val;
  Node n;
  n.kind = OpKind::MaxEntry;
  n.a = a;
  n.needs = nodes_[a].needs;
  Eigen::Index best_r = 0, best_c = 0;
  double best = A(0, 0);
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      if (A(i, j) > best) {
        best = A(i, j);
        best_r = i;
        best_c = j;
      }
    }
  }
  n.args = {best_r, best_c};
  n.val.setConstant(1, 1, best);
  return push(std::move(n));
}

NodeId Tape::augment_partial(NodeId cost, NodeId corner) {
  const Eigen::MatrixXd& C = nodes_[cost].val;
  Node n;
  n.kind = OpKind::AugmentPartial;
  n.a = cost;
  n.b = corner;
  n.needs = nodes_[cost].needs || nodes_[corner].needs;
  const Eigen::Index b = C.rows();
  n.val.setZero(b + 1, b + 1);
  n.val.topLeftCorner(b, b) = C;
  n.val(b, b) = nodes_[corner].val(0, 0);
  return push(std::move(n));
}

NodeId Tape::lse_rows(NodeId s, NodeId bias) {
  const Eigen::MatrixXd& S = nodes_[s].val;
  Node n;
  n.kind = OpKind::LseRows;
  n.a = s;
  n.b = bias;
  n.needs = nodes_[s].needs || (bias >= 0 && nodes_[bias].needs);
  Eigen::VectorXd out(S.rows());
  if (bias >= 0) {
    const Eigen::VectorXd bias_vec = nodes_[bias].val.col(0);
    kernels::lse_rows(S, &bias_vec, out);
  } else {
    kernels::lse_rows(S, nullptr, out);
  }
  n.val = out;
  return push(std::move(n));
}

NodeId Tape::lse_cols(NodeId s, NodeId bias) {
  const Eigen::MatrixXd& S = nodes_[s].val;
  Node n;
  n.kind = OpKind::LseCols;
  n.a = s;
  n.b = bias;
  n.needs = nodes_[s].needs || (bias >= 0 && nodes_[bias].needs);
  Eigen::VectorXd out(S.cols());
  if (bias >= 0) {
    const Eigen::VectorXd bias_vec = nodes_[bias].val.col(0);
    kernels::lse_cols(S, &bias_vec, out);
  } else {
    kernels::lse_cols(S, nullptr, out);
  }
  n.val = out;
  return push(std::move(n));
}

NodeId Tape::log_pi_diag(NodeId s, NodeId phi, NodeId psi, Eigen::Index count) {
  Node n;
  n.kind = OpKind::LogPiDiag;
  n.a = s;
  n.b = phi;
  n.c = psi;
  n.iaux = count;
  n.needs = nodes_[s].needs || nodes_[phi].needs || nodes_[psi].needs;
  n.val.resize(count, 1);
  for (Eigen::Index i = 0; i < count; ++i) {
    n.val(i, 0) = nodes_[s].val(i, i) + nodes_[phi].val(i, 0) + nodes_[psi].val(i, 0);
  }
  return push(std::move(n));
}

NodeId Tape::diag_vec(NodeId s, Eigen::Index count) {
  Node n;
  n.kind = OpKind::DiagVec;
  n.a = s;
  n.iaux = count;
  n.needs = nodes_[s].needs;
  n.val.resize(count, 1);
  for (Eigen::Index i = 0; i < count; ++i) n.val(i, 0) = nodes_[s].val(i, i);
  return push(std::move(n));
}

NodeId Tape::row_max_offdiag(NodeId s) {
  const Eigen::MatrixXd& S = nodes_[s].val;
  require(S.rows() == S.cols() && S.rows() >= 2, ErrorKind::DimensionMismatch,
          "off-diagonal row max needs a square matrix of size >= 2");
  Node n;
  n.kind = OpKind::RowMaxOffdiag;
  n.a = s;
  n.needs = nodes_[s].needs;
  n.val.resize(S.rows(), 1);
  n.args.resize(static_cast<std::size_t>(S.rows()));
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    Eigen::Index arg = -1;
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      if (j == i) continue;
      if (S(i, j) > best) {
        best = S(i, j);
        arg = j;
      }
    }
    n.val(i, 0) = best;
    n.args[static_cast<std::size_t>(i)] = arg;
  }
  return push(std::move(n));
}

NodeId Tape::col_max_offdiag(NodeId s) {
  const Eigen::MatrixXd& S = nodes_[s].val;
  require(S.rows() == S.cols() && S.rows() >= 2, ErrorKind::DimensionMismatch,
          "off-diagonal column max needs a square matrix of size >= 2");
  Node n;
  n.kind = OpKind::ColMaxOffdiag;
  n.a = s;
  n.needs = nodes_[s].needs;
  n.val.resize(S.cols(), 1);
  n.args.resize(static_cast<std::size_t>(S.cols()));
  for (Eigen::Index j = 0; j < S.cols(); ++j) {
    double best = -std::numeric_limits<double>::infinity();
    Eigen::Index arg = -1;
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      if (i == j) continue;
      if (S(i, j) > best) {
        best = S(i, j);
        arg = i;
      }
    }
    n.val(j, 0) = best;
    n.args[static_cast<std::size_t>(j)] = arg;
  }
  return push(std::move(n));
}

// ---- backward ----------------------------------------------------------------

namespace {

void ensure_grad(Node& n) {
  if (!n.received) {
    n.grad.setZero(n.val.rows(), n.val.cols());
    n.received = true;
  }
}

}  // namespace

Eigen::MatrixXd Tape::grad(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.received) return n.grad;
  return Eigen::MatrixXd::Zero(n.val.rows(), n.val.cols());
}

void Tape::backward(NodeId output) {
  require(output >= 0 && output < static_cast<NodeId>(nodes_.size()),
          ErrorKind::InvalidArgument, "backward output id out of range");
  require(nodes_[output].val.size() == 1, ErrorKind::InvalidArgument,
          "backward requires a scalar output node");
  for (Node& n : nodes_) {
    n.grad.resize(0, 0);
    n.received = false;
  }
  ensure_grad(nodes_[output]);
  nodes_[output].grad(0, 0) = 1.0;

  for (NodeId id = output; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.received || !n.needs || n.kind == OpKind::Leaf) continue;
    const Eigen::MatrixXd& G = n.grad;
    Node* pa = n.a >= 0 ? &nodes_[n.a] : nullptr;
    Node* pb = n.b >= 0 ? &nodes_[n.b] : nullptr;
    Node* pc = n.c >= 0 ? &nodes_[n.c] : nullptr;
    const bool wa = pa && pa->needs;
    const bool wb = pb && pb->needs;
    const bool wc = pc && pc->needs;

    switch (n.kind) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad.noalias() += G * pb->val.transpose();
        }
        if (wb) {
          ensure_grad(*pb);
          pb->grad.noalias() += pa->val.transpose() * G;
        }
        break;
      }
      case OpKind::AddBias: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad += G;
        }
        if (wb) {
          ensure_grad(*pb);
          pb->grad.col(0) += G.colwise().sum().transpose();
        }
        break;
      }
      case OpKind::Tanh: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad.array() += G.array() * (1.0 - n.val.array().square());
        }
        break;
      }
      case OpKind::PairQuad: {
        const Eigen::MatrixXd& A = pa->val;
        const Eigen::MatrixXd& B = pb->val;
        const Eigen::MatrixXd& M = pc->val;
        const Eigen::VectorXd r = G.rowwise().sum();
        const Eigen::VectorXd c = G.colwise().sum().transpose();
        if (wa || wb) {
          const Eigen::MatrixXd Msym = M + M.transpose();
          if (wa) {
            ensure_grad(*pa);
            pa->grad.noalias() += (r.asDiagonal() * A - G * B) * Msym;
          }
          if (wb) {
            ensure_grad(*pb);
            pb->grad.noalias() += (c.asDiagonal() * B - G.transpose() * A) * Msym;
          }
        }
        if (wc) {
          ensure_grad(*pc);
          const Eigen::MatrixXd AtGB = A.transpose() * G * B;
          pc->grad.noalias() += A.transpose() * r.asDiagonal() * A;
          pc->grad.noalias() -= AtGB;
          pc->grad.noalias() -= AtGB.transpose();
          pc->grad.noalias() += B.transpose() * c.asDiagonal() * B;
        }
        break;
      }
      case OpKind::CosSim: {
        const Eigen::MatrixXd& A = pa->val;
        const Eigen::MatrixXd& B = pb->val;
        const Eigen::MatrixXd& An = n.ex1;
        const Eigen::MatrixXd& Bn = n.ex2;
        if (wa) {
          ensure_grad(*pa);
          const Eigen::MatrixXd dAn = G * Bn;  // n x d
          for (Eigen::Index i = 0; i < A.rows(); ++i) {
            const double norm = A.row(i).norm();
            if (norm > metric::kCosineNormFloor) {
              const double dot = dAn.row(i).dot(An.row(i));
              pa->grad.row(i) += (dAn.row(i) - dot * An.row(i)) / norm;
            } else {
              pa->grad.row(i) += dAn.row(i) / metric::kCosineNormFloor;
            }
          }
        }
        if (wb) {
          ensure_grad(*pb);
          const Eigen::MatrixXd dBn = G.transpose() * An;  // m x d
          for (Eigen::Index j = 0; j < B.rows(); ++j) {
            const double norm = B.row(j).norm();
            if (norm > metric::kCosineNormFloor) {
              const double dot = dBn.row(j).dot(Bn.row(j));
              pb->grad.row(j) += (dBn.row(j) - dot * Bn.row(j)) / norm;
            } else {
              pb->grad.row(j) += dBn.row(j) / metric::kCosineNormFloor;
            }
          }
        }
        break;
      }
      case OpKind::SqrtFloor: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad.array() +=
              (pa->val.array() > n.aux)
                  .select(G.array() * 0.5 / n.val.array(),
                          Eigen::ArrayXXd::Zero(G.rows(), G.cols()));
        }
        break;
      }
      case OpKind::ClampMin: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad.array() +=
              (pa->val.array() > n.aux)
                  .select(G.array(), Eigen::ArrayXXd::Zero(G.rows(), G.cols()));
        }
        break;
      }
      case OpKind::Affine: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad += n.aux * G;
        }
        break;
      }
      case OpKind::Add2: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad += n.aux * G;
        }
        if (wb) {
          ensure_grad(*pb);
          pb->grad += n.aux2 * G;
        }
        break;
      }
      case OpKind::SumAll: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad.array() += G(0, 0);
        }
        break;
      }
      case OpKind::MaxEntry: {
        if (wa) {
          ensure_grad(*pa);
          pa->grad(n.args[0], n.args[1]) += G(0, 0);
        }
        break;
      }
      case OpKind::AugmentPartial: {
        const Eigen::Index b = pa->val.rows();
        if (wa) {
          ensure_grad(*pa);
          pa->grad += G.topLeftCorner(b, b);
        }
        if (wb) {
          ensure_grad(*pb);
          pb->grad(0, 0) += G(b, b);
        }
        break;
      }
      case OpKind::LseRows: {
        // Softmax weights are recomputed from the stored reduction; rows
        // whose upstream gradient is zero are skipped.
        const Eigen::MatrixXd& S = pa->val;
        const bool has_bias = n.b >= 0;
        if (wa) ensure_grad(*pa);
        if (has_bias && wb) ensure_grad(*pb);
        for (Eigen::Index i = 0; i < S.rows(); ++i) {
          const double g = G(i, 0);
          if (g == 0.0) continue;
          const double L = n.val(i, 0);
          if (!std::isfinite(L)) continue;  // empty/-inf row: zero gradient
          for (Eigen::Index j = 0; j < S.cols(); ++j) {
            const double z = has_bias ? S(i, j) + pb->val(j, 0) : S(i, j);
            const double w = std::exp(z - L);
            if (wa) pa->grad(i, j) += g * w;
            if (has_bias && wb) pb->grad(j, 0) += g * w;
          }
        }
        break;
      }
      case OpKind::LseCols: {
        const Eigen::MatrixXd& S = pa->val;
        const bool has_bias = n.b >= 0;
        if (wa) ensure_grad(*pa);
        if (has_bias && wb) ensure_grad(*pb);
        for (Eigen::Index j = 0; j < S.cols(); ++j) {
          const double g = G(j, 0);
          if (g == 0.0) continue;
          const double L = n.val(j, 0);
          if (!std::isfinite(L)) continue;
          for (Eigen::Index i = 0; i < S.rows(); ++i) {
            const double z = has_bias ? S(i, j) + pb->val(i, 0) : S(i, j);
            const double w = std::exp(z - L);
            if (wa) pa->grad(i, j) += g * w;
            if (has_bias && wb) pb->grad(i, 0) += g * w;
          }
        }
        break;
      }
      case OpKind::LogPiDiag: {
        for (Eigen::Index i = 0; i < n.iaux; ++i) {
          const double g = n.grad(i, 0);
          if (g == 0.0) continue;
          if (wa) {
            ensure_grad(*pa);
            pa->grad(i, i) += g;
          }
          if (wb) {
            ensure_grad(*pb);
            pb->grad(i, 0) += g;
          }
          if (wc) {
            ensure_grad(*pc);
            pc->grad(i, 0) += g;
          }
        }
        break;
      }
      case OpKind::DiagVec: {
        if (wa) {
          ensure_grad(*pa);
          for (Eigen::Index i = 0; i < n.iaux; ++i) pa->grad(i, i) += G(i, 0);
        }
        break;
      }
      case OpKind::RowMaxOffdiag: {
        if (wa) {
          ensure_grad(*pa);
          for (Eigen::Index i = 0; i < G.rows(); ++i) {
            pa->grad(i, n.args[static_cast<std::size_t>(i)]) += G(i, 0);
          }
        }
        break;
      }
      case OpKind::ColMaxOffdiag: {
        if (wa) {
          ensure_grad(*pa);
          for (Eigen::Index j = 0; j < G.rows(); ++j) {
            pa->grad(n.args[static_cast<std::size_t>(j)], j) += G(j, 0);
          }
        }
        break;
      }
    }
  }
}

// ---- builders ----------------------------------------------------------------

NodeId build_cost(Tape& tape, NodeId za, NodeId zb, metric::MetricKind kind,
                  NodeId m_node) {
  switch (kind) {
    case metric::MetricKind::Euclidean: {
      const Eigen::Index d = tape.val(za).cols();
      const NodeId eye = tape.constant(Eigen::MatrixXd::Identity(d, d));
      const NodeId q = tape.pair_quad(za, zb, eye);
      return tape.sqrt_floor(q, metric::kMahalanobisSqrtFloor);
    }
    case metric::MetricKind::CosineDistance: {
      const NodeId s = tape.cos_sim(za, zb);
      return tape.affine(s, -1.0, 1.0);
    }
    case metric::MetricKind::Mahalanobis: {
      require(m_node >= 0, ErrorKind::InvalidArgument,
              "Mahalanobis cost needs an interaction-matrix node");
      const NodeId q = tape.pair_quad(za, zb, m_node);
      return tape.sqrt_floor(q, metric::kMahalanobisSqrtFloor);
    }
  }
  throw Error(ErrorKind::InvalidArgument, "unknown metric kind");
}

SinkhornUnroll build_sinkhorn_log_diag(Tape& tape, NodeId cost, double mass,
                                       const ot::SinkhornConfig& config) {
  config.validate();
  require(mass > 0.0 && mass <= 1.0, ErrorKind::MassOutOfRange,
          "transported mass must lie in (0, 1]");
  const Eigen::Index b = tape.val(cost).rows();
  require(tape.val(cost).cols() == b && b >= 2, ErrorKind::DimensionMismatch,
          "cost node must be square with size >= 2");

  NodeId s_node;
  Eigen::VectorXd marg;
  Eigen::Index n;
  if (mass < 1.0) {
    // Dummy-node augmentation: corner entry 2*max(C)+1, dummy edges free,
    // marginals [1/b, ..., 1/b, 1-mass].
    const NodeId cmax = tape.max_entry(cost);
    const NodeId corner = tape.affine(cmax, 2.0, 1.0);
    const NodeId aug = tape.augment_partial(cost, corner);
    s_node = tape.affine(aug, -1.0 / config.epsilon, 0.0);
    n = b + 1;
    marg.setConstant(n, 1.0 / static_cast<double>(b));
    marg(b) = 1.0 - mass;
  } else {
    s_node = tape.affine(cost, -1.0 / config.epsilon, 0.0);
    n = b;
    marg.setConstant(n, 1.0 / static_cast<double>(b));
  }

  const Eigen::VectorXd log_marg = marg.array().log();
  const NodeId loga = tape.constant(log_marg);
  const NodeId logb = tape.constant(log_marg);

  // Mirrors the solver recursion exactly: psi_0 = log b-marginal, phi_0 = 0;
  // each iteration does a row update then a column update, with the row-sum
  // violation checked (on values only) before the row update from iteration 1.
  NodeId phi = tape.constant(Eigen::MatrixXd::Zero(n, 1));
  NodeId psi = logb;
  SinkhornUnroll out;
  for (int t = 0; t < config.max_iters; ++t) {
    const NodeId l1 = tape.lse_rows(s_node, psi);
    if (t > 0) {
      const double viol = kernels::row_violation(tape.val(phi), tape.val(l1), marg);
      if (viol < config.tolerance) {
        out.converged = true;
        break;
      }
    }
    phi = tape.add2(loga, l1, 1.0, -1.0);
    const NodeId l2 = tape.lse_cols(s_node, phi);
    psi = tape.add2(logb, l2, 1.0, -1.0);
    out.iterations_used = t + 1;
  }

  out.log_diag = tape.log_pi_diag(s_node, phi, psi, b);
  require(all_finite(tape.val(out.log_diag)), ErrorKind::NonFinite,
          "transport plan diagonal is non-finite");
  return out;
}

NodeId build_matching_loss(Tape& tape, NodeId cost, double mass,
                           const ot::SinkhornConfig& config,
                           SinkhornUnroll* unroll_out) {
  const double b = static_cast<double>(tape.val(cost).rows());
  SinkhornUnroll unroll = build_sinkhorn_log_diag(tape, cost, mass, config);
  if (unroll_out != nullptr) *unroll_out = unroll;
  const NodeId floored = tape.clamp_min(unroll.log_diag, std::log(kLogFloor));
  const NodeId total = tape.sum_all(floored);
  if (mass < 1.0) {
    return tape.affine(total, -mass / b, mass * std::log(mass / b));
  }
  return tape.affine(total, -1.0 / b, -std::log(b));
}

NodeId build_contrastive_loss(Tape& tape, NodeId za, NodeId zb,
                              double temperature) {
  require(temperature > 0.0, ErrorKind::InvalidArgument,
          "temperature must be positive");
  const Eigen::Index b = tape.val(za).rows();
  require(tape.val(zb).rows() == b, ErrorKind::DimensionMismatch,
          "contrastive loss needs equally sized batches");
  const NodeId sims = tape.cos_sim(za, zb);
  const NodeId logits = tape.affine(sims, 1.0 / temperature, 0.0);
  const NodeId row_lse = tape.lse_rows(logits, -1);
  const NodeId col_lse = tape.lse_cols(logits, -1);
  const NodeId diag = tape.diag_vec(logits, b);
  const NodeId s_rows = tape.sum_all(row_lse);
  const NodeId s_cols = tape.sum_all(col_lse);
  const NodeId s_diag = tape.sum_all(diag);
  const NodeId lse_total = tape.add2(s_rows, s_cols, 1.0, 1.0);
  const NodeId unnorm = tape.add2(lse_total, s_diag, 1.0, -2.0);
  return tape.affine(unnorm, 1.0 / static_cast<double>(b), 0.0);
}

NodeId build_triplet_loss(Tape& tape, NodeId za, NodeId zb, double margin) {
  require(margin >= 0.0, ErrorKind::InvalidArgument,
          "margin must be non-negative");
  const Eigen::Index b = tape.val(za).rows();
  require(tape.val(zb).rows() == b && b >= 2, ErrorKind::DimensionMismatch,
          "triplet loss needs equally sized batches of at least two pairs");
  const NodeId sims = tape.cos_sim(za, zb);
  const NodeId diag = tape.diag_vec(sims, b);
  const NodeId hardest_row = tape.row_max_offdiag(sims);
  const NodeId hardest_col = tape.col_max_offdiag(sims);
  // hinge(margin - s_ii + hardest) per anchor, averaged; both directions sum.
  const NodeId viol_row = tape.add2(hardest_row, diag, 1.0, -1.0);
  const NodeId hinge_row = tape.clamp_min(tape.affine(viol_row, 1.0, margin), 0.0);
  const NodeId viol_col = tape.add2(hardest_col, diag, 1.0, -1.0);
  const NodeId hinge_col = tape.clamp_min(tape.affine(viol_col, 1.0, margin), 0.0);
  const NodeId total = tape.add2(tape.sum_all(hinge_row), tape.sum_all(hinge_col),
                                 1.0, 1.0);
  return tape.affine(total, 1.0 / static_cast<double>(b), 0.0);
}

// ---- embedding-level API -------------------------------------------------------

std::pair<double, GradBundle> backward_mltm(const metric::EmbeddingSet& za,
                                            const metric::EmbeddingSet& zb,
                                            const metric::GroundMetric& metric,
                                            const ot::SinkhornConfig& config,
                                            double mass) {
  require(za.count() == zb.count(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");
  Tape tape;
  const NodeId a_node = tape.param(za.vectors);
  const NodeId b_node = tape.param(zb.vectors);
  NodeId m_node = -1;
  if (metric.kind == metric::MetricKind::Mahalanobis) {
    m_node = tape.param(metric.interaction.M);
  }
  const NodeId cost = build_cost(tape, a_node, b_node, metric.kind, m_node);
  const NodeId loss = build_matching_loss(tape, cost, mass, config);
  tape.backward(loss);

  GradBundle bundle;
  bundle.grad_theta.push_back(tape.grad(a_node));
  bundle.grad_phi.push_back(tape.grad(b_node));
  if (m_node >= 0) bundle.grad_M = tape.grad(m_node);
  require(all_finite(bundle.grad_theta[0]) && all_finite(bundle.grad_phi[0]) &&
              (m_node < 0 || all_finite(bundle.grad_M)),
          ErrorKind::NonFinite, "gradient contains non-finite entries");
  return {tape.scalar(loss), std::move(bundle)};
}

namespace {

// Loss of the matching objective at given raw parameter grids, with the
// Sinkhorn iteration count pinned so offset evaluations and the base
// gradient differentiate the same truncated recursion.
double frozen_loss(const MltmPoint& p, const Eigen::MatrixXd& za,
                   const Eigen::MatrixXd& zb, const Eigen::MatrixXd& M,
                   const ot::SinkhornConfig& frozen) {
  Tape tape;
  const NodeId a_node = tape.param(za);
  const NodeId b_node = tape.param(zb);
  NodeId m_node = -1;
  if (p.metric == metric::MetricKind::Mahalanobis) m_node = tape.param(M);
  const NodeId cost = build_cost(tape, a_node, b_node, p.metric, m_node);
  const NodeId loss = build_matching_loss(tape, cost, p.mass, frozen);
  return tape.scalar(loss);
}

}  // namespace

double finite_diff_check(const MltmPoint& point, int direction_count, double h,
                         std::uint64_t seed) {
  require(h >= 1e-7 && h <= 1e-3, ErrorKind::InvalidArgument,
          "step size must lie in [1e-7, 1e-3]");
  require(direction_count >= 1, ErrorKind::InvalidArgument,
          "direction_count must be positive");
  require(point.za.rows() == point.zb.rows(), ErrorKind::DimensionMismatch,
          "matched batches must have equal size");

  const bool maha = point.metric == metric::MetricKind::Mahalanobis;

  // Pin the iteration count from an untaped solve at the base point.
  ot::SinkhornConfig base = point.base_config;
  base.epsilon = point.epsilon;
  ot::TransportPlan base_plan;
  {
    const auto za_set = metric::EmbeddingSet::from(point.za);
    const auto zb_set = metric::EmbeddingSet::from(point.zb);
    metric::GroundMetric gm;
    gm.kind = point.metric;
    if (maha) gm.interaction = metric::InteractionMatrix::validated(point.M);
    const auto cost = metric::pairwise_cost(za_set, zb_set, gm);
    base_plan = point.mass < 1.0 ? ot::partial_sinkhorn(cost, point.mass, base)
                                 : ot::sinkhorn(cost, base);
  }
  ot::SinkhornConfig frozen = base;
  frozen.max_iters = std::max(base_plan.iterations_used, 1);
  frozen.tolerance = 1e-300;  // never met: the count alone stops the loop

  // Tape gradient of the frozen recursion.
  Tape tape;
  const NodeId a_node = tape.param(point.za);
  const NodeId b_node = tape.param(point.zb);
  NodeId m_node = -1;
  if (maha) m_node = tape.param(point.M);
  const NodeId cost_node = build_cost(tape, a_node, b_node, point.metric, m_node);
  const NodeId loss = build_matching_loss(tape, cost_node, point.mass, frozen);
  tape.backward(loss);
  const Eigen::MatrixXd ga = tape.grad(a_node);
  const Eigen::MatrixXd gb = tape.grad(b_node);
  const Eigen::MatrixXd gm_grad =
      maha ? tape.grad(m_node) : Eigen::MatrixXd();

  const Eigen::Index na = point.za.size();
  const Eigen::Index nb = point.zb.size();
  const Eigen::Index nm = maha ? point.M.size() : 0;
  const Eigen::Index total = na + nb + nm;

  // Sample distinct flat coordinates across all parameter grids.
  std::vector<Eigen::Index> coords;
  if (direction_count >= total) {
    coords.resize(static_cast<std::size_t>(total));
    for (Eigen::Index i = 0; i < total; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    Rng rng(seed);
    std::vector<bool> taken(static_cast<std::size_t>(total), false);
    while (coords.size() < static_cast<std::size_t>(direction_count)) {
      const Eigen::Index c =
          static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(total)));
      if (!taken[static_cast<std::size_t>(c)]) {
        taken[static_cast<std::size_t>(c)] = true;
        coords.push_back(c);
      }
    }
  }

  // Matrices are addressed in column-major flat order, matching Eigen's
  // default storage, via data()[c].
  auto eval_offset = [&](Eigen::Index coord, double delta) {
    Eigen::MatrixXd za = point.za, zb = point.zb, M = point.M;
    if (coord < na) {
      za.data()[coord] += delta;
    } else if (coord < na + nb) {
      zb.data()[coord - na] += delta;
    } else {
      M.data()[coord - na - nb] += delta;
    }
    return frozen_loss(point, za, zb, M, frozen);
  };

  double max_rel = 0.0;
  for (const Eigen::Index c : coords) {
    const double f_plus = eval_offset(c, h);
    const double f_minus = eval_offset(c, -h);
    const double g_fd = (f_plus - f_minus) / (2.0 * h);
    double g_tape;
    if (c < na) {
      g_tape = ga.data()[c];
    } else if (c < na + nb) {
      g_tape = gb.data()[c - na];
    } else {
      g_tape = gm_grad.data()[c - na - nb];
    }
    const double rel =
        std::abs(g_tape - g_fd) / std::max(std::abs(g_fd), 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace otmatch::grad
