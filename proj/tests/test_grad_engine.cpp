#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

#include "otmatch/common.hpp"
#include "otmatch/grad_engine.hpp"
#include "otmatch/ground_metric.hpp"
#include "otmatch/losses.hpp"
#include "test_util.hpp"

using namespace otmatch;
using testutil::error_kind_of;
using testutil::max_abs_diff;
using testutil::random_gaussian;

namespace {

grad::MltmPoint make_point(Rng& rng, Eigen::Index b, Eigen::Index d,
                           metric::MetricKind kind, double epsilon, double mass) {
  grad::MltmPoint point;
  point.za = random_gaussian(rng, b, d);
  point.zb = random_gaussian(rng, b, d);
  point.metric = kind;
  if (kind == metric::MetricKind::Mahalanobis) {
    point.M = metric::init_interaction(d, 1234).M;
  }
  point.epsilon = epsilon;
  point.mass = mass;
  point.base_config = ot::SinkhornConfig{epsilon, 2000, 1e-6};
  return point;
}

// Central finite difference of a scalar function of one matrix entry.
double central_diff(const std::function<double(const Eigen::MatrixXd&)>& f,
                    Eigen::MatrixXd at, Eigen::Index i, Eigen::Index j,
                    double h) {
  Eigen::MatrixXd up = at, down = at;
  up(i, j) += h;
  down(i, j) -= h;
  return (f(up) - f(down)) / (2.0 * h);
}

}  // namespace

TEST_CASE("diagonal target has zero self-divergence") {
  // KL(target || target) with the diagonal 1/b target: the matching loss's
  // closed form -(1/b) sum log pi_ii - log b evaluated at pi_ii = 1/b.
  const int b = 7;
  double kl = 0.0;
  for (int i = 0; i < b; ++i) kl += -std::log(1.0 / b) / b;
  kl -= std::log(static_cast<double>(b));
  CHECK(std::abs(kl) < 1e-15);
}

TEST_CASE("tape gradient of a quadratic matches finite differences to 1e-9") {
  Rng rng(21);
  const Eigen::MatrixXd za = random_gaussian(rng, 3, 2);
  const Eigen::MatrixXd zb = random_gaussian(rng, 3, 2);

  const auto f = [&](const Eigen::MatrixXd& a_val) {
    grad::Tape t;
    const auto a = t.constant(a_val);
    const auto b = t.constant(zb);
    const auto m = t.constant(Eigen::MatrixXd::Identity(2, 2));
    return t.scalar(t.sum_all(t.pair_quad(a, b, m)));
  };

  grad::Tape t;
  const auto a = t.param(za);
  const auto b = t.constant(zb);
  const auto m = t.constant(Eigen::MatrixXd::Identity(2, 2));
  const auto loss = t.sum_all(t.pair_quad(a, b, m));
  t.backward(loss);
  const Eigen::MatrixXd g = t.grad(a);

  for (Eigen::Index i = 0; i < za.rows(); ++i) {
    for (Eigen::Index j = 0; j < za.cols(); ++j) {
      const double fd = central_diff(f, za, i, j, 1e-4);
      CHECK(std::abs(g(i, j) - fd) / std::max(std::abs(fd), 1e-8) < 1e-9);
    }
  }
}

TEST_CASE("full pipeline gradient matches finite differences on every coordinate") {
  Rng rng(22);
  const auto point =
      make_point(rng, 4, 3, metric::MetricKind::Euclidean, 0.1, 1.0);
  // 24 embedding coordinates in total; request more to cover every one.
  const double err = grad::finite_diff_check(point, 100, 1e-5, 7);
  CHECK(err < 1e-4);
}

TEST_CASE("partial-mass pipeline gradient matches finite differences") {
  Rng rng(23);
  const auto point =
      make_point(rng, 4, 3, metric::MetricKind::Euclidean, 0.1, 0.5);
  const double err = grad::finite_diff_check(point, 100, 1e-5, 11);
  CHECK(err < 1e-4);
}

TEST_CASE("gradient check passes across metric, mass, epsilon, and size") {
  Rng rng(24);
  const std::vector<metric::MetricKind> kinds = {
      metric::MetricKind::Euclidean, metric::MetricKind::CosineDistance,
      metric::MetricKind::Mahalanobis};
  const std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes = {
      {2, 2}, {4, 3}, {8, 5}};
  int config = 0;
  for (const auto kind : kinds) {
    for (const double mass : {1.0, 0.5}) {
      for (const double eps : {0.05, 0.1, 0.5}) {
        for (const auto& [b, d] : shapes) {
          ++config;
          auto point = make_point(rng, b, d, kind, eps, mass);
          const double err = grad::finite_diff_check(point, 8, 1e-5,
                                                     1000 + config);
          CAPTURE(static_cast<int>(kind));
          CAPTURE(mass);
          CAPTURE(eps);
          CAPTURE(b);
          CAPTURE(d);
          CHECK(err < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("interaction-matrix gradient is symmetric") {
  Rng rng(25);
  const auto za = metric::EmbeddingSet::from(random_gaussian(rng, 5, 4));
  const auto zb = metric::EmbeddingSet::from(random_gaussian(rng, 5, 4));
  const auto metric_obj =
      metric::GroundMetric::mahalanobis(metric::init_interaction(4, 77));
  const auto [loss, bundle] = grad::backward_mltm(
      za, zb, metric_obj, ot::SinkhornConfig{0.1, 2000, 1e-6}, 1.0);
  CHECK(std::isfinite(loss));
  REQUIRE(bundle.grad_M.rows() == 4);
  CHECK(max_abs_diff(bundle.grad_M, bundle.grad_M.transpose()) < 1e-12);
}

TEST_CASE("backward passes are bit-deterministic") {
  Rng rng(26);
  const auto za = metric::EmbeddingSet::from(random_gaussian(rng, 4, 3));
  const auto zb = metric::EmbeddingSet::from(random_gaussian(rng, 4, 3));
  const auto cfg = ot::SinkhornConfig{0.1, 2000, 1e-6};

  // Two independent tapes over the same inputs.
  const auto [l1, b1] =
      grad::backward_mltm(za, zb, metric::GroundMetric::euclidean(), cfg, 1.0);
  const auto [l2, b2] =
      grad::backward_mltm(za, zb, metric::GroundMetric::euclidean(), cfg, 1.0);
  CHECK(l1 == l2);
  REQUIRE(b1.grad_theta.size() == b2.grad_theta.size());
  CHECK(b1.grad_theta[0] == b2.grad_theta[0]);
  CHECK(b1.grad_phi[0] == b2.grad_phi[0]);

  // Two backward sweeps over the same tape.
  grad::Tape t;
  const auto a = t.param(za.vectors);
  const auto b = t.param(zb.vectors);
  const auto cost = grad::build_cost(t, a, b, metric::MetricKind::Euclidean, -1);
  const auto loss = grad::build_matching_loss(t, cost, 1.0, cfg);
  t.backward(loss);
  const Eigen::MatrixXd first = t.grad(a);
  t.backward(loss);
  CHECK(t.grad(a) == first);
}

TEST_CASE("common translation of both modalities has zero Euclidean gradient") {
  // The Euclidean cost depends only on differences za_i - zb_j, so shifting
  // every item of both modalities by the same offset along coordinate k leaves
  // the loss unchanged; the summed gradient over that coordinate must vanish.
  Rng rng(27);
  const auto za = metric::EmbeddingSet::from(random_gaussian(rng, 5, 3));
  const auto zb = metric::EmbeddingSet::from(random_gaussian(rng, 5, 3));
  const auto [loss, bundle] =
      grad::backward_mltm(za, zb, metric::GroundMetric::euclidean(),
                          ot::SinkhornConfig{0.1, 2000, 1e-6}, 1.0);
  CHECK(std::isfinite(loss));
  const Eigen::MatrixXd& ga = bundle.grad_theta[0];
  const Eigen::MatrixXd& gb = bundle.grad_phi[0];
  for (Eigen::Index k = 0; k < 3; ++k) {
    CHECK(std::abs(ga.col(k).sum() + gb.col(k).sum()) < 1e-10);
  }
}

TEST_CASE("contrastive tape gradient matches finite differences") {
  Rng rng(28);
  const Eigen::MatrixXd za = random_gaussian(rng, 5, 4);
  const Eigen::MatrixXd zb = random_gaussian(rng, 5, 4);
  const double tau = 0.07;

  const auto value = [&](const Eigen::MatrixXd& a_val) {
    grad::Tape t;
    return t.scalar(grad::build_contrastive_loss(t, t.constant(a_val),
                                                 t.constant(zb), tau));
  };

  grad::Tape t;
  const auto a = t.param(za);
  const auto loss = grad::build_contrastive_loss(t, a, t.constant(zb), tau);
  t.backward(loss);
  const Eigen::MatrixXd g = t.grad(a);
  for (const auto& [i, j] : std::vector<std::pair<Eigen::Index, Eigen::Index>>{
           {0, 0}, {1, 2}, {2, 3}, {4, 1}, {3, 0}}) {
    const double fd = central_diff(value, za, i, j, 1e-6);
    CHECK(std::abs(g(i, j) - fd) / std::max(std::abs(fd), 1e-8) < 1e-5);
  }
}

TEST_CASE("triplet tape gradient matches finite differences") {
  Rng rng(29);
  const Eigen::MatrixXd za = random_gaussian(rng, 5, 4);
  const Eigen::MatrixXd zb = random_gaussian(rng, 5, 4);
  const double margin = 0.4;

  const auto value = [&](const Eigen::MatrixXd& a_val) {
    grad::Tape t;
    return t.scalar(grad::build_triplet_loss(t, t.constant(a_val),
                                             t.constant(zb), margin));
  };

  grad::Tape t;
  const auto a = t.param(za);
  const auto loss = grad::build_triplet_loss(t, a, t.constant(zb), margin);
  t.backward(loss);
  const Eigen::MatrixXd g = t.grad(a);
  for (const auto& [i, j] : std::vector<std::pair<Eigen::Index, Eigen::Index>>{
           {0, 0}, {1, 2}, {2, 3}, {4, 1}}) {
    const double fd = central_diff(value, za, i, j, 1e-6);
    CHECK(std::abs(g(i, j) - fd) / std::max(std::abs(fd), 1e-8) < 1e-5);
  }
}

TEST_CASE("finite_diff_check validates its step size") {
  Rng rng(30);
  const auto point =
      make_point(rng, 2, 2, metric::MetricKind::Euclidean, 0.1, 1.0);
  CHECK(error_kind_of([&] { grad::finite_diff_check(point, 4, 1e-8, 0); }) ==
        ErrorKind::InvalidArgument);
  CHECK(error_kind_of([&] { grad::finite_diff_check(point, 4, 1e-2, 0); }) ==
        ErrorKind::InvalidArgument);
}

TEST_CASE("vanishing regularization surfaces as a NonFinite error") {
  // Subnormal epsilon overflows -1/epsilon to -inf; the scaled score matrix
  // then degenerates and the pipeline must fail loudly rather than return
  // garbage. (Any normal positive epsilon survives the log-domain updates.)
  Rng rng(31);
  const auto za = metric::EmbeddingSet::from(random_gaussian(rng, 3, 2));
  const auto zb = metric::EmbeddingSet::from(random_gaussian(rng, 3, 2));
  CHECK(error_kind_of([&] {
          grad::backward_mltm(za, zb, metric::GroundMetric::euclidean(),
                              ot::SinkhornConfig{1e-320, 100, 1e-6}, 1.0);
        }) == ErrorKind::NonFinite);
}

TEST_CASE("taped loss value matches the untaped loss value") {
  // The Sinkhorn recursion is shared bit-for-bit, but the final scalar
  // reduction and the Euclidean cost entries are computed with different
  // (algebraically equal) operation orders, so compare with a tight
  // relative tolerance rather than bitwise.
  Rng rng(32);
  for (const double mass : {1.0, 0.6}) {
    const Eigen::MatrixXd za = random_gaussian(rng, 6, 4);
    const Eigen::MatrixXd zb = random_gaussian(rng, 6, 4);
    const auto cfg = ot::SinkhornConfig{0.1, 2000, 1e-6};

    grad::Tape t;
    const auto cost = grad::build_cost(t, t.param(za), t.param(zb),
                                       metric::MetricKind::Euclidean, -1);
    const double taped =
        t.scalar(grad::build_matching_loss(t, cost, mass, cfg));

    losses::LossConfig lc;
    lc.kind = mass < 1.0 ? losses::LossKind::MLTM_POT : losses::LossKind::MLTM;
    lc.epsilon = cfg.epsilon;
    lc.mass = mass;
    lc.sinkhorn_max_iters = cfg.max_iters;
    lc.sinkhorn_tolerance = cfg.tolerance;
    const double untaped = losses::loss_value(
        metric::EmbeddingSet::from(za), metric::EmbeddingSet::from(zb),
        metric::GroundMetric::euclidean(), lc);
    CAPTURE(mass);
    CHECK(std::abs(taped - untaped) <=
          1e-12 * std::max(1.0, std::abs(untaped)));
  }
}
