#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "otmatch/common.hpp"
#include "otmatch/ot_solver.hpp"
#include "test_util.hpp"

using namespace otmatch;
using testutil::error_kind_of;
using testutil::max_abs_diff;
using testutil::random_cost;

namespace {

// Frozen reference instance: 5x5 cost with entries in [0,1] and its entropic
// plan at epsilon = 0.1, computed by an independent implementation and pinned
// at full double precision. Regenerating requires only the seed recipe noted
// in the repository history; the values below are the contract.
Eigen::MatrixXd frozen_cost_5x5() {
  Eigen::MatrixXd C(5, 5);
  C << 0.62509546660466697, 0.89721380096957548, 0.77568569024519352,
      0.22520718999059186, 0.30016628491122543,  //
      0.8735534453962619, 0.0052653045655747244, 0.82122841838276628,
      0.79706942875204623, 0.46793495284372078,  //
      0.30303242681931353, 0.27842561210077332, 0.2548695876541246,
      0.44507630588264657, 0.5045482589579533,  //
      0.55349735207449247, 0.99550028343439267, 0.79266191921375306,
      0.62217922944116266, 0.98896014768188489,  //
      0.21530869823559895, 0.16021203385784455, 0.61253960427303078,
      0.043942007961383367, 0.035680278773596141;
  return C;
}

Eigen::MatrixXd frozen_plan_5x5() {
  Eigen::MatrixXd P(5, 5);
  P << 0.0050610126755926896, 4.1083231541043167e-05, 0.0033655269382622545,
      0.10932321899633775, 0.082209158158286624,  //
      0.00025928855223398059, 0.18876997051543898, 0.0013117429096101518,
      0.00022066399338045858, 0.0094383340292432012,  //
      0.032308770629694519, 0.0050981023971513346, 0.1567868603837754,
      0.0030918183560815905, 0.0027144482333239339,  //
      0.13485029752136746, 0.00020020718106712233, 0.03698231290629625,
      0.0268752536771911, 0.0010919287141077077,  //
      0.027520630621111441, 0.0058906366748015439, 0.0015535568620559223,
      0.060489044977009104, 0.10454613086503856;
  return P;
}

// Frozen partial-transport instance: 4x4 cost, mass 0.75, epsilon = 0.1.
Eigen::MatrixXd frozen_cost_4x4() {
  Eigen::MatrixXd C(4, 4);
  C << 0.51488882027137028, 0.4662060253252891, 0.91716777319285225,
      0.62922625449101044,  //
      0.51411764659951387, 0.49687343539350426, 0.24751492202733083,
      0.011794025542505859,  //
      0.19240214398531064, 0.69203212088183919, 0.20060672398699519,
      0.36953631060220671,  //
      0.0037342420520759534, 0.83004772980174557, 0.15446108106143985,
      0.26759930456378545;
  return C;
}

Eigen::MatrixXd frozen_partial_plan_4x4() {
  Eigen::MatrixXd P(4, 4);
  P << 0.0075511984320364911, 0.083136927183751042, 0.000255975014795367,
      0.0029585045777855024,  //
      0.0010266862098301851, 0.0082542910838459601, 0.027959901585184438,
      0.19169863768540973,  //
      0.065426166097666175, 0.0029939010723181708, 0.11412385200653752,
      0.013679968297992664,  //
      0.15303689813951327, 0.00026700147930904753, 0.064188141040839114,
      0.013441950093192535;
  return P;
}

ot::SinkhornConfig tight_config(double epsilon) {
  return ot::SinkhornConfig{epsilon, 200000, 1e-13};
}

}  // namespace

TEST_CASE("zero cost yields the uniform coupling") {
  const auto cost = ot::CostMatrix::from(Eigen::MatrixXd::Zero(2, 2));
  const ot::TransportPlan plan = ot::sinkhorn(cost, {0.05, 2000, 1e-9});
  CHECK(plan.converged);
  for (Eigen::Index i = 0; i < 2; ++i) {
    for (Eigen::Index j = 0; j < 2; ++j) {
      CHECK(std::abs(plan.values(i, j) - 0.25) < 1e-12);
    }
  }
  CHECK(std::abs(plan.total_mass - 1.0) < 1e-12);
}

TEST_CASE("expensive off-diagonal pushes all mass onto the diagonal") {
  Eigen::MatrixXd C(2, 2);
  C << 0.0, 10.0, 10.0, 0.0;
  const ot::TransportPlan plan =
      ot::sinkhorn(ot::CostMatrix::from(C), {0.05, 2000, 1e-10});
  CHECK(plan.values(0, 1) < 1e-10);
  CHECK(plan.values(1, 0) < 1e-10);
  CHECK(std::abs(plan.values(0, 0) - 0.5) < 1e-9);
  CHECK(std::abs(plan.values(1, 1) - 0.5) < 1e-9);
}

TEST_CASE("frozen 5x5 reference plan is reproduced to 5e-11") {
  const auto cost = ot::CostMatrix::from(frozen_cost_5x5());
  const ot::TransportPlan plan = ot::sinkhorn(cost, tight_config(0.1));
  CHECK(plan.converged);
  CHECK(plan.iterations_used > 0);
  CHECK(max_abs_diff(plan.values, frozen_plan_5x5()) <= 5e-11);
  CHECK(std::abs(plan.total_mass - 1.0) < 1e-9);
  CHECK(plan.marginal_violation < 1e-13);
  CHECK(plan.log_u.size() == 5);
  CHECK(plan.log_v.size() == 5);
  CHECK(plan.log_u.allFinite());
  CHECK(plan.log_v.allFinite());
}

TEST_CASE("random 5x5 plan matches the interior-point oracle") {
  Rng rng(11);
  const Eigen::MatrixXd C = random_cost(rng, 5);
  const ot::TransportPlan plan =
      ot::sinkhorn(ot::CostMatrix::from(C), {0.1, 100000, 1e-11});
  const Eigen::MatrixXd ref = oracle::entropic_plan_uniform(C, 0.1);
  CHECK(max_abs_diff(plan.values, ref) < 1e-5);   // contract tolerance
  CHECK(max_abs_diff(plan.values, ref) < 1e-8);   // achieved accuracy
}

TEST_CASE("solver agrees with the oracle across sizes and regularizations") {
  Rng rng(23);
  for (const Eigen::Index b : {2, 3, 4, 5, 6}) {
    for (const double eps : {0.05, 0.1, 0.5}) {
      const Eigen::MatrixXd C = random_cost(rng, b);
      const ot::TransportPlan plan =
          ot::sinkhorn(ot::CostMatrix::from(C), {eps, 200000, 1e-11});
      REQUIRE(plan.converged);
      const Eigen::MatrixXd ref = oracle::entropic_plan_uniform(C, eps);
      CAPTURE(b);
      CAPTURE(eps);
      CHECK(max_abs_diff(plan.values, ref) < 1e-6);
    }
  }
}

TEST_CASE("converged plans satisfy both uniform marginals") {
  Rng rng(5);
  const Eigen::MatrixXd C = random_cost(rng, 7);
  const double tol = 1e-9;
  const ot::TransportPlan plan =
      ot::sinkhorn(ot::CostMatrix::from(C), {0.1, 100000, tol});
  REQUIRE(plan.converged);
  const double inv_b = 1.0 / 7.0;
  for (Eigen::Index i = 0; i < 7; ++i) {
    CHECK(std::abs(plan.values.row(i).sum() - inv_b) < tol);
    CHECK(std::abs(plan.values.col(i).sum() - inv_b) < tol);
  }
  CHECK(ot::plan_marginal_violation(plan) < tol);
}

TEST_CASE("hitting the iteration cap reports rather than throws") {
  Rng rng(9);
  const Eigen::MatrixXd C = random_cost(rng, 6);
  const ot::TransportPlan plan =
      ot::sinkhorn(ot::CostMatrix::from(C), {0.05, 1, 1e-14});
  CHECK_FALSE(plan.converged);
  CHECK(plan.iterations_used == 1);
  CHECK(plan.values.allFinite());
  CHECK(plan.marginal_violation > 0.0);
}

TEST_CASE("entropy is non-decreasing in epsilon") {
  Rng rng(31);
  const std::vector<double> grid = {0.05, 0.1, 0.5, 5.0};
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index b = 2 + static_cast<Eigen::Index>(rng.uniform_int(5));
    const Eigen::MatrixXd C = random_cost(rng, b);
    double prev = -1e300;
    for (const double eps : grid) {
      const ot::TransportPlan plan =
          ot::sinkhorn(ot::CostMatrix::from(C), {eps, 100000, 1e-10});
      const double h = ot::plan_entropy(plan);
      CAPTURE(trial);
      CAPTURE(eps);
      CHECK(h >= prev - 1e-9);
      prev = h;
    }
  }
}

TEST_CASE("huge epsilon flattens every entry to 1/b^2") {
  Rng rng(41);
  for (const Eigen::Index b : {2, 5, 8}) {
    const Eigen::MatrixXd C = random_cost(rng, b);
    const ot::TransportPlan plan =
        ot::sinkhorn(ot::CostMatrix::from(C), {100.0, 10000, 1e-12});
    const double flat = 1.0 / static_cast<double>(b * b);
    for (Eigen::Index i = 0; i < b; ++i) {
      for (Eigen::Index j = 0; j < b; ++j) {
        CHECK(std::abs(plan.values(i, j) - flat) <= 0.01 * flat);
      }
    }
  }
}

TEST_CASE("solver is equivariant to row/column permutations") {
  Rng rng(53);
  const Eigen::Index b = 6;
  const Eigen::MatrixXd C = random_cost(rng, b);
  std::vector<Eigen::Index> rows(b), cols(b);
  for (Eigen::Index i = 0; i < b; ++i) rows[i] = cols[i] = i;
  rng.shuffle(rows);
  rng.shuffle(cols);
  Eigen::MatrixXd permuted(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      permuted(i, j) = C(rows[i], cols[j]);
    }
  }
  const ot::SinkhornConfig cfg{0.1, 100000, 1e-12};
  const ot::TransportPlan base = ot::sinkhorn(ot::CostMatrix::from(C), cfg);
  const ot::TransportPlan perm =
      ot::sinkhorn(ot::CostMatrix::from(permuted), cfg);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      CHECK(std::abs(perm.values(i, j) - base.values(rows[i], cols[j])) <
            1e-10);
    }
  }
}

TEST_CASE("full mass partial transport reduces to the standard solver") {
  Rng rng(61);
  const Eigen::MatrixXd C = random_cost(rng, 4);
  const ot::SinkhornConfig cfg{0.1, 20000, 1e-9};
  const ot::TransportPlan full = ot::sinkhorn(ot::CostMatrix::from(C), cfg);
  const ot::TransportPlan part =
      ot::partial_sinkhorn(ot::CostMatrix::from(C), 1.0, cfg);
  CHECK(max_abs_diff(full.values, part.values) < 1e-12);
  CHECK(std::abs(part.total_mass - 1.0) < 1e-9);
}

TEST_CASE("partial transport on a cheap diagonal keeps mass there") {
  Eigen::MatrixXd C(2, 2);
  C << 0.0, 10.0, 10.0, 0.0;
  const ot::TransportPlan plan =
      ot::partial_sinkhorn(ot::CostMatrix::from(C), 0.5, {0.05, 20000, 1e-10});
  CHECK(plan.is_partial);
  CHECK(std::abs(plan.total_mass - 0.5) < 1e-6);
  CHECK(plan.values(0, 1) < 1e-8);
  CHECK(plan.values(1, 0) < 1e-8);
  CHECK(std::abs(plan.values(0, 0) - 0.25) < 1e-3);
  CHECK(std::abs(plan.values(1, 1) - 0.25) < 1e-3);
}

TEST_CASE("frozen 4x4 partial reference plan is reproduced to 5e-11") {
  const auto cost = ot::CostMatrix::from(frozen_cost_4x4());
  const ot::TransportPlan plan =
      ot::partial_sinkhorn(cost, 0.75, tight_config(0.1));
  CHECK(plan.converged);
  CHECK(plan.is_partial);
  CHECK(max_abs_diff(plan.values, frozen_partial_plan_4x4()) <= 5e-11);
  CHECK(std::abs(plan.total_mass - 0.75) < 1e-9);
  CHECK(std::abs(plan.values.sum() - plan.total_mass) < 1e-12);
}

TEST_CASE("partial solver matches the augmented-problem oracle") {
  Rng rng(71);
  const Eigen::MatrixXd C = random_cost(rng, 4);
  for (const double mass : {0.25, 0.5, 0.75}) {
    for (const double eps : {0.05, 0.1}) {
      const ot::TransportPlan plan = ot::partial_sinkhorn(
          ot::CostMatrix::from(C), mass, {eps, 200000, 1e-11});
      REQUIRE(plan.converged);
      const Eigen::MatrixXd ref = oracle::partial_plan_newton(C, mass, eps);
      CAPTURE(mass);
      CAPTURE(eps);
      CHECK(max_abs_diff(plan.values, ref) < 1e-6);
    }
  }
}

TEST_CASE("partial marginals stay below the per-point cap") {
  Rng rng(83);
  const Eigen::Index b = 5;
  const Eigen::MatrixXd C = random_cost(rng, b);
  const double tol = 1e-9;
  const ot::TransportPlan plan =
      ot::partial_sinkhorn(ot::CostMatrix::from(C), 0.6, {0.1, 100000, tol});
  REQUIRE(plan.converged);
  const double cap = 1.0 / static_cast<double>(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    CHECK(plan.values.row(i).sum() <= cap + tol);
    CHECK(plan.values.col(i).sum() <= cap + tol);
  }
  CHECK(std::abs(plan.total_mass - 0.6) < 1e-6);
  CHECK(ot::plan_marginal_violation(plan) < tol);
}

TEST_CASE("marginal violation measures deviation from expected marginals") {
  // Exact uniform full plan: zero violation.
  ot::TransportPlan plan;
  plan.values = Eigen::MatrixXd::Constant(2, 2, 0.25);
  plan.total_mass = 1.0;
  plan.is_partial = false;
  CHECK(ot::plan_marginal_violation(plan) == 0.0);

  // Perturb one row upward by 1e-3: reported exactly.
  plan.values(0, 0) += 1e-3;
  CHECK(std::abs(ot::plan_marginal_violation(plan) - 1e-3) < 1e-12);

  // Partial plans are only penalized for exceeding the cap, not undershooting.
  ot::TransportPlan partial;
  partial.values = Eigen::MatrixXd::Constant(2, 2, 0.05);
  partial.total_mass = 0.2;
  partial.is_partial = true;
  CHECK(ot::plan_marginal_violation(partial) == 0.0);
  partial.values(1, 1) = 0.5;
  CHECK(std::abs(ot::plan_marginal_violation(partial) - (0.55 - 0.5)) < 1e-12);
}

TEST_CASE("input validation rejects malformed problems") {
  CHECK(error_kind_of([] {
          return ot::CostMatrix::from(Eigen::MatrixXd::Zero(2, 3));
        }) == ErrorKind::InvalidArgument);
  CHECK(error_kind_of([] {
          return ot::CostMatrix::from(Eigen::MatrixXd::Zero(1, 1));
        }) == ErrorKind::InvalidArgument);
  CHECK(error_kind_of([] {
          Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 2);
          bad(0, 1) = std::nan("");
          return ot::CostMatrix::from(bad);
        }) == ErrorKind::NonFinite);
  CHECK(error_kind_of([] {
          Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 2);
          bad(1, 0) = -0.5;
          return ot::CostMatrix::from(bad);
        }) == ErrorKind::InvalidArgument);

  const auto cost = ot::CostMatrix::from(Eigen::MatrixXd::Zero(2, 2));
  CHECK(error_kind_of([&] { ot::sinkhorn(cost, {0.0, 2000, 1e-6}); }) ==
        ErrorKind::InvalidArgument);
  CHECK(error_kind_of([&] { ot::sinkhorn(cost, {0.05, 0, 1e-6}); }) ==
        ErrorKind::InvalidArgument);
  CHECK(error_kind_of([&] { ot::sinkhorn(cost, {0.05, 2000, 0.0}); }) ==
        ErrorKind::InvalidArgument);
  CHECK(error_kind_of([&] {
          ot::partial_sinkhorn(cost, 0.0, {0.05, 2000, 1e-6});
        }) == ErrorKind::MassOutOfRange);
  CHECK(error_kind_of([&] {
          ot::partial_sinkhorn(cost, 1.5, {0.05, 2000, 1e-6});
        }) == ErrorKind::MassOutOfRange);
  CHECK(error_kind_of([&] {
          ot::partial_sinkhorn(cost, -0.25, {0.05, 2000, 1e-6});
        }) == ErrorKind::MassOutOfRange);
}
