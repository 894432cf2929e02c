// Copyright 2026 The kmsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "oracles.hpp"
#include "support.hpp"

using namespace kmsd;
using namespace kmsd::testing;

namespace {

/** X -> tr(X) I. */
Superoperator trace_times_identity(int n) {
  Matrix m = Matrix::Zero(n * n, n * n);
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < n; ++c) m(c + n * c, a + n * a) = 1.0;
  return {n, Level::Algebra, m};
}

/** Solves X + rho^s X rho^-s = m for s = +-1/2 as a dense n^2 linear system. */
Matrix solve_one_plus_sigma(const DensityContext& ctx, const Matrix& m, double s) {
  const int n = ctx.dim();
  const Matrix a = ctx.power(s), b = ctx.power(-s);
  const Matrix sys = Matrix::Identity(n * n, n * n) + kron(b.transpose(), a);
  return unvec(sys.partialPivLu().solve(vec(m)), n);
}

/** The defining formula for L evaluated directly on one matrix unit. */
Matrix defining_formula(const Superoperator& psi, const DensityContext& ctx, const Matrix& e) {
  const int n = ctx.dim();
  const Matrix m = psi.apply(Matrix::Identity(n, n));
  return solve_one_plus_sigma(ctx, m, 0.5) * e + e * solve_one_plus_sigma(ctx, m, -0.5) - psi.apply(e);
}

MarkovGenerator sigma_x_generator() {
  const DensityContext ctx = ctx34();
  return generator_from_cp(kms_symmetrized({pauli_x()}, ctx), ctx);
}

}  // namespace

TEST_CASE("generator_from_cp examples", "[generator]") {
  const int n = 3;
  const DensityContext tracial = DensityContext::maximally_mixed(n);
  const MarkovGenerator dep = generator_from_cp(trace_times_identity(n), tracial);
  Rng rng(1);
  const Matrix x = random_ginibre(n, n, rng);
  CHECK(max_abs(dep.L().apply(x) - (double(n) * x - x.trace() * Matrix::Identity(n, n))) < 1e-13);

  for (const DensityContext& ctx : {ctx34(), DensityContext(random_density(3, rng))}) {
    const MarkovGenerator zero = generator_from_cp(Superoperator::identity(ctx.dim()), ctx);
    CHECK(max_abs(zero.L().mat()) < 1e-13);
  }

  const MarkovGenerator g = sigma_x_generator();
  CHECK(g.certified());
  CHECK(g.unital_kernel().metric("defect") <= 1e-10);
  CHECK(g.kms_symmetric().pass);
  CHECK(g.ccn().metric("projected_choi_min_eig") >= -1e-8);
  const Superoperator psi = kms_symmetrized({pauli_x()}, ctx34());
  for (int u = 0; u < 4; ++u) {
    const Matrix e = unit(2, u % 2, u / 2);
    CHECK(max_abs(g.L().apply(e) - defining_formula(psi, ctx34(), e)) < 1e-13);
  }
}

TEST_CASE("L agrees with its defining formula entrywise on random instances", "[generator][property]") {
  for (int n : {2, 3}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Instance inst = random_instance(n, seed, 2);
      const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
      double worst = 0.0;
      for (int u = 0; u < n * n; ++u) {
        const Matrix e = unit(n, u % n, u / n);
        worst = std::max(worst, max_abs(g.L().apply(e) - defining_formula(inst.psi, inst.ctx, e)));
      }
      CHECK(worst <= 1e-10);
      Rng rng(seed);
      const Matrix x = random_ginibre(n, n, rng);
      CHECK(max_abs(g.L2().apply(embed(inst.ctx, x)) - embed(inst.ctx, g.L().apply(x))) <= 1e-10);
    }
  }
}

TEST_CASE("resolvents: partial fractions and inversion", "[generator][property]") {
  Rng rng(2);
  for (int n : {2, 3, 4}) {
    const DensityContext ctx(random_density(n, rng));
    const Matrix m = random_hermitian(n, rng);
    const Matrix km = resolvent_minus(ctx, m), kp = resolvent_plus(ctx, m);
    CHECK(max_abs(km + kp - m) < 1e-13);
    CHECK(max_abs(km + sigma_z(ctx, cplx(0, -0.5), km) - m) < 1e-12);
    CHECK(max_abs(kp + sigma_z(ctx, cplx(0, 0.5), kp) - m) < 1e-12);
    CHECK(max_abs(km - solve_one_plus_sigma(ctx, m, 0.5)) < 1e-12);
  }
}

TEST_CASE("generator_from_cp guards", "[generator][negative]") {
  const DensityContext ctx = ctx34();
  try {
    generator_from_cp(transpose_map(2), ctx);
    FAIL("transpose accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::PreconditionFailed);
    REQUIRE(e.has_report());
    CHECK(e.report().metric("min_choi_eig") < 0);
  }
  Rng rng(3);
  CHECK(error_code([&] { generator_from_cp(from_kraus({random_ginibre(2, 2, rng)}), ctx); }) ==
        static_cast<int>(ErrorCode::PreconditionFailed));
  CHECK(error_code([&] { generator_from_cp(Superoperator::identity(2, Level::L2), ctx); }) ==
        static_cast<int>(ErrorCode::WrongLevel));

  const MarkovGenerator g = sigma_x_generator();
  try {
    MarkovGenerator::certify(cplx(-1.0) * g.L(), ctx);
    FAIL("negated generator certified");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CertificationFailed);
    REQUIRE(e.has_report());
    CHECK_FALSE(e.report().child("ccn")->pass);
  }
}

TEST_CASE("recover_cp_from_generator round trip", "[generator]") {
  for (RecoveryMethod method : {RecoveryMethod::Schur, RecoveryMethod::AlternatingProjection}) {
    for (int n : {2, 3}) {
      for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Instance inst = random_instance(n, seed, 2);
        const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
        const RecoveryResult rec = recover_cp_from_generator(g, 5000, 1e-9, method);
        INFO("n = " << n << ", seed = " << seed << ", schur = " << (method == RecoveryMethod::Schur));
        CHECK(rec.report.pass);
        CHECK(is_cp(rec.psi, 1e-9).pass);
        CHECK(is_kms_symmetric(rec.psi, inst.ctx, 1e-9).pass);
        // Independent round trip through the forward construction.
        const MarkovGenerator back = generator_from_cp(rec.psi, inst.ctx, 1e-8);
        CHECK(op_norm(back.L().mat() - g.L().mat()) <= 1e-8);
      }
    }
  }
}

TEST_CASE("recover_cp_from_generator special cases", "[generator]") {
  const DensityContext ctx = ctx34();
  const MarkovGenerator zero = MarkovGenerator::certify(Superoperator::zero(2), ctx);
  const RecoveryResult r0 = recover_cp_from_generator(zero);
  CHECK(r0.report.pass);
  CHECK(r0.report.metric("roundtrip_residual") <= 1e-12);

  const DensityContext tracial = DensityContext::maximally_mixed(3);
  const MarkovGenerator dep = generator_from_cp(trace_times_identity(3), tracial);
  for (RecoveryMethod method : {RecoveryMethod::Schur, RecoveryMethod::AlternatingProjection}) {
    const RecoveryResult r = recover_cp_from_generator(dep, 5000, 1e-9, method);
    CHECK(r.report.metric("roundtrip_residual") <= 1e-8);
    CHECK(is_cp(r.psi, 1e-9).pass);
  }
}

TEST_CASE("recovery reports Infeasible on a non-generator", "[generator][negative]") {
  const MarkovGenerator g = sigma_x_generator();
  const MarkovGenerator bad = MarkovGenerator::unverified(cplx(-1.0) * g.L(), g.ctx());
  REQUIRE_FALSE(bad.certified());
  for (RecoveryMethod method : {RecoveryMethod::Schur, RecoveryMethod::AlternatingProjection}) {
    try {
      recover_cp_from_generator(bad, 500, 1e-9, method);
      FAIL("recovered a CP map for -L");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Infeasible);
      REQUIRE(e.has_report());
      CHECK(e.report().metric("min_choi_eig") < -1e-6);
    }
  }
}

TEST_CASE("semigroup stays Markov", "[generator][property]") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Instance inst = random_instance(3, seed, 2);
    const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
    for (double t : {0.1, 1.0, 10.0}) CHECK(is_markov_l2(evolve(g, t), inst.ctx, 1e-8).pass);
    CHECK(max_abs(evolve(g, 0.0).mat() - Matrix::Identity(9, 9)) < 1e-14);
  }
}

TEST_CASE("Chernoff product formula", "[generator]") {
  const MarkovGenerator dep = generator_from_cp(trace_times_identity(3), DensityContext::maximally_mixed(3));
  for (int steps : {1, 8, 64}) CHECK(chernoff_residual(dep, 1.0, steps) <= 1e-12);

  const MarkovGenerator g = sigma_x_generator();
  CHECK(chernoff_residual(g, 0.0, 1) <= 1e-14);
  const double r8 = chernoff_residual(g, 1.0, 8), r64 = chernoff_residual(g, 1.0, 64);
  CHECK(r8 > 1e-6);
  CHECK(r64 / r8 <= 0.25);
  CHECK(r64 / r8 >= 1.0 / 16.0);

  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Instance inst = random_instance(2, seed, 2);
    const MarkovGenerator h = generator_from_cp(inst.psi, inst.ctx);
    const double ratio = chernoff_residual(h, 1.0, 64) / chernoff_residual(h, 1.0, 8);
    INFO("seed = " << seed);
    CHECK(ratio <= 0.25);
  }

  CHECK(error_code([&] { chernoff_residual(g, 1.0, 0); }) == static_cast<int>(ErrorCode::InvalidArgument));
  CHECK(error_code([&] { chernoff_residual(g, -1.0, 4); }) == static_cast<int>(ErrorCode::InvalidArgument));
}

TEST_CASE("Dirichlet energy examples", "[generator]") {
  const int n = 3;
  const DensityContext tracial = DensityContext::maximally_mixed(n);
  const MarkovGenerator dep = generator_from_cp(trace_times_identity(n), tracial);
  Rng rng(5);
  Matrix a = random_ginibre(n, n, rng);
  a -= (a.trace() / double(n)) * Matrix::Identity(n, n);
  a /= a.norm();
  CHECK(std::abs(dirichlet_energy(dep, a) - n) < 1e-12);
  CHECK(std::abs(dirichlet_sample(dep, a).energy - n) < 1e-12);

  const MarkovGenerator g = sigma_x_generator();
  CHECK(std::abs(dirichlet_energy(g, g.ctx().rho_half())) <= 1e-10);
  CHECK(error_code([&] { et_energy(g, g.ctx().rho_half(), 0.0); }) == static_cast<int>(ErrorCode::InvalidArgument));
}

TEST_CASE("E_t increases to E as t decreases", "[generator][property]") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Instance inst = random_instance(3, seed, 2);
    const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
    Rng rng(seed + 50);
    for (int k = 0; k < 20; ++k) {
      const Matrix a = random_ginibre(3, 3, rng);
      const double e = dirichlet_energy(g, a);
      CHECK(e >= -1e-10);
      CHECK(std::abs(dirichlet_energy(g, modular_conjugation(inst.ctx, a)) - e) <= 1e-10 * std::max(1.0, e));
      double prev = et_energy(g, a, 1.0);
      for (int j = 1; j <= 20; ++j) {
        const double cur = et_energy(g, a, std::ldexp(1.0, -j));
        CHECK(cur >= prev - 1e-10);
        CHECK(cur <= e + 1e-10);
        prev = cur;
      }
      CHECK(std::abs(prev - e) <= 1e-5 * std::max(1.0, e));
      CHECK(et_energy(g, a, 1.0) <= et_energy(g, a, 1.0 / 16) + 1e-10);
    }
  }
}

TEST_CASE("cone_project fixes points of the cone", "[generator]") {
  Rng rng(7);
  for (const DensityContext& ctx : {ctx34(), DensityContext(random_density(3, rng))}) {
    const ConeProjection apex = cone_project(ctx, ctx.rho_half());
    CHECK(max_abs(apex.point - ctx.rho_half()) < 1e-10);
    const Matrix g = random_ginibre(ctx.dim(), ctx.dim(), rng);
    const Matrix inside = ctx.rho_half() - embed(ctx, g * g.adjoint());
    const ConeProjection p = cone_project(ctx, inside);
    CHECK(max_abs(p.point - inside) < 1e-8);
    CHECK(min_eigenvalue(p.v) >= -1e-10);
  }
}

TEST_CASE("cone_project matches a brute-force oracle at n = 2", "[generator][oracle]") {
  struct Case {
    DensityContext ctx;
    Matrix x;
  };
  Matrix offdiag(2, 2);
  offdiag << 1.0, 2.0, 2.0, -1.0;
  const std::vector<Case> cases{{DensityContext::maximally_mixed(2), diag2(3.0, -1.0)}, {ctx34(), offdiag}};
  for (const Case& c : cases) {
    const Matrix a = embed(c.ctx, c.x);
    const ConeProjection p = cone_project(c.ctx, a);
    const Eigen::Matrix2d oracle =
        brute_force_cone_point(a.real(), c.ctx.rho_half().real(), c.ctx.rho_quarter().real());
    CHECK(max_abs(p.point - oracle.cast<cplx>()) <= 1e-6);
    CHECK(cone_projection_certificate(c.ctx, a, p, 100, 1).pass);
  }
  // Closed form in the tracial case: v = 2 E22, point = diag(1, -1)/sqrt2.
  const ConeProjection p = cone_project(DensityContext::maximally_mixed(2), diag2(3.0, -1.0) / std::sqrt(2.0));
  CHECK(max_abs(p.point - diag2(1.0, -1.0) / std::sqrt(2.0)) <= 1e-8);
}

TEST_CASE("cone projection certificate and guards", "[generator][negative]") {
  const DensityContext ctx = DensityContext::maximally_mixed(2);
  const Matrix a = embed(ctx, diag2(3.0, -1.0));
  ConeProjection wrong;
  wrong.point = ctx.rho_half();
  wrong.v = Matrix::Zero(2, 2);
  const Report r = cone_projection_certificate(ctx, a, wrong, 100, 1);
  CHECK_FALSE(r.pass);
  CHECK(r.metric("max_variational") > 0.1);

  Matrix nonherm = unit(2, 0, 1);
  CHECK(error_code([&] { cone_project(ctx, nonherm); }) == static_cast<int>(ErrorCode::NotJFixed));
  CHECK(error_code([&] { cone_project(ctx, a, 1); }) == static_cast<int>(ErrorCode::NoConvergence));
}

TEST_CASE("Dirichlet contraction check", "[generator]") {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const Instance inst = random_instance(3, seed, 2);
    const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
    const Report r = dirichlet_contraction_check(g, 50, 1e-8, seed);
    CHECK(r.pass);
    CHECK(r.metric("max_j_defect") <= 1e-10);
  }
}

TEST_CASE("Dirichlet contraction fails for a CND-violating map", "[generator][negative]") {
  const MarkovGenerator g = sigma_x_generator();
  const MarkovGenerator bad = MarkovGenerator::unverified(cplx(-1.0) * g.L(), g.ctx());
  const Report r = dirichlet_contraction_check(bad, 50, 1e-8, 3);
  CHECK_FALSE(r.pass);
  CHECK_FALSE(r.checks.at("cone_contraction"));
}

TEST_CASE("energy product inequality", "[generator]") {
  for (int n : {2, 3}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Instance inst = random_instance(n, seed, 2);
      const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
      Rng rng(seed + 70);
      for (int k = 0; k < 50; ++k) {
        const Matrix a = random_ginibre(n, n, rng), b = random_ginibre(n, n, rng);
        CHECK(energy_product_inequality(g, a, b, 1e-8).pass);
      }
      const Matrix b = random_ginibre(n, n, rng);
      const Report left = energy_product_inequality(g, inst.ctx.rho_half(), b, 1e-8);
      CHECK(left.pass);
      CHECK(left.metric("slack") >= -1e-8);
      CHECK(energy_product_inequality(g, b, inst.ctx.rho_half(), 1e-8).pass);
    }
  }
}

TEST_CASE("energy product inequality fails for a non-Dirichlet form", "[generator][negative]") {
  // E(a) = |<E11, a>|^2 vanishes on E12 and E21 but not on their product.
  const DensityContext ctx = DensityContext::maximally_mixed(2);
  const Vector e11 = vec(unit(2, 0, 0));
  const MarkovGenerator bad =
      MarkovGenerator::unverified(Superoperator(2, Level::Algebra, e11 * e11.adjoint()), ctx);
  const Report r = energy_product_inequality(bad, unit(2, 0, 1), unit(2, 1, 0), 1e-8);
  CHECK_FALSE(r.pass);
  CHECK(r.metric("lhs") > 1.0);
}
