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

#include "support.hpp"

using namespace kmsd;
using namespace kmsd::testing;

namespace {

Superoperator depolarizing(int n) {
  // X -> tr(X) I / n
  Matrix m = Matrix::Zero(n * n, n * n);
  for (int a = 0; a < n; ++a)
    for (int c = 0; c < n; ++c) m(c + n * c, a + n * a) = 1.0 / n;
  return {n, Level::Algebra, m};
}

/** Dense evaluation of <A, S(B)>_rho on all matrix-unit pairs. */
Matrix kms_form(const Superoperator& s, const DensityContext& ctx) {
  const int n = ctx.dim(), nn = n * n;
  Matrix f(nn, nn);
  for (int u = 0; u < nn; ++u)
    for (int v = 0; v < nn; ++v) f(u, v) = kms_inner(ctx, unit(n, u % n, u / n), s.apply(unit(n, v % n, v / n)));
  return f;
}

}  // namespace

TEST_CASE("lmul, rmul and from_kraus act as stated", "[superop]") {
  Matrix x(2, 2);
  x << 1, 2, 3, 4;
  Matrix want(2, 2);
  want << 1, 2, 0, 0;
  CHECK(max_abs(lmul(unit(2, 0, 0)).apply(x) - want) == 0.0);
  CHECK(max_abs(from_kraus({Matrix::Identity(3, 3)}).mat() - Matrix::Identity(9, 9)) == 0.0);
  CHECK(max_abs(from_kraus({pauli_x()}).apply(diag2(1, 0)) - diag2(0, 1)) == 0.0);

  Rng rng(1);
  for (int n : {2, 3}) {
    const Matrix a = random_ginibre(n, n, rng), b = random_ginibre(n, n, rng), y = random_ginibre(n, n, rng);
    CHECK(max_abs((lmul(a) * rmul(b)).mat() - (rmul(b) * lmul(a)).mat()) < 1e-13);
    CHECK(max_abs(lmul(a).apply(y) - a * y) < 1e-13);
    CHECK(max_abs(rmul(b).apply(y) - y * b) < 1e-13);
    std::vector<Matrix> ks{random_ginibre(n, n, rng), random_ginibre(n, n, rng)};
    const Matrix direct = ks[0].adjoint() * y * ks[0] + ks[1].adjoint() * y * ks[1];
    CHECK(max_abs(from_kraus(ks).apply(y) - direct) < 1e-12);
  }
}

TEST_CASE("from_kraus and composition guards", "[superop][negative]") {
  CHECK(error_code([] { from_kraus({}); }) == static_cast<int>(ErrorCode::EmptyKrausList));
  CHECK(error_code([] { from_kraus({Matrix::Identity(2, 2), Matrix::Identity(3, 3)}); }) ==
        static_cast<int>(ErrorCode::DimensionMismatch));
  CHECK(error_code([] { (void)(Superoperator::identity(2) * Superoperator::identity(2, Level::L2)); }) ==
        static_cast<int>(ErrorCode::WrongLevel));
  CHECK(error_code([] { (void)(Superoperator::identity(2) + Superoperator::identity(3)); }) ==
        static_cast<int>(ErrorCode::DimensionMismatch));
  // level survives composition
  CHECK((Superoperator::identity(2, Level::L2) * Superoperator::identity(2, Level::L2)).level() == Level::L2);
}

TEST_CASE("choi of identity and depolarizing maps", "[superop]") {
  for (int n : {2, 3}) {
    Vector omega = Vector::Zero(n * n);
    for (int a = 0; a < n; ++a) omega(a * n + a) = 1.0;
    CHECK(max_abs(choi(Superoperator::identity(n)) - omega * omega.adjoint()) == 0.0);
    CHECK(kraus_from_choi(choi(Superoperator::identity(n))).size() == 1);
    CHECK(max_abs(choi(depolarizing(n)) - Matrix::Identity(n * n, n * n) / n) < 1e-15);
  }
}

TEST_CASE("kraus_from_choi round trip and rank", "[superop][property]") {
  Rng rng(2);
  for (int n : {2, 3, 4})
    for (int rank : {1, 2, 3}) {
      const Superoperator s = from_kraus(random_kraus(n, rank, rng));
      const std::vector<Matrix> ks = kraus_from_choi(choi(s));
      CHECK(static_cast<int>(ks.size()) == rank);
      CHECK(op_norm(choi(from_kraus(ks)) - choi(s)) <= 1e-9 * op_norm(choi(s)));
      CHECK(max_abs(from_choi(choi(s)).mat() - s.mat()) == 0.0);
    }
  CHECK(error_code([] { kraus_from_choi(choi(transpose_map(2))); }) == static_cast<int>(ErrorCode::NotPSD));
}

TEST_CASE("Choi is linear and Kraus lists are invariant under unitary remixing", "[superop][property]") {
  Rng rng(3);
  for (int n : {2, 3}) {
    const Superoperator s = random_superop(n, rng), t = random_superop(n, rng);
    const cplx alpha(0.3, -1.7);
    CHECK(max_abs(choi(alpha * s + t) - (alpha * choi(s) + choi(t))) < 1e-14);

    const std::vector<Matrix> ks = random_kraus(n, 3, rng);
    const Matrix w = random_unitary(3, rng);
    std::vector<Matrix> mixed(3, Matrix::Zero(n, n));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mixed[i] += w(i, j) * ks[j];
    CHECK(op_norm(from_kraus(mixed).mat() - from_kraus(ks).mat()) <= 1e-10);
  }
}

TEST_CASE("is_cp examples and the transpose negative control", "[superop][negative]") {
  Rng rng(4);
  const Report ok = is_cp(from_kraus({random_ginibre(3, 3, rng)}));
  CHECK(ok.pass);
  const Report id = is_cp(Superoperator::identity(2));
  CHECK(id.pass);
  CHECK(std::abs(id.metric("min_choi_eig")) < 1e-15);
  const Report tr = is_cp(transpose_map(2));
  CHECK_FALSE(tr.pass);
  CHECK(tr.metric("min_choi_eig") == Catch::Approx(-1.0));
}

TEST_CASE("kms_adjoint matches the KMS form on matrix units", "[superop][property]") {
  Rng rng(5);
  for (int n : {2, 3, 4}) {
    const DensityContext ctx(random_density(n, rng));
    const Superoperator s = random_superop(n, rng), t = random_superop(n, rng);
    const Superoperator sd = kms_adjoint(s, ctx);
    // <S^dagger A, B> = <A, S B>, i.e. form(S^dagger) = form(S)^*
    CHECK(max_abs(kms_form(sd, ctx) - kms_form(s, ctx).adjoint()) <= 1e-10 * s.norm() * ctx.condition());
    CHECK(op_norm(kms_adjoint(sd, ctx).mat() - s.mat()) <= 1e-10 * s.norm() * ctx.condition());
    const double scale = s.norm() * t.norm() * ctx.condition();
    CHECK(op_norm(kms_adjoint(s * t, ctx).mat() - (kms_adjoint(t, ctx) * kms_adjoint(s, ctx)).mat()) <= 1e-10 * scale);
  }
}

TEST_CASE("kms_adjoint examples", "[superop]") {
  const DensityContext ctx = ctx34();
  auto sigma = [&](cplx z) { return sandwich(ctx.power(kI * z), ctx.power(-kI * z)); };
  CHECK(op_norm(kms_adjoint(sigma(cplx(0, 0.25)), ctx).mat() - sigma(cplx(0, 0.25)).mat()) < 1e-12);
  const cplx z(0.4, 0.2);
  CHECK(op_norm(kms_adjoint(sigma(z), ctx).mat() - sigma(-std::conj(z)).mat()) < 1e-12);

  Rng rng(6);
  const Matrix k = random_ginibre(2, 2, rng);
  CHECK(op_norm(kms_adjoint(lmul(k), ctx).mat() - lmul(sigma_z(ctx, cplx(0, 0.5), k.adjoint())).mat()) < 1e-12);

  const DensityContext mixed = DensityContext::maximally_mixed(3);
  const Superoperator s = random_superop(3, rng);
  CHECK(op_norm(kms_adjoint(s, mixed).mat() - s.mat().adjoint()) < 1e-12);
  CHECK(error_code([&] { kms_adjoint(s.with_level(Level::L2), mixed); }) == static_cast<int>(ErrorCode::WrongLevel));
}

TEST_CASE("is_kms_symmetric examples", "[superop][negative]") {
  Rng rng(7);
  const DensityContext ctx(random_density(3, rng));
  CHECK(is_kms_symmetric(kms_symmetrized(random_kraus(3, 2, rng), ctx), ctx).pass);
  CHECK(is_kms_symmetric(Superoperator::identity(3), ctx).pass);
  const Superoperator sigma_t = sandwich(ctx.power(kI * 0.8), ctx.power(-kI * 0.8));
  CHECK_FALSE(is_kms_symmetric(sigma_t, ctx).pass);
  CHECK_FALSE(is_kms_symmetric(from_kraus(random_kraus(3, 2, rng)), ctx).pass);
}

TEST_CASE("is_ccn examples", "[superop][negative]") {
  Rng rng(8);
  const int n = 3;
  const DensityContext mixed = DensityContext::maximally_mixed(n);
  // unital, tracially symmetric Psi: average of a unitary channel and its inverse
  const Matrix u = random_unitary(n, rng);
  const Superoperator psi = cplx(0.5) * (from_kraus({u}) + from_kraus({u.adjoint()}));
  const Superoperator l = Superoperator::identity(n) - psi;
  CHECK(is_ccn(l).pass);
  CHECK(is_ccn(l).checks.at("criteria_agree"));
  const Report flipped = is_ccn(-l);
  CHECK_FALSE(flipped.pass);
  CHECK(flipped.checks.at("criteria_agree"));
  CHECK(is_ccn(Superoperator::zero(n)).pass);

  CHECK(error_code([&] { is_ccn(Superoperator::identity(n)); }) == static_cast<int>(ErrorCode::UnitalityViolated));
  // L(X) = i(X - tr(X) I/n) kills I but does not preserve Hermiticity
  const Superoperator skew = kI * (Superoperator::identity(n) - depolarizing(n));
  CHECK(error_code([&] { is_ccn(skew); }) == static_cast<int>(ErrorCode::NotHermiticityPreserving));
}

TEST_CASE("CND criteria agree on certified generators and perturbed non-generators", "[superop][property]") {
  int agree = 0, certified = 0, rejected = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const int n = 2 + static_cast<int>(seed % 2);
    const Instance inst = random_instance(n, seed, 2);
    const MarkovGenerator g = generator_from_cp(inst.psi, inst.ctx);
    const Report good = is_ccn(g.L());
    certified += good.pass;
    agree += good.checks.at("criteria_agree");

    // Subtract a dominant multiple of an independent generator: unital, Hermiticity
    // preserving, not conditionally negative.
    const Superoperator l0 = generator_from_cp(random_instance(inst.ctx, seed + 1000, 1).psi, inst.ctx).L();
    const Superoperator bad = g.L() - cplx(10.0 * g.L().norm() / l0.norm()) * l0;
    const Report r = is_ccn(bad);
    rejected += !r.pass;
    agree += r.checks.at("criteria_agree");
  }
  CHECK(certified == 100);
  CHECK(rejected == 100);
  CHECK(agree == 200);
}

TEST_CASE("is_markov_l2 examples", "[superop][negative]") {
  Rng rng(9);
  const DensityContext ctx(random_density(2, rng));
  CHECK(is_markov_l2(Superoperator::identity(2, Level::L2), ctx).pass);
  const MarkovGenerator g = generator_from_cp(kms_symmetrized(random_kraus(2, 2, rng), ctx), ctx);
  CHECK(is_markov_l2(evolve(g, 0.5), ctx).pass);
  const Superoperator tr = l2_implementation(transpose_map(2), ctx);
  const Report bad = is_markov_l2(tr, ctx);
  CHECK_FALSE(bad.pass);
  CHECK_FALSE(bad.checks.at("cp_descent"));
  CHECK(error_code([&] { is_markov_l2(Superoperator::identity(2), ctx); }) == static_cast<int>(ErrorCode::WrongLevel));
}

TEST_CASE("superop_exp", "[superop]") {
  const int n = 3;
  Rng rng(10);
  CHECK(max_abs(superop_exp(random_superop(n, rng), 0.0).mat() - Matrix::Identity(9, 9)) < 1e-15);
  // depolarizing generator: e^-t on traceless, 1 on I
  const Superoperator l = Superoperator::identity(n) - depolarizing(n);
  Matrix x = random_ginibre(n, n, rng);
  x -= (x.trace() / static_cast<double>(n)) * Matrix::Identity(n, n);
  const double t = 0.7;
  CHECK(max_abs(superop_exp(l, t).apply(x) - std::exp(-t) * x) < 1e-13);
  CHECK(max_abs(superop_exp(l, t).apply(Matrix::Identity(n, n)) - Matrix::Identity(n, n)) < 1e-13);

  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 5; ++k) {
    const Superoperator s = cplx(0.5) * random_superop(n, rng);
    const double a = u(rng), b = u(rng);
    CHECK(op_norm((superop_exp(s, a) * superop_exp(s, b)).mat() - superop_exp(s, a + b).mat()) <= 1e-9);
    CHECK(op_norm(superop_exp(s, 2 * a).mat() - (superop_exp(s, a) * superop_exp(s, a)).mat()) <= 1e-9);
  }
}
