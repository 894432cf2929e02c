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

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kmsd/superop.hpp"

namespace kmsd {

using Rng = std::mt19937_64;

inline Matrix random_ginibre(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(0.5));
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double re = g(rng);
      const double im = g(rng);
      m(i, j) = cplx(re, im);
    }
  return m;
}

inline Matrix random_hermitian(int n, Rng& rng) {
  const Matrix g = random_ginibre(n, n, rng);
  return 0.5 * (g + g.adjoint());
}

/** Haar unitary: QR of a Ginibre matrix with the phases of R's diagonal removed. */
inline Matrix random_unitary(int n, Rng& rng) {
  const Matrix g = random_ginibre(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR();
  for (int j = 0; j < n; ++j) {
    const double mag = std::abs(r(j, j));
    if (mag > 0) q.col(j) *= r(j, j) / mag;
  }
  return q;
}

/** Density matrix with eigenvalues spread log-uniformly so that p_max / p_min <= cond_bound. */
inline Matrix random_density(int n, Rng& rng, double cond_bound = 100.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RealVector q(n);
  for (int a = 0; a < n; ++a) q(a) = std::pow(cond_bound, u(rng));
  q /= q.sum();
  const Matrix v = random_unitary(n, rng);
  Matrix rho = v * q.cast<cplx>().asDiagonal() * v.adjoint();
  rho = 0.5 * (rho + rho.adjoint());
  rho /= rho.trace().real();
  return rho;
}

inline Superoperator random_superop(int n, Rng& rng, Level level = Level::Algebra) {
  return {n, level, random_ginibre(n * n, n * n, rng)};
}

inline std::vector<Matrix> random_kraus(int n, int rank, Rng& rng) {
  std::vector<Matrix> ks;
  for (int j = 0; j < rank; ++j) ks.push_back(random_ginibre(n, n, rng));
  return ks;
}

struct Instance {
  DensityContext ctx;
  Superoperator psi;
  std::uint64_t seed = 0;
  int kraus_rank = 0;
};

inline constexpr double kDefaultConditionBound = 100.0;

/**
 * Seeded (rho, Psi): Psi is the KMS symmetrization of a random Kraus map, scaled to unit
 * operator norm. Bit-identical for equal arguments.
 */
inline Instance random_instance(int n, std::uint64_t seed, int kraus_rank,
                                double cond_bound = kDefaultConditionBound, double tol = kDefaultTol) {
  if (n < 2) throw Error(ErrorCode::InvalidArgument, "random_instance needs n >= 2");
  if (kraus_rank < 1) throw Error(ErrorCode::InvalidArgument, "random_instance needs kraus_rank >= 1");
  if (!(cond_bound >= 1.0)) throw Error(ErrorCode::InvalidArgument, "condition bound must be >= 1");
  Rng rng(seed);
  DensityContext ctx(random_density(n, rng, cond_bound), tol);
  const Superoperator phi = from_kraus(random_kraus(n, kraus_rank, rng));
  Superoperator psi = cplx(0.5) * (phi + kms_adjoint(phi, ctx));
  psi = cplx(1.0 / psi.norm()) * psi;
  return {ctx, psi, seed, kraus_rank};
}

/** Same ensemble for Psi with a caller-supplied rho. */
inline Instance random_instance(const DensityContext& ctx, std::uint64_t seed, int kraus_rank) {
  if (kraus_rank < 1) throw Error(ErrorCode::InvalidArgument, "random_instance needs kraus_rank >= 1");
  Rng rng(seed);
  const Superoperator phi = from_kraus(random_kraus(ctx.dim(), kraus_rank, rng));
  Superoperator psi = cplx(0.5) * (phi + kms_adjoint(phi, ctx));
  psi = cplx(1.0 / psi.norm()) * psi;
  return {ctx, psi, seed, kraus_rank};
}

}  // namespace kmsd
