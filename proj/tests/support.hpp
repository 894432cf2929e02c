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

#include <functional>

#include <catch2/catch_amalgamated.hpp>

#include "kmsd/kmsd.hpp"

namespace kmsd::testing {

inline Matrix diag2(double a, double b) {
  Matrix m = Matrix::Zero(2, 2);
  m(0, 0) = a;
  m(1, 1) = b;
  return m;
}

inline Matrix pauli_x() {
  Matrix m = Matrix::Zero(2, 2);
  m(0, 1) = 1.0;
  m(1, 0) = 1.0;
  return m;
}

inline Matrix pauli_z() { return diag2(1.0, -1.0); }

/** rho = diag(3/4, 1/4), the worked example used across the modules. */
inline DensityContext ctx34() { return DensityContext(diag2(0.75, 0.25)); }

/** 1/2 (Phi + Phi^dagger) for Phi = from_kraus(ks). */
inline Superoperator kms_symmetrized(const std::vector<Matrix>& ks, const DensityContext& ctx) {
  const Superoperator phi = from_kraus(ks);
  return cplx(0.5) * (phi + kms_adjoint(phi, ctx));
}

/** Element-wise max modulus; the cross-check norm for exact identities. */
inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

/** Hilbert-Schmidt inner product <x, y> = tr(x* y). */
inline cplx hs(const Matrix& x, const Matrix& y) { return (x.adjoint() * y).trace(); }

/** X -> X^T as an n^2 x n^2 matrix. */
inline Superoperator transpose_map(int n, Level level = Level::Algebra) {
  Matrix m = Matrix::Zero(n * n, n * n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) m(b + n * a, a + n * b) = 1.0;
  return {n, level, m};
}

/** Code of the kmsd::Error thrown by f, or -1. */
inline int error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return static_cast<int>(e.code());
  }
  return -1;
}

}  // namespace kmsd::testing
