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

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <string>

#include "kmsd/report.hpp"

namespace kmsd {

using cplx = std::complex<double>;
using Matrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;

inline constexpr double kDefaultTol = 1e-9;
inline constexpr double kMinEigenvalue = 1e-12;
inline constexpr cplx kI{0.0, 1.0};

// ---------------------------------------------------------------------------
// Dense helpers. Vectorization is column stacking: vec(X)[a + n*b] = X(a, b),
// so vec(A X B) = (B^T (x) A) vec(X).

/** Largest singular value; 0 for an empty matrix. */
inline double op_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Vector vec(const Matrix& x) {
  return Eigen::Map<const Vector>(x.data(), x.size());
}

inline Matrix unvec(const Vector& v, Eigen::Index n) {
  return Eigen::Map<const Matrix>(v.data(), n, n);
}

/** Matrix unit E_ab. */
inline Matrix unit(int n, int a, int b) {
  Matrix e = Matrix::Zero(n, n);
  e(a, b) = 1.0;
  return e;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0)
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + " must be a non-empty square matrix");
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) throw Error(ErrorCode::InvalidArgument, std::string(what) + " has non-finite entries");
}

inline double hermitian_defect(const Matrix& h) { return op_norm(h - h.adjoint()); }

struct HermitianEigen {
  RealVector values;  // ascending
  Matrix vectors;     // unitary, columns are eigenvectors
};

/** Spectral decomposition of a Hermitian matrix. */
inline HermitianEigen eig_hermitian(const Matrix& h, double tol = kDefaultTol) {
  require_square(h, "eig_hermitian input");
  const double scale = op_norm(h);
  if (hermitian_defect(h) > tol * scale)
    throw Error(ErrorCode::NotHermitian, "matrix is not Hermitian within tolerance");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (h + h.adjoint()));
  return {es.eigenvalues(), es.eigenvectors()};
}

/** Smallest eigenvalue of the Hermitian part. */
inline double min_eigenvalue(const Matrix& h) {
  if (h.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (h + h.adjoint()), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/** Orthonormal basis of the column space, plus the singular values. */
struct ColumnRange {
  Matrix basis;
  RealVector singular_values;
};

/**
 * Columns with singular value above rank_tol * s_max. BDCSVD first; its U can come back
 * wrong on clustered singular values (seen with Eigen 3.4), so the projection is checked
 * and JacobiSVD takes over when it leaks.
 */
inline ColumnRange column_range(const Matrix& a, double rank_tol) {
  auto take = [&](const Matrix& u, const RealVector& s) {
    Eigen::Index r = 0;
    while (r < s.size() && s(0) > 0 && s(r) > rank_tol * s(0)) ++r;
    return ColumnRange{u.leftCols(r), s};
  };
  if (a.size() == 0) return {Matrix(a.rows(), 0), RealVector()};
  Eigen::BDCSVD<Matrix> fast(a, Eigen::ComputeThinU);
  ColumnRange out = take(fast.matrixU(), fast.singularValues());
  const double scale = out.singular_values(0);
  const double leak = (a - out.basis * (out.basis.adjoint() * a)).norm();
  const double orth = (out.basis.adjoint() * out.basis - Matrix::Identity(out.basis.cols(), out.basis.cols())).norm();
  if (leak <= 1e-12 * std::max(scale, 1e-300) * std::sqrt(static_cast<double>(a.cols())) + rank_tol * scale * a.cols() &&
      orth <= 1e-12 * std::sqrt(static_cast<double>(a.rows())))
    return out;
  Eigen::JacobiSVD<Matrix> slow(a, Eigen::ComputeThinU);
  return take(slow.matrixU(), slow.singularValues());
}

// ---------------------------------------------------------------------------

/**
 * A faithful density matrix with its spectral data.
 *
 * Powers of rho are evaluated through the eigendecomposition, so every
 * derived map is a function of the eigenvalues p_a only.
 */
class DensityContext {
 public:
  explicit DensityContext(const Matrix& rho, double tol = kDefaultTol) : rho_(rho), tol_(tol) {
    require_square(rho, "rho");
    require_finite(rho, "rho");
    if (!(tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "tolerance must be positive");
    const double scale = op_norm(rho);
    if (hermitian_defect(rho) > 1e-12 * scale + 1e-15)
      throw Error(ErrorCode::NotHermitian, "rho is not Hermitian");
    rho_ = 0.5 * (rho + rho.adjoint());
    Eigen::SelfAdjointEigenSolver<Matrix> es(rho_);
    p_ = es.eigenvalues();
    u_ = es.eigenvectors();
    if (p_(0) < kMinEigenvalue)
      throw Error(ErrorCode::NotPositiveDefinite,
                  "rho has eigenvalue " + std::to_string(p_(0)) + " below 1e-12");
    if (std::abs(p_.sum() - 1.0) > 1e-12)
      throw Error(ErrorCode::InvalidArgument, "rho must have unit trace");
    if (op_norm(rho_ - u_ * p_.cast<cplx>().asDiagonal() * u_.adjoint()) > 1e-12 * scale)
      throw Error(ErrorCode::InvalidArgument, "spectral reconstruction of rho failed");
    q4_ = power(0.25);
    qm4_ = power(-0.25);
    q2_ = power(0.5);
    qm2_ = power(-0.5);
  }

  static DensityContext maximally_mixed(int n, double tol = kDefaultTol) {
    return DensityContext(Matrix::Identity(n, n) / static_cast<double>(n), tol);
  }

  int dim() const { return static_cast<int>(rho_.rows()); }
  double tol() const { return tol_; }
  const Matrix& rho() const { return rho_; }
  const RealVector& eigenvalues() const { return p_; }
  const Matrix& eigenvectors() const { return u_; }
  double condition() const { return p_(p_.size() - 1) / p_(0); }

  /** rho^z through the spectral decomposition. */
  Matrix power(cplx z) const {
    Vector d(p_.size());
    for (Eigen::Index a = 0; a < p_.size(); ++a) d(a) = std::exp(z * std::log(p_(a)));
    return u_ * d.asDiagonal() * u_.adjoint();
  }

  const Matrix& rho_quarter() const { return q4_; }
  const Matrix& rho_minus_quarter() const { return qm4_; }
  const Matrix& rho_half() const { return q2_; }
  const Matrix& rho_minus_half() const { return qm2_; }

  Matrix to_eigenbasis(const Matrix& a) const { return u_.adjoint() * a * u_; }
  Matrix from_eigenbasis(const Matrix& a) const { return u_ * a * u_.adjoint(); }

  void check_dim(const Matrix& a) const {
    if (a.rows() != rho_.rows() || a.cols() != rho_.cols())
      throw Error(ErrorCode::DimensionMismatch, "operand dimension does not match rho");
  }

  /** Applies the eigenbasis Schur multiplier f(p_a, p_b) to a. */
  template <typename F>
  Matrix schur_in_eigenbasis(const Matrix& a, F&& f) const {
    Matrix b = to_eigenbasis(a);
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, j) *= f(p_(i), p_(j));
    return from_eigenbasis(b);
  }

 private:
  Matrix rho_;
  double tol_;
  RealVector p_;
  Matrix u_;
  Matrix q4_, qm4_, q2_, qm2_;
};

inline Matrix frac_power(const DensityContext& ctx, cplx z) { return ctx.power(z); }

/** <A, B>_rho = tr(A* rho^1/2 B rho^1/2). */
inline cplx kms_inner(const DensityContext& ctx, const Matrix& a, const Matrix& b) {
  ctx.check_dim(a);
  ctx.check_dim(b);
  return (a.adjoint() * ctx.rho_half() * b * ctx.rho_half()).trace();
}

/** sigma_z without the |Im z| <= 1/2 restriction. Conditioning degrades like cond(rho)^|Im z|. */
inline Matrix sigma_z_unchecked(const DensityContext& ctx, cplx z, const Matrix& a) {
  ctx.check_dim(a);
  return ctx.schur_in_eigenbasis(a, [z](double pa, double pb) {
    return std::exp(kI * z * (std::log(pa) - std::log(pb)));
  });
}

/** sigma_z(A) = rho^{iz} A rho^{-iz}; public path restricted to |Im z| <= 1/2. */
inline Matrix sigma_z(const DensityContext& ctx, cplx z, const Matrix& a) {
  if (std::abs(z.imag()) > 0.5 + 1e-15)
    throw Error(ErrorCode::InvalidArgument, "sigma_z: |Im z| > 1/2 requires sigma_z_unchecked");
  return sigma_z_unchecked(ctx, z, a);
}

/** x -> rho^1/4 x rho^1/4, the standard-form image of x. */
inline Matrix embed(const DensityContext& ctx, const Matrix& x) {
  ctx.check_dim(x);
  return ctx.rho_quarter() * x * ctx.rho_quarter();
}

inline Matrix descend(const DensityContext& ctx, const Matrix& a) {
  ctx.check_dim(a);
  return ctx.rho_minus_quarter() * a * ctx.rho_minus_quarter();
}

/** J(a) = a*. Antilinear. */
inline Matrix modular_conjugation(const DensityContext& ctx, const Matrix& a) {
  ctx.check_dim(a);
  return a.adjoint();
}

/** Delta^s(a) = rho^s a rho^{-s}. */
inline Matrix modular_power_apply(const DensityContext& ctx, double s, const Matrix& a) {
  ctx.check_dim(a);
  return ctx.schur_in_eigenbasis(a, [s](double pa, double pb) { return std::pow(pa / pb, s); });
}

/**
 * Scale used for relative tolerances. The absolute floor absorbs roundoff when the
 * reference norm is itself roundoff, e.g. L = drift(I) - id.
 */
inline double scaled_tol(double tol, double norm) { return tol * norm + 1e-13; }

}  // namespace kmsd
