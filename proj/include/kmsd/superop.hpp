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

#include <unsupported/Eigen/MatrixFunctions>

#include <array>
#include <vector>

#include "kmsd/matrix_core.hpp"

namespace kmsd {

/** Algebra: acts on M_n. L2: acts on the standard-form Hilbert space (M_n with the trace inner product). */
enum class Level { Algebra, L2 };

inline const char* to_string(Level l) { return l == Level::Algebra ? "algebra" : "l2"; }

/** A linear map on n x n matrices, stored as the n^2 x n^2 matrix acting on column-stacked vectors. */
class Superoperator {
 public:
  Superoperator() = default;
  Superoperator(int n, Level level, Matrix mat) : n_(n), level_(level), mat_(std::move(mat)) {
    if (n <= 0 || mat_.rows() != n * n || mat_.cols() != n * n)
      throw Error(ErrorCode::DimensionMismatch, "superoperator matrix must be n^2 x n^2");
    require_finite(mat_, "superoperator");
  }

  static Superoperator identity(int n, Level level = Level::Algebra) {
    return {n, level, Matrix::Identity(n * n, n * n)};
  }
  static Superoperator zero(int n, Level level = Level::Algebra) {
    return {n, level, Matrix::Zero(n * n, n * n)};
  }

  int dim() const { return n_; }
  Level level() const { return level_; }
  const Matrix& mat() const { return mat_; }

  Matrix apply(const Matrix& x) const {
    if (x.rows() != n_ || x.cols() != n_)
      throw Error(ErrorCode::DimensionMismatch, "operand dimension does not match superoperator");
    return unvec(mat_ * vec(x), n_);
  }
  Matrix operator()(const Matrix& x) const { return apply(x); }

  double norm() const { return op_norm(mat_); }

  Superoperator with_level(Level l) const { return {n_, l, mat_}; }
  Superoperator adjoint_hs() const { return {n_, level_, mat_.adjoint()}; }

  friend Superoperator operator*(const Superoperator& s, const Superoperator& t) {
    s.check_compatible(t);
    return {s.n_, s.level_, s.mat_ * t.mat_};
  }
  friend Superoperator operator+(const Superoperator& s, const Superoperator& t) {
    s.check_compatible(t);
    return {s.n_, s.level_, s.mat_ + t.mat_};
  }
  friend Superoperator operator-(const Superoperator& s, const Superoperator& t) {
    s.check_compatible(t);
    return {s.n_, s.level_, s.mat_ - t.mat_};
  }
  friend Superoperator operator*(cplx c, const Superoperator& s) { return {s.n_, s.level_, c * s.mat_}; }
  Superoperator operator-() const { return {n_, level_, -mat_}; }

 private:
  void check_compatible(const Superoperator& t) const {
    if (n_ != t.n_) throw Error(ErrorCode::DimensionMismatch, "superoperator dimensions differ");
    if (level_ != t.level_) throw Error(ErrorCode::WrongLevel, "cannot combine algebra-level and L2-level maps");
  }

  int n_ = 0;
  Level level_ = Level::Algebra;
  Matrix mat_;
};

inline Superoperator lmul(const Matrix& a, Level level = Level::Algebra) {
  require_square(a, "lmul operand");
  const auto n = a.rows();
  return {static_cast<int>(n), level, kron(Matrix::Identity(n, n), a)};
}

inline Superoperator rmul(const Matrix& b, Level level = Level::Algebra) {
  require_square(b, "rmul operand");
  const auto n = b.rows();
  return {static_cast<int>(n), level, kron(b.transpose(), Matrix::Identity(n, n))};
}

/** X -> A X B. */
inline Superoperator sandwich(const Matrix& a, const Matrix& b, Level level = Level::Algebra) {
  return {static_cast<int>(a.rows()), level, kron(b.transpose(), a)};
}

/** X -> sum_j V_j* X V_j. */
inline Superoperator from_kraus(const std::vector<Matrix>& ks, Level level = Level::Algebra) {
  if (ks.empty()) throw Error(ErrorCode::EmptyKrausList, "from_kraus needs at least one operator");
  const auto n = ks.front().rows();
  Matrix m = Matrix::Zero(n * n, n * n);
  for (const auto& k : ks) {
    if (k.rows() != n || k.cols() != n)
      throw Error(ErrorCode::DimensionMismatch, "Kraus operators must share one square shape");
    m += kron(k.transpose(), k.adjoint());
  }
  return {static_cast<int>(n), level, m};
}

/** C = sum_ab E_ab (x) S(E_ab); entry [(a,c),(b,d)] = S(E_ab)(c,d). */
inline Matrix choi(const Superoperator& s) {
  const int n = s.dim();
  Matrix c(n * n, n * n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < n; ++cc)
        for (int d = 0; d < n; ++d) c(a * n + cc, b * n + d) = s.mat()(cc + n * d, a + n * b);
  return c;
}

/** Inverse of choi(). */
inline Superoperator from_choi(const Matrix& c, Level level = Level::Algebra) {
  const auto nn = c.rows();
  const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(nn))));
  if (n * n != nn || c.cols() != nn) throw Error(ErrorCode::DimensionMismatch, "Choi matrix must be n^2 x n^2");
  Matrix m(nn, nn);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < n; ++cc)
        for (int d = 0; d < n; ++d) m(cc + n * d, a + n * b) = c(a * n + cc, b * n + d);
  return {n, level, m};
}

/** Kraus operators K_j with S(X) = sum K_j* X K_j, one per Choi eigenvalue above rank_tol * ||C||. */
inline std::vector<Matrix> kraus_from_choi(const Matrix& c, double rank_tol = 1e-10) {
  const auto nn = c.rows();
  const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(nn))));
  const double scale = op_norm(c);
  if (hermitian_defect(c) > rank_tol * scale + 1e-300)
    throw Error(ErrorCode::NotPSD, "Choi matrix is not Hermitian");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (c + c.adjoint()));
  const RealVector& lam = es.eigenvalues();
  if (nn > 0 && lam(0) < -rank_tol * scale)
    throw Error(ErrorCode::NotPSD, "Choi matrix has eigenvalue " + std::to_string(lam(0)));
  std::vector<Matrix> out;
  for (Eigen::Index k = nn - 1; k >= 0; --k) {
    if (lam(k) <= rank_tol * scale) break;
    const Vector v = std::sqrt(lam(k)) * es.eigenvectors().col(k);
    Matrix kk(n, n);
    for (int a = 0; a < n; ++a)
      for (int cc = 0; cc < n; ++cc) kk(a, cc) = std::conj(v(a * n + cc));
    out.push_back(kk);
  }
  return out;
}

inline double choi_min_eigenvalue(const Superoperator& s) { return min_eigenvalue(choi(s)); }

/** S(X*) = S(X)* on matrix units; returns the worst deviation. */
inline double hermiticity_defect(const Superoperator& s) {
  const int n = s.dim();
  double worst = 0.0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const Matrix lhs = s.apply(unit(n, b, a));
      const Matrix rhs = s.apply(unit(n, a, b)).adjoint();
      worst = std::max(worst, (lhs - rhs).norm());
    }
  return worst;
}

inline Report is_cp(const Superoperator& s, double tol = kDefaultTol) {
  Report r("cp", tol);
  const Matrix c = choi(s);
  const double cn = op_norm(c);
  const double herm = hermitian_defect(c);
  const double lmin = min_eigenvalue(c);
  r.pass = true;
  r.metrics["min_choi_eig"] = lmin;
  r.metrics["choi_norm"] = cn;
  r.metrics["choi_hermitian_defect"] = herm;
  r.require("choi_hermitian", herm <= scaled_tol(tol, cn));
  r.require("choi_psd", lmin >= -scaled_tol(tol, cn));
  return r;
}

/** Gram operator of the KMS form in vec coordinates: <A,B>_rho = vec(A)* G vec(B). */
inline Matrix kms_gram(const DensityContext& ctx) {
  return kron(ctx.rho_half().transpose(), ctx.rho_half());
}

inline Superoperator kms_adjoint(const Superoperator& s, const DensityContext& ctx) {
  if (s.level() != Level::Algebra) throw Error(ErrorCode::WrongLevel, "kms_adjoint acts on algebra-level maps");
  if (s.dim() != ctx.dim()) throw Error(ErrorCode::DimensionMismatch, "superoperator and rho differ in dimension");
  const Matrix g = kms_gram(ctx);
  const Matrix ginv = kron(ctx.rho_minus_half().transpose(), ctx.rho_minus_half());
  return {s.dim(), Level::Algebra, ginv * s.mat().adjoint() * g};
}

/** Algebra level: adjoint for the KMS form. L2 level: Hilbert-Schmidt adjoint. */
inline Report is_kms_symmetric(const Superoperator& s, const DensityContext& ctx, double tol = kDefaultTol) {
  Report r("kms_symmetric", tol);
  const Superoperator adj = s.level() == Level::Algebra ? kms_adjoint(s, ctx) : s.adjoint_hs();
  const double nrm = s.norm();
  const double dev = op_norm(s.mat() - adj.mat());
  r.pass = true;
  r.metrics["deviation"] = dev;
  r.metrics["norm"] = nrm;
  r.metrics["relative_deviation"] = nrm > 0 ? dev / nrm : 0.0;
  r.require("self_adjoint", dev <= scaled_tol(tol, nrm));
  return r;
}

/** exp(-t S). Scaling and squaring with Pade approximants. */
inline Superoperator superop_exp(const Superoperator& s, double t) {
  const Matrix m = (-t * s.mat()).exp();
  return {s.dim(), s.level(), m};
}

inline constexpr std::array<double, 4> kCcnProbeTimes{1e-3, 1e-2, 1e-1, 1.0};

/**
 * Conditional complete negativity of L. Primary test: the Choi matrix of -L compressed to
 * the orthocomplement of Omega = sum_a e_a (x) e_a is PSD. Secondary witness: exp(-tL) is CP
 * at a few times.
 */
inline Report is_ccn(const Superoperator& l, double tol = kDefaultTol) {
  if (l.level() != Level::Algebra) throw Error(ErrorCode::WrongLevel, "is_ccn acts on algebra-level maps");
  const int n = l.dim();
  const double nrm = l.norm();
  const double unital = l.apply(Matrix::Identity(n, n)).norm();
  if (unital > scaled_tol(tol, nrm))
    throw Error(ErrorCode::UnitalityViolated, "||L(I)|| = " + std::to_string(unital));
  const double herm = hermiticity_defect(l);
  if (herm > scaled_tol(tol, nrm))
    throw Error(ErrorCode::NotHermiticityPreserving, "L(X*) != L(X)* on matrix units, defect " + std::to_string(herm));

  Report r("ccn", tol);
  r.pass = true;
  const Matrix c = -choi(l);
  Vector omega = Vector::Zero(n * n);
  for (int a = 0; a < n; ++a) omega(a * n + a) = 1.0 / std::sqrt(static_cast<double>(n));
  // Orthonormal basis of the orthocomplement of omega.
  Matrix basis = Matrix::Identity(n * n, n * n) - omega * omega.adjoint();
  Eigen::SelfAdjointEigenSolver<Matrix> proj(basis);
  const Matrix perp = proj.eigenvectors().rightCols(n * n - 1);
  const double lmin = n * n > 1 ? min_eigenvalue(perp.adjoint() * c * perp) : 0.0;
  r.metrics["projected_choi_min_eig"] = lmin;
  r.metrics["norm"] = nrm;
  r.metrics["unital_defect"] = unital;
  r.metrics["hermiticity_defect"] = herm;
  const bool primary = lmin >= -scaled_tol(tol, nrm);
  r.require("projected_choi", primary);

  bool probe = true;
  double probe_min = 0.0;
  for (double t : kCcnProbeTimes) {
    const Report cp = is_cp(superop_exp(l, t), tol);
    probe_min = std::min(probe_min, cp.metric("min_choi_eig"));
    probe = probe && cp.pass;
  }
  r.metrics["exp_probe_min_choi_eig"] = probe_min;
  r.checks["exp_probe"] = probe;
  r.checks["criteria_agree"] = probe == primary;
  if (probe != primary) r.notes.push_back("projected-Choi and exponential-probe verdicts disagree");
  return r;
}

/** a -> rho^1/4 a rho^1/4 as a superoperator. */
inline Matrix embed_matrix(const DensityContext& ctx) {
  return kron(ctx.rho_quarter().transpose(), ctx.rho_quarter());
}
inline Matrix descend_matrix(const DensityContext& ctx) {
  return kron(ctx.rho_minus_quarter().transpose(), ctx.rho_minus_quarter());
}

/** KMS implementation on the standard form: embed o S o descend. */
inline Superoperator l2_implementation(const Superoperator& s, const DensityContext& ctx) {
  if (s.level() != Level::Algebra) throw Error(ErrorCode::WrongLevel, "expected an algebra-level map");
  return {s.dim(), Level::L2, embed_matrix(ctx) * s.mat() * descend_matrix(ctx)};
}

/** descend o T o embed. */
inline Superoperator algebra_descent(const Superoperator& t, const DensityContext& ctx) {
  if (t.level() != Level::L2) throw Error(ErrorCode::WrongLevel, "expected an L2-level map");
  return {t.dim(), Level::Algebra, descend_matrix(ctx) * t.mat() * embed_matrix(ctx)};
}

/** Markov operator on L2: fixes rho^1/2, its descent is CP, and it commutes with J. */
inline Report is_markov_l2(const Superoperator& t, const DensityContext& ctx, double tol = kDefaultTol) {
  if (t.level() != Level::L2) throw Error(ErrorCode::WrongLevel, "is_markov_l2 acts on L2-level maps");
  if (t.dim() != ctx.dim()) throw Error(ErrorCode::DimensionMismatch, "superoperator and rho differ in dimension");
  Report r("markov_l2", tol);
  r.pass = true;
  const double nrm = t.norm();
  const double fix = (t.apply(ctx.rho_half()) - ctx.rho_half()).norm();
  r.metrics["cyclic_vector_defect"] = fix;
  r.require("fixes_cyclic_vector", fix <= scaled_tol(tol, std::max(1.0, nrm)));
  Report cp = is_cp(algebra_descent(t, ctx), tol);
  r.metrics["min_choi_eig"] = cp.metric("min_choi_eig");
  r.require("cp_descent", cp.pass);
  r.children.push_back(std::move(cp));
  const double jdef = hermiticity_defect(t);
  r.metrics["j_commutation_defect"] = jdef;
  r.require("commutes_with_J", jdef <= scaled_tol(tol, std::max(1.0, nrm)));
  return r;
}

}  // namespace kmsd
