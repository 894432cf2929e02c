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

#include <random>

#include "kmsd/superop.hpp"

namespace kmsd {

/**
 * Spectrum of the modular superoperator Delta(a) = rho a rho^-1.
 *
 * Eigenvector (a, b) is u_a u_b^*, stored at index a + n*b with eigenvalue p_a / p_b.
 * basis = conj(U) (x) U maps eigen-coordinates to computational vec coordinates.
 */
struct ModularSpectrum {
  int n = 0;
  RealVector lambda;
  Matrix basis;
};

inline ModularSpectrum modular_spectrum(const DensityContext& ctx) {
  const int n = ctx.dim();
  ModularSpectrum ms;
  ms.n = n;
  ms.lambda.resize(n * n);
  const RealVector& p = ctx.eigenvalues();
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < n; ++a) ms.lambda(a + n * b) = p(a) / p(b);
  ms.basis = kron(ctx.eigenvectors().conjugate(), ctx.eigenvectors());
  return ms;
}

/** Delta^s as a superoperator. */
inline Matrix modular_superop(const DensityContext& ctx, double s) {
  return kron(ctx.power(-s).transpose(), ctx.power(s));
}

inline void check_ctx(const Superoperator& s, const DensityContext& ctx) {
  if (s.dim() != ctx.dim()) throw Error(ErrorCode::DimensionMismatch, "superoperator and rho differ in dimension");
}

/** W(S) = 1/2 (Delta^1/4 S Delta^-1/4 + Delta^-1/4 S Delta^1/4). */
inline Superoperator w_transform(const Superoperator& s, const DensityContext& ctx) {
  check_ctx(s, ctx);
  const Matrix dp = modular_superop(ctx, 0.25);
  const Matrix dm = modular_superop(ctx, -0.25);
  return {s.dim(), s.level(), 0.5 * (dp * s.mat() * dm + dm * s.mat() * dp)};
}

/** Schur weights of the V-transform in Delta eigen-coordinates. */
inline Eigen::MatrixXd v_weights(const ModularSpectrum& ms) {
  const auto m = ms.lambda.size();
  Eigen::MatrixXd k(m, m);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < m; ++i) {
      const double r = std::pow(ms.lambda(i) / ms.lambda(j), 0.25);
      k(i, j) = 2.0 / (r + 1.0 / r);
    }
  return k;
}

/** Inverse of w_transform: entrywise division in the Delta eigenbasis. */
inline Superoperator v_transform(const Superoperator& s, const DensityContext& ctx) {
  check_ctx(s, ctx);
  const ModularSpectrum ms = modular_spectrum(ctx);
  Matrix t = ms.basis.adjoint() * s.mat() * ms.basis;
  t.array() *= v_weights(ms).cast<cplx>().array();
  return {s.dim(), s.level(), ms.basis * t * ms.basis.adjoint()};
}

enum class QuadratureVariant {
  Standard,  // 2 int Delta^1/4 e^{-r Delta^1/2} T Delta^1/4 e^{-r Delta^1/2} dr
  Inverse,   // Delta replaced by Delta^-1
};

struct QuadratureResult {
  Superoperator value;
  double tail_bound = 0.0;      // relative size of the truncated tail
  double error_estimate = 0.0;  // step-doubling estimate, operator norm
  double r_max = 0.0;
  long steps = 0;
};

inline constexpr double kQuadratureMaxCondition = 1e6;

/** Smallest r_max with e^{-2 sqrt(lambda_min) r_max} <= tail. */
inline double quadrature_range(const DensityContext& ctx, double tail = 1e-12) {
  const double cond = ctx.condition();
  // lambda ranges over [1/cond, cond] for Delta and Delta^-1 alike.
  return std::log(1.0 / tail) / (2.0 * std::sqrt(1.0 / cond));
}

/** Steps such that the trapezoid relative error (c h)^2 / 12 stays below target. */
inline long quadrature_steps(const DensityContext& ctx, double r_max, double target = 1e-8) {
  const double cmax = 2.0 * std::sqrt(ctx.condition());
  const double h = std::sqrt(12.0 * target) / cmax;
  return std::max<long>(1000, static_cast<long>(std::ceil(r_max / h)));
}

/**
 * Independent oracle for v_transform: uniform trapezoid rule on [0, r_max].
 *
 * Delta is rebuilt from rho directly and diagonalized as an n^2 x n^2 operator, so no
 * code is shared with the closed form. The result uses 2*steps panels; the error estimate
 * compares against the rule with steps panels.
 */
inline QuadratureResult v_transform_quadrature(const Superoperator& s, const DensityContext& ctx, double r_max,
                                               long steps, QuadratureVariant variant = QuadratureVariant::Standard,
                                               double prefactor = 2.0) {
  check_ctx(s, ctx);
  if (steps < 1000) throw Error(ErrorCode::InvalidArgument, "quadrature needs at least 1000 steps");
  if (ctx.condition() > kQuadratureMaxCondition)
    throw Error(ErrorCode::InsufficientRange, "rho condition number exceeds 1e6");
  const Matrix rho_inv = ctx.rho().inverse();
  Matrix delta = kron(rho_inv.transpose(), ctx.rho());
  if (variant == QuadratureVariant::Inverse) delta = kron(ctx.rho().transpose(), rho_inv);
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (delta + delta.adjoint()));
  const RealVector mu = es.eigenvalues();
  const Matrix& w = es.eigenvectors();
  const auto m = mu.size();

  RealVector rate(m), amp(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    rate(i) = std::sqrt(mu(i));
    amp(i) = std::pow(mu(i), 0.25);
  }
  const double tail = 0.5 * prefactor * std::exp(-2.0 * rate.minCoeff() * r_max);
  if (tail > 1e-8)
    throw Error(ErrorCode::InsufficientRange, "tail bound " + std::to_string(tail) + " exceeds 1e-8");

  // Fine grid with 2*steps panels; even nodes form the coarse grid.
  const long fine = 2 * steps;
  const double h = r_max / static_cast<double>(fine);
  Eigen::MatrixXd acc_fine = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd acc_coarse = Eigen::MatrixXd::Zero(m, m);
  RealVector d(m);
  for (long k = 0; k <= fine; ++k) {
    const double r = h * static_cast<double>(k);
    for (Eigen::Index i = 0; i < m; ++i) d(i) = amp(i) * std::exp(-r * rate(i));
    const double wt = (k == 0 || k == fine) ? 0.5 : 1.0;
    const bool coarse = k % 2 == 0;
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index i = 0; i < m; ++i) {
        const double v = wt * d(i) * d(j);
        acc_fine(i, j) += v;
        if (coarse) acc_coarse(i, j) += v;
      }
  }
  acc_fine *= prefactor * h;
  acc_coarse *= prefactor * 2.0 * h;

  const Matrix t = w.adjoint() * s.mat() * w;
  Matrix tf = t, tc = t;
  tf.array() *= acc_fine.cast<cplx>().array();
  tc.array() *= acc_coarse.cast<cplx>().array();
  QuadratureResult out;
  out.value = Superoperator(s.dim(), s.level(), w * tf * w.adjoint());
  out.error_estimate = op_norm(tf - tc) / 3.0;
  out.tail_bound = tail;
  out.r_max = r_max;
  out.steps = fine;
  return out;
}

/**
 * Unitality, trace preservation and (for n <= 3) complete positivity of a linear map on
 * n^2 x n^2 matrices, the last via its n^4 x n^4 Choi matrix.
 */
template <typename F>
inline Report map_cptp_certificate(const std::string& name, int n, F&& apply, double tol = kDefaultTol,
                                   std::uint64_t seed = 0) {
  const int nn = n * n;
  Report r(name, tol);
  r.pass = true;

  const double unital = (apply(Matrix::Identity(nn, nn)) - Matrix::Identity(nn, nn)).norm();
  r.metrics["unital_defect"] = unital;
  r.require("unital", unital <= scaled_tol(tol, 1.0));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  double trace_dev = 0.0;
  for (int k = 0; k < 20; ++k) {
    Vector v(nn);
    for (int i = 0; i < nn; ++i) v(i) = cplx(g(rng), g(rng));
    v.normalize();
    const Matrix proj = v * v.adjoint();
    trace_dev = std::max(trace_dev, std::abs(apply(proj).trace() - 1.0));
  }
  r.metrics["trace_defect"] = trace_dev;
  r.require("trace_preserving", trace_dev <= scaled_tol(tol, 1.0));

  if (n <= 3) {
    // sum_{alpha,beta} E_{alpha beta} (x) F(E_{alpha beta})
    const int big = nn * nn;
    Matrix c(big, big);
    for (int a = 0; a < nn; ++a)
      for (int b = 0; b < nn; ++b) {
        Matrix e = Matrix::Zero(nn, nn);
        e(a, b) = 1.0;
        c.block(a * nn, b * nn, nn, nn) = apply(e);
      }
    const double lmin = min_eigenvalue(c);
    r.metrics["min_choi_eig"] = lmin;
    r.metrics["choi_hermitian_defect"] = hermitian_defect(c);
    r.require("cp", lmin >= -tol);
  } else {
    r.notes.push_back("Choi test skipped for n > 3");
  }
  return r;
}

/** The V-transform itself as a map on B(L2): unital, trace preserving, completely positive. */
inline Report v_transform_cptp_certificate(const DensityContext& ctx, double tol = kDefaultTol,
                                           std::uint64_t seed = 0) {
  const int n = ctx.dim();
  return map_cptp_certificate(
      "v_cptp", n, [&](const Matrix& x) { return v_transform(Superoperator(n, Level::L2, x), ctx).mat(); }, tol, seed);
}

/** Symmetric Markov T on L2 is mapped to a symmetric Markov operator by V. */
inline Report markov_preservation_check(const Superoperator& t, const DensityContext& ctx, double tol = kDefaultTol) {
  if (t.level() != Level::L2) throw Error(ErrorCode::WrongLevel, "markov_preservation_check acts on L2-level maps");
  Report r("markov_preservation", tol);
  r.pass = true;
  Report pre = is_markov_l2(t, ctx, tol);
  const double sym = op_norm(t.mat() - t.mat().adjoint());
  r.metrics["input_symmetry_defect"] = sym;
  const bool pre_ok = pre.pass && sym <= scaled_tol(tol, t.norm());
  pre.name = "input_markov";
  r.children.push_back(pre);
  r.require("precondition", pre_ok);
  if (!pre_ok) {
    r.notes.push_back("precondition failed: input is not a symmetric Markov operator");
    return r;
  }
  Report post = is_markov_l2(v_transform(t, ctx), ctx, tol);
  post.name = "output_markov";
  r.metrics["output_min_choi_eig"] = post.metric("min_choi_eig");
  r.require("output_markov", post.pass);
  r.children.push_back(post);
  return r;
}

}  // namespace kmsd
