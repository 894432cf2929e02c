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

#include <optional>

#include "kmsd/random.hpp"
#include "kmsd/vtransform.hpp"

namespace kmsd {

/** (1 + sigma_{-i/2})^{-1}(m): eigenbasis entry (a,b) divided by 1 + (p_a/p_b)^{1/2}. */
inline Matrix resolvent_minus(const DensityContext& ctx, const Matrix& m) {
  ctx.check_dim(m);
  return ctx.schur_in_eigenbasis(m, [](double pa, double pb) { return 1.0 / (1.0 + std::sqrt(pa / pb)); });
}

/** (1 + sigma_{i/2})^{-1}(m). */
inline Matrix resolvent_plus(const DensityContext& ctx, const Matrix& m) {
  ctx.check_dim(m);
  return ctx.schur_in_eigenbasis(m, [](double pa, double pb) { return 1.0 / (1.0 + std::sqrt(pb / pa)); });
}

/** lmul(k) + rmul(k*) with k = (1 + sigma_{-i/2})^{-1}(m). */
inline Superoperator drift_part(const DensityContext& ctx, const Matrix& m) {
  const Matrix k = resolvent_minus(ctx, m);
  return lmul(k) + rmul(k.adjoint());
}

/**
 * A KMS-symmetric Markov generator: L(I) = 0, L is KMS-symmetric and conditionally
 * completely negative. Holds L at the algebra level and its KMS implementation on L2.
 */
class MarkovGenerator {
 public:
  /** Certifies L; throws CertificationFailed with the failing report. */
  static MarkovGenerator certify(const Superoperator& l, const DensityContext& ctx, double tol) {
    MarkovGenerator g(l, ctx, tol);
    if (!g.certified()) {
      Report summary("generator", tol);
      summary.pass = false;
      summary.children = {g.unital_, g.kms_, g.ccn_};
      throw Error(ErrorCode::CertificationFailed, "generator certification failed", summary);
    }
    return g;
  }
  static MarkovGenerator certify(const Superoperator& l, const DensityContext& ctx) {
    return certify(l, ctx, ctx.tol());
  }

  /** Builds the object without enforcing the certificates. Negative controls only. */
  static MarkovGenerator unverified(const Superoperator& l, const DensityContext& ctx) {
    return MarkovGenerator(l, ctx, ctx.tol());
  }

  const Superoperator& L() const { return l_; }
  const Superoperator& L2() const { return l2_; }
  const DensityContext& ctx() const { return ctx_; }
  double tol() const { return tol_; }
  const Report& unital_kernel() const { return unital_; }
  const Report& kms_symmetric() const { return kms_; }
  const Report& ccn() const { return ccn_; }
  bool certified() const { return unital_.pass && kms_.pass && ccn_.pass; }
  int dim() const { return l_.dim(); }

 private:
  MarkovGenerator(const Superoperator& l, const DensityContext& ctx, double tol)
      : l_(l), l2_(l2_implementation(l, ctx)), ctx_(ctx), tol_(tol) {
    if (l.level() != Level::Algebra) throw Error(ErrorCode::WrongLevel, "generator must be algebra-level");
    if (l.dim() != ctx.dim()) throw Error(ErrorCode::DimensionMismatch, "generator and rho differ in dimension");
    const int n = l.dim();
    const double nrm = l.norm();
    unital_ = Report("unital_kernel", tol);
    unital_.pass = true;
    const double ui = l.apply(Matrix::Identity(n, n)).norm();
    unital_.metrics["defect"] = ui;
    unital_.require("L(I)=0", ui <= scaled_tol(tol, nrm));
    kms_ = is_kms_symmetric(l, ctx, tol);
    try {
      ccn_ = is_ccn(l, tol);
    } catch (const Error& e) {
      ccn_ = Report("ccn", tol);
      ccn_.pass = false;
      ccn_.notes.push_back(e.what());
    }
  }

  Superoperator l_;
  Superoperator l2_;
  DensityContext ctx_;
  double tol_;
  Report unital_, kms_, ccn_;
};

/** Generator built from a KMS-symmetric CP map Psi. */
inline MarkovGenerator generator_from_cp(const Superoperator& psi, const DensityContext& ctx, double tol) {
  if (psi.level() != Level::Algebra) throw Error(ErrorCode::WrongLevel, "Psi must be algebra-level");
  Report cp = is_cp(psi, tol);
  if (!cp.pass) throw Error(ErrorCode::PreconditionFailed, "Psi is not completely positive", cp);
  Report sym = is_kms_symmetric(psi, ctx, tol);
  if (!sym.pass) throw Error(ErrorCode::PreconditionFailed, "Psi is not KMS-symmetric", sym);
  const Matrix m = psi.apply(Matrix::Identity(psi.dim(), psi.dim()));
  const Superoperator l = drift_part(ctx, m) - psi;
  return MarkovGenerator::certify(l, ctx, tol);
}
inline MarkovGenerator generator_from_cp(const Superoperator& psi, const DensityContext& ctx) {
  return generator_from_cp(psi, ctx, ctx.tol());
}

// ---------------------------------------------------------------------------
// Recovery of a CP map Psi from a generator.

enum class RecoveryMethod {
  Schur,                 // block elimination of the Choi matrix against Omega
  AlternatingProjection  // Dykstra between the affine family and the PSD cone
};

struct RecoveryResult {
  Superoperator psi;
  Matrix m;  // Psi(I)
  Report report;
};

namespace detail {

/** Orthonormal basis of n x n Hermitian matrices for the real trace pairing; identity first on the diagonal. */
inline std::vector<Matrix> hermitian_basis(int n) {
  std::vector<Matrix> out;
  for (int a = 0; a < n; ++a) out.push_back(unit(n, a, a));
  const double s = 1.0 / std::sqrt(2.0);
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      out.push_back(s * (unit(n, a, b) + unit(n, b, a)));
      out.push_back(s * kI * (unit(n, a, b) - unit(n, b, a)));
    }
  return out;
}

/** Choi(Psi_m) = c0 + sum_i m_i g_i, with Psi_m = drift_part(m) - L. */
struct AffineChoi {
  int n = 0;
  std::vector<Matrix> herm;
  std::vector<Matrix> g;
  Matrix c0;

  AffineChoi(const MarkovGenerator& gen) : n(gen.dim()) {
    herm = hermitian_basis(n);
    c0 = -choi(gen.L());
    for (const auto& h : herm) g.push_back(choi(drift_part(gen.ctx(), h)));
  }
  Matrix at(const RealVector& m) const {
    Matrix c = c0;
    for (std::size_t i = 0; i < g.size(); ++i) c += m(static_cast<Eigen::Index>(i)) * g[i];
    return c;
  }
  Matrix m_matrix(const RealVector& m) const {
    Matrix out = Matrix::Zero(n, n);
    for (std::size_t i = 0; i < herm.size(); ++i) out += m(static_cast<Eigen::Index>(i)) * herm[i];
    return out;
  }
  RealVector identity_coords() const {
    RealVector v = RealVector::Zero(static_cast<Eigen::Index>(herm.size()));
    for (int a = 0; a < n; ++a) v(a) = 1.0;
    return v;
  }
};

/** Stacks real and imaginary parts of a complex column. */
inline RealVector realify(const Vector& v) {
  RealVector out(2 * v.size());
  out << v.real(), v.imag();
  return out;
}

inline Matrix psd_part(const Matrix& h) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (h + h.adjoint()));
  RealVector lam = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * lam.cast<cplx>().asDiagonal() * es.eigenvectors().adjoint();
}

inline RealVector recover_schur(const AffineChoi& af, double rank_tol, Report& r) {
  const int n = af.n;
  const int nn = n * n;
  const auto dim = static_cast<Eigen::Index>(af.g.size());
  Vector omega = Vector::Zero(nn);
  for (int a = 0; a < n; ++a) omega(a * n + a) = 1.0 / std::sqrt(static_cast<double>(n));
  Eigen::SelfAdjointEigenSolver<Matrix> proj(Matrix::Identity(nn, nn) - omega * omega.adjoint());
  const Matrix perp = proj.eigenvectors().rightCols(nn - 1);

  // The drift part only touches the rows and columns through omega, so the compression of
  // Choi(Psi_m) to the orthocomplement of omega is fixed by L.
  const Matrix cperp = perp.adjoint() * af.c0 * perp;
  double drift_leak = 0.0;
  for (const auto& gi : af.g) drift_leak = std::max(drift_leak, op_norm(perp.adjoint() * gi * perp));
  r.metrics["drift_leak"] = drift_leak;

  Eigen::SelfAdjointEigenSolver<Matrix> ce(0.5 * (cperp + cperp.adjoint()));
  const RealVector& mu = ce.eigenvalues();
  const double scale = std::max(op_norm(af.c0), 1e-300);
  const double cut = rank_tol * scale;
  r.metrics["compressed_min_eig"] = mu.size() ? mu(0) : 0.0;
  std::vector<Eigen::Index> null_idx, range_idx;
  for (Eigen::Index i = 0; i < mu.size(); ++i) (mu(i) > cut ? range_idx : null_idx).push_back(i);
  Matrix ynull(nn - 1, static_cast<Eigen::Index>(null_idx.size()));
  for (std::size_t k = 0; k < null_idx.size(); ++k) ynull.col(static_cast<Eigen::Index>(k)) = ce.eigenvectors().col(null_idx[k]);

  // b(m) = perp* Choi(m) omega must avoid the null space of the compressed block.
  auto b_of = [&](const Matrix& c) -> Vector { return perp.adjoint() * c * omega; };
  const Vector b0 = b_of(af.c0);
  Eigen::MatrixXd a(2 * ynull.cols(), dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    a.col(i) = realify(ynull.adjoint() * b_of(af.g[static_cast<std::size_t>(i)]));
  const RealVector rhs = -realify(ynull.adjoint() * b0);
  RealVector m = RealVector::Zero(dim);
  if (a.rows() > 0) m = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(a).solve(rhs);
  const double null_residual = a.rows() > 0 ? (a * m - rhs).norm() : 0.0;
  r.metrics["null_residual"] = null_residual;

  // Raise the identity component until the Schur complement in the omega direction is >= 0.
  Matrix c = af.at(m);
  const Vector b = b_of(c);
  double need = 0.0;
  for (Eigen::Index i : range_idx) {
    const cplx z = ce.eigenvectors().col(i).dot(b);
    need += std::norm(z) / mu(i);
  }
  const double alpha = omega.dot(c * omega).real();
  const RealVector id = af.identity_coords();
  const double slope = omega.dot((af.at(id) - af.c0) * omega).real();
  const double shift = (need - alpha) / slope;
  m += shift * id;
  r.metrics["identity_shift"] = shift;
  return m;
}

inline RealVector recover_dykstra(const AffineChoi& af, int max_iter, double tol, Report& r) {
  const auto dim = static_cast<Eigen::Index>(af.g.size());
  const auto big = af.c0.size();
  Eigen::MatrixXd gmat(2 * big, dim);
  for (Eigen::Index i = 0; i < dim; ++i) gmat.col(i) = realify(vec(af.g[static_cast<std::size_t>(i)]));
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> ls(gmat);
  auto project_affine = [&](const Matrix& x, RealVector& m) {
    m = ls.solve(realify(vec(x - af.c0)));
    return af.at(m);
  };
  RealVector m = RealVector::Zero(dim);
  Matrix x = af.c0;
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  Matrix q = p;
  double best = -std::numeric_limits<double>::infinity();
  RealVector best_m = m;
  int it = 0;
  for (; it < max_iter; ++it) {
    const double scale = std::max(op_norm(x), 1e-300);
    const double lmin = min_eigenvalue(x);
    if (lmin / scale > best) {
      best = lmin / scale;
      best_m = m;
    }
    if (lmin >= -tol * scale) break;
    const Matrix y = psd_part(x + p);
    p = x + p - y;
    const Matrix xn = project_affine(y + q, m);
    q = y + q - xn;
    x = xn;
  }
  r.metrics["iterations"] = it;
  r.metrics["best_relative_min_eig"] = best;
  return best_m;
}

}  // namespace detail

/**
 * Finds a KMS-symmetric CP Psi with generator_from_cp(Psi) = L. Psi is searched in the
 * affine family drift_part(m) - L over Hermitian m.
 */
inline RecoveryResult recover_cp_from_generator(const MarkovGenerator& gen, int max_iter = 5000,
                                                double tol = kDefaultTol,
                                                RecoveryMethod method = RecoveryMethod::Schur) {
  detail::AffineChoi af(gen);
  Report r("recover_cp", tol);
  r.pass = true;
  RealVector coords = method == RecoveryMethod::Schur ? detail::recover_schur(af, 1e-9, r)
                                                      : detail::recover_dykstra(af, max_iter, tol, r);
  const Matrix m = af.m_matrix(coords);
  const Superoperator psi = drift_part(gen.ctx(), m) - gen.L();
  Report cp = is_cp(psi, tol);
  Report sym = is_kms_symmetric(psi, gen.ctx(), tol);
  const Superoperator rebuilt = drift_part(gen.ctx(), psi.apply(Matrix::Identity(gen.dim(), gen.dim()))) - psi;
  const double resid = (rebuilt - gen.L()).norm();
  r.metrics["min_choi_eig"] = cp.metric("min_choi_eig");
  r.metrics["roundtrip_residual"] = resid;
  r.require("cp", cp.pass);
  r.require("kms_symmetric", sym.pass);
  r.require("roundtrip", resid <= scaled_tol(tol, std::max(1.0, gen.L().norm())));
  r.children = {cp, sym};
  if (!cp.pass)
    throw Error(ErrorCode::Infeasible, "no completely positive Psi found; best min Choi eigenvalue " +
                                           std::to_string(cp.metric("min_choi_eig")), r);
  return {psi, m, r};
}

// ---------------------------------------------------------------------------
// Semigroup and Chernoff product.

inline Superoperator evolve(const MarkovGenerator& gen, double t) { return superop_exp(gen.L2(), t); }

/** ||(V(exp(-t/n L2)))^n - exp(-t V(L2))|| in operator norm. */
inline double chernoff_residual(const MarkovGenerator& gen, double t, int n_steps) {
  if (n_steps < 1) throw Error(ErrorCode::InvalidArgument, "n_steps must be >= 1");
  if (t < 0) throw Error(ErrorCode::InvalidArgument, "t must be >= 0");
  const Superoperator step = v_transform(evolve(gen, t / n_steps), gen.ctx());
  Matrix prod = step.mat();
  for (int k = 1; k < n_steps; ++k) prod = step.mat() * prod;
  const Superoperator target = superop_exp(v_transform(gen.L2(), gen.ctx()), t);
  return op_norm(prod - target.mat());
}

// ---------------------------------------------------------------------------
// Dirichlet form.

struct DirichletFormSample {
  Matrix a;
  double energy = 0.0;
};

inline double dirichlet_energy(const MarkovGenerator& gen, const Matrix& a) {
  gen.ctx().check_dim(a);
  const Vector v = vec(a);
  return v.dot(gen.L2().mat() * v).real();
}

inline DirichletFormSample dirichlet_sample(const MarkovGenerator& gen, const Matrix& a) {
  return {a, dirichlet_energy(gen, a)};
}

/** (1/t) <a, a - T_t a>, evaluated spectrally on the self-adjoint L2. */
inline double et_energy(const MarkovGenerator& gen, const Matrix& a, double t) {
  if (!(t > 0)) throw Error(ErrorCode::InvalidArgument, "et_energy needs t > 0");
  gen.ctx().check_dim(a);
  const Matrix h = 0.5 * (gen.L2().mat() + gen.L2().mat().adjoint());
  Eigen::SelfAdjointEigenSolver<Matrix> es(h);
  const Vector c = es.eigenvectors().adjoint() * vec(a);
  double e = 0.0;
  for (Eigen::Index k = 0; k < c.size(); ++k) e += std::norm(c(k)) * (-std::expm1(-t * es.eigenvalues()(k))) / t;
  return e;
}

struct ConeProjection {
  Matrix point;  // a ∧ rho^1/2
  Matrix v;      // rho^1/2 - point = embed(v)
  int iterations = 0;
};

/**
 * Nearest point to a in the cone {rho^1/2 - rho^1/4 v rho^1/4 : v >= 0}.
 * Accelerated projected gradient in rho's eigenbasis, step 1/L with L = 2 p_max.
 */
inline ConeProjection cone_project(const DensityContext& ctx, const Matrix& a, int max_iter = 200000) {
  ctx.check_dim(a);
  const double an = a.norm();
  if ((a - a.adjoint()).norm() > scaled_tol(ctx.tol(), an))
    throw Error(ErrorCode::NotJFixed, "cone_project needs J(a) = a");
  const int n = ctx.dim();
  const RealVector& p = ctx.eigenvalues();
  Eigen::MatrixXd w(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) w(i, j) = std::pow(p(i) * p(j), 0.25);
  const Matrix wc = w.cast<cplx>();
  Matrix sqrtp = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) sqrtp(i, i) = std::sqrt(p(i));
  Matrix d = sqrtp - ctx.to_eigenbasis(0.5 * (a + a.adjoint()));
  d = 0.5 * (d + d.adjoint());
  const double lsmooth = 2.0 * p.maxCoeff();

  auto objective = [&](const Matrix& v) { return (wc.cwiseProduct(v) - d).squaredNorm(); };
  Matrix v = Matrix::Zero(n, n);
  Matrix y = v;
  double tk = 1.0;
  double fprev = objective(v);
  int it = 0;
  bool converged = false;
  for (; it < max_iter; ++it) {
    const Matrix grad = 2.0 * wc.cwiseProduct(wc.cwiseProduct(y) - d);
    Matrix vn = detail::psd_part(y - grad / lsmooth);
    vn = 0.5 * (vn + vn.adjoint());
    const double step = (vn - v).norm();
    if (step <= 1e-10 * std::max(1.0, vn.norm())) {
      v = vn;
      converged = true;
      break;
    }
    const double fn = objective(vn);
    if (fn > fprev && tk > 1.0) {
      // Restart the momentum when the objective goes up. A plain step is always taken,
      // otherwise rounding noise in f can pin the iterate.
      y = v;
      tk = 1.0;
      continue;
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
    y = vn + ((tk - 1.0) / tn) * (vn - v);
    tk = tn;
    v = vn;
    fprev = fn;
  }
  if (!converged) throw Error(ErrorCode::NoConvergence, "cone_project did not converge");
  ConeProjection out;
  out.v = ctx.from_eigenbasis(v);
  out.point = ctx.from_eigenbasis(sqrtp - wc.cwiseProduct(v));
  out.point = 0.5 * (out.point + out.point.adjoint());
  out.iterations = it;
  return out;
}

/** Variational inequality Re<a - proj, c - proj> <= tol over random cone points c. */
inline Report cone_projection_certificate(const DensityContext& ctx, const Matrix& a, const ConeProjection& proj,
                                          int trials, std::uint64_t seed, double tol = 1e-8) {
  Report r("cone_projection", tol);
  r.pass = true;
  Rng rng(seed);
  double worst = -std::numeric_limits<double>::infinity();
  const Matrix diff = a - proj.point;
  for (int k = 0; k < trials; ++k) {
    const Matrix g = random_ginibre(ctx.dim(), ctx.dim(), rng);
    const Matrix c = ctx.rho_half() - embed(ctx, g * g.adjoint());
    worst = std::max(worst, diff.cwiseProduct((c - proj.point).conjugate()).sum().real());
  }
  // The projection point itself and the apex are cone points too.
  worst = std::max(worst, diff.cwiseProduct((ctx.rho_half() - proj.point).conjugate()).sum().real());
  r.metrics["max_variational"] = worst;
  r.require("variational_inequality", worst <= tol * std::max(1.0, a.norm()));
  return r;
}

/** Cone contraction E(a ∧ rho^1/2) <= E(a) and J-invariance E(Ja) = E(a) on random vectors. */
inline Report dirichlet_contraction_check(const MarkovGenerator& gen, int trials, double tol, std::uint64_t seed = 0) {
  Report r("dirichlet_contraction", tol);
  r.pass = true;
  const DensityContext& ctx = gen.ctx();
  const int n = ctx.dim();
  const double lnorm = gen.L2().norm();
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst_contraction = -std::numeric_limits<double>::infinity();
  double worst_j = 0.0;
  double worst_vi = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < trials; ++k) {
    Matrix h = random_hermitian(n, rng);
    h /= h.norm();
    const Matrix a = u(rng) * ctx.rho_half() + h;
    const ConeProjection proj = cone_project(ctx, a);
    const double ea = dirichlet_energy(gen, a);
    const double ep = dirichlet_energy(gen, proj.point);
    const double scale = std::max(1.0, lnorm * a.squaredNorm());
    worst_contraction = std::max(worst_contraction, (ep - ea) / scale);
    const Report vi = cone_projection_certificate(ctx, a, proj, 20, seed + 7919 * (k + 1), tol);
    worst_vi = std::max(worst_vi, vi.metric("max_variational"));

    const Matrix z = random_ginibre(n, n, rng);
    const double ez = dirichlet_energy(gen, z);
    const double ejz = dirichlet_energy(gen, modular_conjugation(ctx, z));
    worst_j = std::max(worst_j, std::abs(ez - ejz) / std::max(1.0, lnorm * z.squaredNorm()));
  }
  r.metrics["max_contraction_excess"] = worst_contraction;
  r.metrics["max_j_defect"] = worst_j;
  r.metrics["max_variational"] = worst_vi;
  r.require("cone_contraction", worst_contraction <= tol);
  r.require("j_invariance", worst_j <= tol);
  r.require("projection_optimal", worst_vi <= tol);
  return r;
}

/** Left-bounded operator of a: the x with a = x rho^1/2. */
inline Matrix left_symbol(const DensityContext& ctx, const Matrix& a) { return a * ctx.rho_minus_half(); }
/** Right-bounded operator of b: the y with b = rho^1/2 y. */
inline Matrix right_symbol(const DensityContext& ctx, const Matrix& b) { return ctx.rho_minus_half() * b; }
/** Product in the left Hilbert algebra of the standard form: (x rho^1/2)(rho^1/2 y) = x rho^1/2 y. */
inline Matrix l2_product(const DensityContext& ctx, const Matrix& a, const Matrix& b) {
  return a * ctx.rho_minus_half() * b;
}

/** E(ab)^1/2 <= ||pi_l(a)|| E(b)^1/2 + E(a)^1/2 ||pi_r(b)||. */
inline Report energy_product_inequality(const MarkovGenerator& gen, const Matrix& a, const Matrix& b, double tol) {
  const DensityContext& ctx = gen.ctx();
  Report r("energy_product", tol);
  r.pass = true;
  const double eab = std::max(0.0, dirichlet_energy(gen, l2_product(ctx, a, b)));
  const double ea = std::max(0.0, dirichlet_energy(gen, a));
  const double eb = std::max(0.0, dirichlet_energy(gen, b));
  const double pl = op_norm(left_symbol(ctx, a));
  const double pr = op_norm(right_symbol(ctx, b));
  const double lhs = std::sqrt(eab);
  const double rhs = pl * std::sqrt(eb) + std::sqrt(ea) * pr;
  r.metrics["lhs"] = lhs;
  r.metrics["rhs"] = rhs;
  r.metrics["slack"] = rhs - lhs;
  r.require("inequality", lhs <= rhs + tol * std::max(1.0, rhs));
  return r;
}

}  // namespace kmsd
