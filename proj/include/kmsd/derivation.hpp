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

#include <cstdlib>
#include <thread>

#include "kmsd/generator.hpp"

namespace kmsd {

/**
 * A first-order differential calculus (H, pi_l, pi_r, J, delta) in orthonormal coordinates.
 *
 * Per-unit data is indexed by a + n*b for the matrix unit E_ab. J is antilinear:
 * J(h) = jmat * conj(h).
 */
struct FirstOrderCalculus {
  int n = 0;
  int dimH = 0;
  std::vector<Matrix> piL;
  std::vector<Matrix> piR;
  Matrix jmat;
  std::vector<Vector> delta;
  // Coordinates of the spanning elements in H (GNS: classes of the E_ab (x) E_cd).
  Matrix basis_map;
  double rank_cutoff = 0.0;
  double gram_min_eig = 0.0;
  double gram_norm = 0.0;

  Matrix pi_l(const Matrix& x) const { return combine(piL, x); }
  Matrix pi_r(const Matrix& x) const { return combine(piR, x); }
  Vector J(const Vector& h) const { return jmat * h.conjugate(); }
  Vector delta_of(const Matrix& x) const {
    Vector out = Vector::Zero(dimH);
    for (int b = 0; b < n; ++b)
      for (int a = 0; a < n; ++a)
        if (x(a, b) != cplx(0.0)) out += x(a, b) * delta[static_cast<std::size_t>(a + n * b)];
    return out;
  }

 private:
  Matrix combine(const std::vector<Matrix>& ops, const Matrix& x) const {
    Matrix out = Matrix::Zero(dimH, dimH);
    for (int b = 0; b < n; ++b)
      for (int a = 0; a < n; ++a)
        if (x(a, b) != cplx(0.0)) out += x(a, b) * ops[static_cast<std::size_t>(a + n * b)];
    return out;
  }
};

/** V_1..V_N with an involutive pairing j -> j* such that V_{j*} = V_j^* exactly. */
struct CommutatorFamily {
  std::vector<Matrix> V;
  std::vector<int> pairing;

  std::size_t size() const { return V.size(); }

  /** True when the pairing is an involution and each partner is the exact adjoint. */
  bool adjoint_closed() const {
    if (pairing.size() != V.size()) return false;
    for (std::size_t j = 0; j < V.size(); ++j) {
      const int k = pairing[j];
      if (k < 0 || static_cast<std::size_t>(k) >= V.size()) return false;
      if (pairing[static_cast<std::size_t>(k)] != static_cast<int>(j)) return false;
      if (V[static_cast<std::size_t>(k)] != V[j].adjoint()) return false;
    }
    return true;
  }

  /** {V_j / sqrt 2} followed by {V_j^* / sqrt 2}. */
  static CommutatorFamily doubled(const std::vector<Matrix>& raw) {
    CommutatorFamily f;
    const double s = 1.0 / std::sqrt(2.0);
    const int m = static_cast<int>(raw.size());
    for (const auto& v : raw) f.V.push_back(s * v);
    for (int j = 0; j < m; ++j) f.V.push_back(f.V[static_cast<std::size_t>(j)].adjoint());
    for (int j = 0; j < m; ++j) f.pairing.push_back(j + m);
    for (int j = 0; j < m; ++j) f.pairing.push_back(j);
    return f;
  }
};

inline int gram_threads() {
  if (const char* env = std::getenv("KMSD_THREADS")) {
    const int t = std::atoi(env);
    if (t > 0) return t;
  }
  return 1;
}

namespace detail {

/** Index of E_ab (x) E_cd in vec of the n^2 x n^2 matrix kron(E_ab, E_cd). */
inline Eigen::Index tensor_index(int n, int a, int b, int c, int d) {
  const int nn = n * n;
  return static_cast<Eigen::Index>((a * n + c) + nn * (b * n + d));
}

/** J on tensors: A (x) B -> -B^* (x) A^*, written as x -> perm * conj(x). */
inline Matrix tensor_flip(int n) {
  const int nn = n * n;
  Matrix p = Matrix::Zero(nn * nn, nn * nn);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d)
          p(tensor_index(n, d, c, b, a), tensor_index(n, a, b, c, d)) = -1.0;
  return p;
}

/** A 0/1 operator x -> y with y[dst[k]] = x[src[k]] and zeros elsewhere. */
struct Selection {
  std::vector<Eigen::Index> dst;
  std::vector<Eigen::Index> src;

  Vector apply(const Vector& x) const {
    Vector y = Vector::Zero(x.size());
    for (std::size_t k = 0; k < dst.size(); ++k) y(dst[k]) = x(src[k]);
    return y;
  }
};

/** left * sel * right without forming the selection matrix. */
inline Matrix compress(const Matrix& left, const Selection& sel, const Matrix& right) {
  if (sel.dst.empty()) return Matrix::Zero(left.rows(), right.cols());
  return left(Eigen::all, sel.dst) * right(sel.src, Eigen::all);
}

/** Tensor-level actions of E_ab: left on the first factor, right on the second. */
inline Selection tensor_left(int n, int a, int b) {
  const int nn = n * n;
  Selection s;
  for (int blk = 0; blk < nn; ++blk)
    for (int c = 0; c < n; ++c) {
      s.dst.push_back(static_cast<Eigen::Index>(blk) * nn + a * n + c);
      s.src.push_back(static_cast<Eigen::Index>(blk) * nn + b * n + c);
    }
  return s;
}
inline Selection tensor_right(int n, int a, int b) {
  const int nn = n * n;
  Selection s;
  for (int c = 0; c < n; ++c)
    for (int k = 0; k < nn; ++k) {
      s.dst.push_back(static_cast<Eigen::Index>(c * n + b) * nn + k);
      s.src.push_back(static_cast<Eigen::Index>(c * n + a) * nn + k);
    }
  return s;
}

}  // namespace detail

/** V-transform of the generator, brought back to the algebra level. */
inline Superoperator transformed_generator(const MarkovGenerator& gen) {
  return algebra_descent(v_transform(gen.L2(), gen.ctx()), gen.ctx());
}

/** Twisted derivation on tensors: sigma_{-i/4}(A) (x) I - I (x) sigma_{i/4}(A). */
inline Matrix tensor_delta(const DensityContext& ctx, const Matrix& a) {
  const int n = ctx.dim();
  const Matrix id = Matrix::Identity(n, n);
  return kron(sigma_z(ctx, cplx(0.0, -0.25), a), id) - kron(id, sigma_z(ctx, cplx(0.0, 0.25), a));
}

struct GnsOptions {
  double rank_tol = 1e-10;  // quotient cutoff on singular values of the Gram factor, relative
  double psd_tol = 1e-8;    // allowed negative eigenvalue of G_N relative to ||G_N||
  double form_tol = 1e-8;   // form identity, relative to max(1, ||L||)
};

/** Gram form -1/2 tr(B1^* rho^1/2 Lv(A1^* A2) rho^1/2 B2) on the tensor basis. */
inline Matrix gns_gram(const Superoperator& lcheck, const DensityContext& ctx) {
  const int n = ctx.dim();
  const int nn = n * n;
  const Eigen::Index big = static_cast<Eigen::Index>(nn) * nn;
  Matrix g = Matrix::Zero(big, big);
  std::vector<Matrix> mm(static_cast<std::size_t>(nn));
  for (int b = 0; b < n; ++b)
    for (int bp = 0; bp < n; ++bp)
      mm[static_cast<std::size_t>(b + n * bp)] = ctx.rho_half() * lcheck.apply(unit(n, b, bp)) * ctx.rho_half();
  // Rows are split by a across threads; each entry is written exactly once.
  auto fill = [&](int a0, int a1) {
    for (int a = a0; a < a1; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c)
          for (int d = 0; d < n; ++d)
            for (int bp = 0; bp < n; ++bp)
              for (int cp = 0; cp < n; ++cp)
                g(detail::tensor_index(n, a, b, c, d), detail::tensor_index(n, a, bp, cp, d)) =
                    -0.5 * mm[static_cast<std::size_t>(b + n * bp)](c, cp);
  };
  const int threads = std::min(gram_threads(), n);
  if (threads <= 1) {
    fill(0, n);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(fill, n * t / threads, n * (t + 1) / threads);
    for (auto& th : pool) th.join();
  }
  return g;
}

/** <delta(A), delta(B)>_H - <A, L(B)>_rho, worst case over matrix units. */
inline double form_identity_defect(const FirstOrderCalculus& calc, const MarkovGenerator& gen) {
  const int n = gen.dim();
  double worst = 0.0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d) {
          const Matrix ea = unit(n, a, b);
          const Matrix eb = unit(n, c, d);
          const cplx lhs = calc.dimH ? calc.delta_of(ea).dot(calc.delta_of(eb)) : cplx(0.0);
          const cplx rhs = kms_inner(gen.ctx(), ea, gen.L().apply(eb));
          worst = std::max(worst, std::abs(lhs - rhs));
        }
  return worst;
}

/** GNS construction of the calculus from the V-transformed generator. */
inline FirstOrderCalculus gns_calculus(const MarkovGenerator& gen, const GnsOptions& opt = {}) {
  const DensityContext& ctx = gen.ctx();
  const int n = gen.dim();
  const int nn = n * n;
  const Eigen::Index big = static_cast<Eigen::Index>(nn) * nn;

  const Superoperator lcheck = transformed_generator(gen);
  const double lcheck_unital = lcheck.apply(Matrix::Identity(n, n)).norm();
  if (lcheck_unital > scaled_tol(gen.tol(), std::max(1.0, lcheck.norm())))
    throw Error(ErrorCode::ReconstructionFailure, "transformed generator does not annihilate I");

  const Matrix g = gns_gram(lcheck, ctx);

  // N = kernel of A (x) B -> A sigma_{-i/2}(B).
  Matrix contract(nn, big);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d)
          contract.col(detail::tensor_index(n, a, b, c, d)) =
              vec(unit(n, a, b) * sigma_z(ctx, cplx(0.0, -0.5), unit(n, c, d)));
  // The map is onto (A (x) I -> A), so its kernel is the complement of an n^2-dim row space.
  const Eigen::HouseholderQR<Matrix> qr(contract.adjoint());
  const Matrix kernel = (qr.householderQ() * Matrix::Identity(big, big)).rightCols(big - nn);

  const Matrix gn = kernel.adjoint() * g * kernel;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (gn + gn.adjoint()));
  const RealVector& lam = es.eigenvalues();
  const double gnorm = lam.size() ? std::max(std::abs(lam(0)), std::abs(lam(lam.size() - 1))) : 0.0;

  FirstOrderCalculus calc;
  calc.n = n;
  calc.gram_norm = gnorm;
  calc.gram_min_eig = lam.size() ? lam(0) : 0.0;
  if (calc.gram_min_eig < -opt.psd_tol * gnorm)
    throw Error(ErrorCode::GramNotPSD, "restricted Gram form has eigenvalue " + std::to_string(calc.gram_min_eig));

  // The Gram spectrum on N inherits the fast decay of the CP part of the transformed
  // generator, so splitting it by eigenvalues loses ~eps/lambda_min. Instead factor
  // G_N = (F K)^* (F K): -Lv = Phi + lmul + rmul with Phi(X) = sum_k K_k^* X K_k read off
  // the Choi matrix projected away from omega, and the drift terms vanish on N. Then
  // F_k(A (x) B) = A M_k B / sqrt2 with M_k = K_k rho^1/2, and H is the range of F K.
  const Matrix cfull = -choi(lcheck);
  Vector omega = Vector::Zero(nn);
  for (int a = 0; a < n; ++a) omega(a * n + a) = 1.0 / std::sqrt(static_cast<double>(n));
  const Matrix proj = Matrix::Identity(nn, nn) - omega * omega.adjoint();
  const Matrix cp = proj * cfull * proj;
  Eigen::SelfAdjointEigenSolver<Matrix> ces(0.5 * (cp + cp.adjoint()));
  const double cscale = ces.eigenvalues().cwiseAbs().maxCoeff();
  std::vector<Matrix> kraus, mk;
  for (Eigen::Index k = nn - 1; k >= 0; --k) {
    if (!(ces.eigenvalues()(k) > 1e-14 * cscale)) break;
    const Vector v = std::sqrt(ces.eigenvalues()(k)) * ces.eigenvectors().col(k);
    Matrix kk(n, n);
    for (int a = 0; a < n; ++a)
      for (int c = 0; c < n; ++c) kk(a, c) = std::conj(v(a * n + c));
    kraus.push_back(kk);
    mk.push_back(kk * ctx.rho_half());
  }
  const auto m = static_cast<Eigen::Index>(mk.size());

  // E_ab M E_cd = M(b, c) E_ad.
  Matrix f = Matrix::Zero(m * nn, big);
  const double r2 = 1.0 / std::sqrt(2.0);
  for (Eigen::Index k = 0; k < m; ++k)
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c)
          for (int d = 0; d < n; ++d)
            f(k * nn + a + n * d, detail::tensor_index(n, a, b, c, d)) = r2 * mk[static_cast<std::size_t>(k)](b, c);
  const Matrix fk = f * kernel;
  const double fdef = m ? op_norm(fk.adjoint() * fk - gn) : gnorm;
  if (fdef > opt.psd_tol * std::max(gnorm, 1e-300) && gnorm > 0)
    throw Error(ErrorCode::ReconstructionFailure, "Gram factorization is off by " + std::to_string(fdef));

  const ColumnRange range = m ? column_range(fk, opt.rank_tol) : ColumnRange{Matrix(0, 0), RealVector()};
  const Matrix& ur = range.basis;
  const auto dimh = ur.cols();
  calc.dimH = static_cast<int>(dimh);
  const double smax = range.singular_values.size() ? range.singular_values(0) : 0.0;
  calc.rank_cutoff = std::pow(opt.rank_tol * smax, 2);
  const Matrix quotient = ur.adjoint() * f;
  calc.basis_map = quotient;

  // F intertwines left and right multiplication on every block, so the actions are
  // compressions of block-diagonal multiplications to the range of F K.
  auto act = [&](int a, int b, bool left) {
    Matrix y = Matrix::Zero(ur.rows(), dimh);
    for (Eigen::Index k = 0; k < m; ++k)
      for (int j = 0; j < n; ++j) {
        if (left)  // vec(E_ab Y): row a + n j <- row b + n j
          y.row(k * nn + a + n * j) = ur.row(k * nn + b + n * j);
        else  // vec(Y E_ab): row j + n b <- row j + n a
          y.row(k * nn + j + n * b) = ur.row(k * nn + j + n * a);
      }
    return Matrix(ur.adjoint() * y);
  };
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < n; ++a) {
      calc.piL.push_back(act(a, b, true));
      calc.piR.push_back(act(a, b, false));
    }

  // J: theta(K) = rho^1/2 K^* rho^-1/2 is an antilinear involution of span{K_k} mod I, and
  // F_k(-B^* (x) A^*) = -sum_k' T_kk' F_k'(A (x) B)^* with K_k = sum_k' T_kk' theta(K_k') mod I.
  // The K_k are HS-orthogonal, traceless, with |K_k|^2 = lambda_k, so T comes from inner products.
  Matrix tmat = Matrix::Zero(m, m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Matrix& kk = kraus[static_cast<std::size_t>(k)];
    const Matrix th = ctx.rho_half() * kk.adjoint() * ctx.rho_minus_half();
    for (Eigen::Index kp = 0; kp < m; ++kp) {
      const Matrix& kq = kraus[static_cast<std::size_t>(kp)];
      tmat(k, kp) = std::conj((kq.adjoint() * th).trace()) / kq.squaredNorm();
    }
  }
  Matrix swap = Matrix::Zero(nn, nn);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) swap(b + n * a, a + n * b) = 1.0;
  calc.jmat = ur.adjoint() * (-kron(tmat, swap)) * ur.conjugate();
  if (dimh > 0) {
    // T divides by the weak weights, which leaves J ~1e-6 off unitary. Its polar factor
    // keeps the twist relation (J^* J commutes with both actions) and is exactly isometric.
    const Eigen::BDCSVD<Matrix> svd(calc.jmat, Eigen::ComputeFullU | Eigen::ComputeFullV);
    calc.jmat = svd.matrixU() * svd.matrixV().adjoint();
  }
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < n; ++a) calc.delta.push_back(quotient * vec(tensor_delta(ctx, unit(n, a, b))));

  const double defect = form_identity_defect(calc, gen);
  if (defect > opt.form_tol * std::max(1.0, gen.L().norm()))
    throw Error(ErrorCode::ReconstructionFailure, "form identity fails by " + std::to_string(defect));
  return calc;
}

/**
 * Calculus on M_n (x) C^N with delta_j(A) = rho^1/4 [V_j, A] rho^1/4, compressed to the
 * cyclic subspace spanned by pi_l(E_ab) delta(E_cd).
 */
inline FirstOrderCalculus commutator_calculus(const CommutatorFamily& fam, const DensityContext& ctx,
                                              double rank_tol = 1e-10) {
  if (!fam.adjoint_closed()) throw Error(ErrorCode::InvalidArgument, "commutator family is not adjoint-closed");
  const int n = ctx.dim();
  const int nn = n * n;
  const int m = static_cast<int>(fam.size());
  const Eigen::Index full = static_cast<Eigen::Index>(nn) * m;
  // Components are stacked as blocks of vec coordinates, one block per j.
  std::vector<detail::Selection> pl, pr;
  std::vector<Vector> dl;
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < n; ++a) {
      const Matrix e = unit(n, a, b);
      detail::Selection sl, sr;
      for (int j = 0; j < m; ++j)
        for (int c = 0; c < n; ++c) {
          const Eigen::Index off = static_cast<Eigen::Index>(j) * nn;
          sl.dst.push_back(off + c * n + a);
          sl.src.push_back(off + c * n + b);
          sr.dst.push_back(off + b * n + c);
          sr.src.push_back(off + a * n + c);
        }
      pl.push_back(sl);
      pr.push_back(sr);
      Vector d(full);
      for (int j = 0; j < m; ++j) {
        const Matrix& v = fam.V[static_cast<std::size_t>(j)];
        d.segment(static_cast<Eigen::Index>(j) * nn, nn) = vec(ctx.rho_quarter() * (v * e - e * v) * ctx.rho_quarter());
      }
      dl.push_back(d);
    }
  // J(B (x) e_j) = -B^* (x) e_{j*}.
  Matrix jfull = Matrix::Zero(full, full);
  for (int j = 0; j < m; ++j) {
    const int k = fam.pairing[static_cast<std::size_t>(j)];
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        jfull(static_cast<Eigen::Index>(k) * nn + b + n * a, static_cast<Eigen::Index>(j) * nn + a + n * b) = -1.0;
  }

  Matrix span(full, static_cast<Eigen::Index>(nn) * nn);
  Eigen::Index col = 0;
  for (int u = 0; u < nn; ++u)
    for (int v = 0; v < nn; ++v) span.col(col++) = pl[static_cast<std::size_t>(u)].apply(dl[static_cast<std::size_t>(v)]);

  FirstOrderCalculus calc;
  calc.n = n;
  Matrix q(full, 0);
  if (full > 0) {
    const ColumnRange range = column_range(span, rank_tol);
    const double smax = range.singular_values.size() ? range.singular_values(0) : 0.0;
    q = range.basis;
    calc.rank_cutoff = rank_tol * smax;
    calc.gram_norm = smax * smax;
  }
  calc.dimH = static_cast<int>(q.cols());
  for (std::size_t u = 0; u < pl.size(); ++u) {
    calc.piL.push_back(detail::compress(q.adjoint(), pl[u], q));
    calc.piR.push_back(detail::compress(q.adjoint(), pr[u], q));
    calc.delta.push_back(q.adjoint() * dl[u]);
  }
  calc.jmat = q.adjoint() * jfull * q.conjugate();
  calc.basis_map = q.adjoint() * span;
  return calc;
}

/** The structural identities of a calculus, each as a worst-case deviation. */
inline Report calculus_invariants(const FirstOrderCalculus& calc, const DensityContext& ctx, double tol = 1e-9,
                                  std::uint64_t seed = 0) {
  const int n = calc.n;
  const int nn = n * n;
  const auto dh = static_cast<Eigen::Index>(calc.dimH);
  Report r("calculus_invariants", tol);
  r.pass = true;
  r.metrics["dimH"] = calc.dimH;
  const Matrix idh = Matrix::Identity(dh, dh);
  auto unit_idx = [n](int a, int b) { return static_cast<std::size_t>(a + n * b); };

  double hom = (calc.pi_l(Matrix::Identity(n, n)) - idh).norm() + (calc.pi_r(Matrix::Identity(n, n)) - idh).norm();
  double comm = 0.0;
  // Products are compared on a random probe block; full products cost dimH^3 per pair.
  Rng probe_rng(seed + 1);
  Matrix probe = random_ginibre(dh, 3, probe_rng);
  for (Eigen::Index k = 0; k < probe.cols(); ++k) probe.col(k).normalize();
  std::vector<Matrix> lx, rx;
  for (int u = 0; u < nn; ++u) {
    lx.push_back(calc.piL[static_cast<std::size_t>(u)] * probe);
    rx.push_back(calc.piR[static_cast<std::size_t>(u)] * probe);
  }
  const Matrix zero = Matrix::Zero(dh, probe.cols());
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const Matrix& la = calc.piL[unit_idx(a, b)];
      const Matrix& ra = calc.piR[unit_idx(a, b)];
      hom = std::max(hom, (la.adjoint() - calc.piL[unit_idx(b, a)]).norm());
      hom = std::max(hom, (ra.adjoint() - calc.piR[unit_idx(b, a)]).norm());
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d) {
          // E_ab E_cd = delta_bc E_ad; pi_r reverses products.
          const Matrix& lprod = b == c ? lx[unit_idx(a, d)] : zero;
          const Matrix& rprod = d == a ? rx[unit_idx(c, b)] : zero;
          hom = std::max(hom, (la * lx[unit_idx(c, d)] - lprod).norm());
          hom = std::max(hom, (ra * rx[unit_idx(c, d)] - rprod).norm());
          comm = std::max(comm, (la * rx[unit_idx(c, d)] - calc.piR[unit_idx(c, d)] * lx[unit_idx(a, b)]).norm());
        }
    }
  r.metrics["homomorphism_defect"] = hom;
  r.metrics["commutation_defect"] = comm;
  r.require("bimodule", hom <= tol && comm <= tol);

  Rng rng(seed);
  double jdef = 0.0;
  for (int trial = 0; trial < 5 && dh > 0; ++trial) {
    // Unit probes, so the defect is relative.
    const Matrix a = random_ginibre(n, n, rng).normalized();
    const Matrix b = random_ginibre(n, n, rng).normalized();
    const Vector xi = random_ginibre(dh, 1, rng).col(0).normalized();
    const Vector lhs = calc.J(calc.pi_l(a) * calc.pi_r(b) * xi);
    const Vector rhs = calc.pi_l(b).adjoint() * calc.pi_r(a).adjoint() * calc.J(xi);
    jdef = std::max(jdef, (lhs - rhs).norm());
    jdef = std::max(jdef, (calc.J(calc.J(xi)) - xi).norm());
    jdef = std::max(jdef, std::abs(calc.J(xi).norm() - xi.norm()));
  }
  r.metrics["j_defect"] = jdef;
  r.require("J_twists_actions", jdef <= tol);

  double dstar = 0.0, leib = 0.0;
  Eigen::Index rank = 0;
  if (dh > 0) {
    Matrix dmat(dh, nn);
    for (int v = 0; v < nn; ++v) dmat.col(v) = calc.delta[static_cast<std::size_t>(v)];
    std::vector<Matrix> ld, rd;
    for (int u = 0; u < nn; ++u) {
      ld.push_back(calc.piL[static_cast<std::size_t>(u)] * dmat);
      rd.push_back(calc.piR[static_cast<std::size_t>(u)] * dmat);
    }
    // twl[v] columns: pi_l(sigma_{-i/4}(E_v)) delta(E_w); twr[v]: pi_r(sigma_{i/4}(E_v)) delta(E_w).
    std::vector<Matrix> twl, twr;
    for (int v = 0; v < nn; ++v) {
      const Matrix e = unit(n, v % n, v / n);
      const Matrix sl = sigma_z(ctx, cplx(0.0, -0.25), e);
      const Matrix sr = sigma_z(ctx, cplx(0.0, 0.25), e);
      Matrix ml = Matrix::Zero(dh, nn), mr = Matrix::Zero(dh, nn);
      for (int u = 0; u < nn; ++u) {
        ml += sl(u % n, u / n) * ld[static_cast<std::size_t>(u)];
        mr += sr(u % n, u / n) * rd[static_cast<std::size_t>(u)];
      }
      twl.push_back(ml);
      twr.push_back(mr);
    }
    for (int v = 0; v < nn; ++v) {
      const Matrix ea = unit(n, v % n, v / n);
      dstar = std::max(dstar, (calc.delta_of(ea.adjoint()) - calc.J(calc.delta[static_cast<std::size_t>(v)])).norm());
      for (int w = 0; w < nn; ++w) {
        const Vector lhs = calc.delta_of(ea * unit(n, w % n, w / n));
        const Vector rhs = twl[static_cast<std::size_t>(v)].col(w) + twr[static_cast<std::size_t>(w)].col(v);
        leib = std::max(leib, (lhs - rhs).norm());
      }
    }
    Matrix span(dh, static_cast<Eigen::Index>(nn) * nn);
    for (int u = 0; u < nn; ++u) span.middleCols(static_cast<Eigen::Index>(u) * nn, nn) = ld[static_cast<std::size_t>(u)];
    rank = column_range(span, 1e-8).basis.cols();
  }
  r.metrics["delta_star_defect"] = dstar;
  r.metrics["leibniz_defect"] = leib;
  r.require("delta_star", dstar <= tol);
  r.require("twisted_leibniz", leib <= tol);

  r.metrics["cyclic_rank"] = static_cast<double>(rank);
  r.require("cyclic", rank == dh);
  return r;
}

// ---------------------------------------------------------------------------
// Commutator families.

/** |<A, L(B)>_rho - sum_j <[V_j,A],[V_j,B]>_rho| on matrix units, row (a+n b), column (c+n d). */
inline Eigen::MatrixXd commutator_form_deviation(const CommutatorFamily& fam, const Superoperator& l,
                                                 const DensityContext& ctx) {
  const int n = ctx.dim();
  const int nn = n * n;
  Eigen::MatrixXd dev(nn, nn);
  std::vector<std::vector<Matrix>> comm(fam.size());
  for (std::size_t j = 0; j < fam.size(); ++j)
    for (int u = 0; u < nn; ++u) {
      const Matrix e = unit(n, u % n, u / n);
      comm[j].push_back(fam.V[j] * e - e * fam.V[j]);
    }
  for (int v = 0; v < nn; ++v) {
    const Matrix eb = unit(n, v % n, v / n);
    const Matrix lb = l.apply(eb);
    for (int u = 0; u < nn; ++u) {
      const Matrix ea = unit(n, u % n, u / n);
      cplx rhs = 0.0;
      for (std::size_t j = 0; j < fam.size(); ++j)
        rhs += kms_inner(ctx, comm[j][static_cast<std::size_t>(u)], comm[j][static_cast<std::size_t>(v)]);
      dev(u, v) = std::abs(kms_inner(ctx, ea, lb) - rhs);
    }
  }
  return dev;
}

inline Report verify_commutator_form(const CommutatorFamily& fam, const MarkovGenerator& gen, double tol) {
  Report r("commutator_form", tol);
  r.pass = true;
  const Eigen::MatrixXd dev = commutator_form_deviation(fam, gen.L(), gen.ctx());
  const double worst = dev.size() ? dev.maxCoeff() : 0.0;
  const double nrm = gen.L().norm();
  r.metrics["max_deviation"] = worst;
  r.metrics["family_size"] = static_cast<double>(fam.size());
  r.metrics["generator_norm"] = nrm;
  r.require("form", worst <= scaled_tol(tol, nrm));
  r.require("adjoint_closed", fam.adjoint_closed());
  return r;
}

/** Reads V_j off the bimodule decomposition H = M_n (x) C^N of a GNS calculus. */
inline CommutatorFamily extract_commutators_gns(const FirstOrderCalculus& calc, const DensityContext& ctx,
                                                double tol = 1e-8) {
  const int n = calc.n;
  const int nn = n * n;
  if (calc.dimH == 0) return {};
  if (calc.dimH % nn != 0)
    throw Error(ErrorCode::NonIntegralMultiplicity, "dim H = " + std::to_string(calc.dimH) + " is not a multiple of n^2");
  const int mult = calc.dimH / nn;
  const Matrix& u = ctx.eigenvectors();
  auto f = [&](int a, int b) -> Matrix { return u.col(a) * u.col(b).adjoint(); };

  const Matrix p = calc.pi_l(f(0, 0)) * calc.pi_r(f(0, 0));
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (p + p.adjoint()));
  std::vector<Vector> range;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    if (es.eigenvalues()(i) > 0.5) range.push_back(es.eigenvectors().col(i));
  if (static_cast<int>(range.size()) != mult)
    throw Error(ErrorCode::NonIntegralMultiplicity, "minimal projection has rank " + std::to_string(range.size()));

  std::vector<Matrix> left_to, right_from;
  for (int a = 0; a < n; ++a) {
    left_to.push_back(calc.pi_l(f(a, 0)));
    right_from.push_back(calc.pi_r(f(0, a)));
  }
  std::vector<Matrix> raw;
  double worst = 0.0;
  for (int j = 0; j < mult; ++j) {
    // frame(a,b) = pi_l(F_a1) pi_r(F_1b) f_j is the image of F_ab (x) e_j.
    std::vector<Vector> frame(static_cast<std::size_t>(nn));
    for (int b = 0; b < n; ++b) {
      const Vector rb = right_from[static_cast<std::size_t>(b)] * range[static_cast<std::size_t>(j)];
      for (int a = 0; a < n; ++a) frame[static_cast<std::size_t>(a + n * b)] = left_to[static_cast<std::size_t>(a)] * rb;
    }
    auto component = [&](const Matrix& x) {
      const Vector dx = calc.delta_of(x);
      Matrix out = Matrix::Zero(n, n);
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) out += frame[static_cast<std::size_t>(a + n * b)].dot(dx) * f(a, b);
      return out;
    };
    auto inner_der = [&](const Matrix& x) -> Matrix { return ctx.rho_minus_quarter() * component(x) * ctx.rho_minus_quarter(); };
    Matrix v = Matrix::Zero(n, n);
    for (int a = 0; a < n; ++a) v += inner_der(unit(n, a, 0)) * unit(n, 0, a);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        const Matrix e = unit(n, a, b);
        worst = std::max(worst, (inner_der(e) - (v * e - e * v)).norm());
      }
    raw.push_back(v);
  }
  if (worst > tol * std::max(1.0, std::sqrt(calc.gram_norm)))
    throw Error(ErrorCode::DerivationRecoveryFailure, "inner derivation residual " + std::to_string(worst));
  return CommutatorFamily::doubled(raw);
}

/** Xi(A) = rho^1/4 V(Psi)(rho^-1/4 A rho^-1/4) rho^1/4. */
inline Superoperator xi_map(const Superoperator& psi, const DensityContext& ctx) {
  const Superoperator psic = v_transform(psi, ctx);
  return sandwich(ctx.rho_quarter(), ctx.rho_quarter()) * psic *
         sandwich(ctx.rho_minus_quarter(), ctx.rho_minus_quarter());
}

/** max |tr(A Xi(B)) - tr(Xi(A) B)| over matrix units. */
inline double xi_transpose_defect(const Superoperator& xi) {
  const int n = xi.dim();
  double worst = 0.0;
  for (int u = 0; u < n * n; ++u)
    for (int v = 0; v < n * n; ++v) {
      const Matrix a = unit(n, u % n, u / n);
      const Matrix b = unit(n, v % n, v / n);
      worst = std::max(worst, std::abs((a * xi.apply(b)).trace() - (xi.apply(a) * b).trace()));
    }
  return worst;
}

/** Residual of Psi against the generator: ||drift_part(Psi(I)) - Psi - L||. */
inline double psi_consistency(const Superoperator& psi, const MarkovGenerator& gen) {
  const Matrix m = psi.apply(Matrix::Identity(gen.dim(), gen.dim()));
  return (drift_part(gen.ctx(), m) - psi - gen.L()).norm();
}

/** Kraus operators of Xi, unscaled and before adjoint closure. */
inline std::vector<Matrix> xi_kraus(const Superoperator& psi, const DensityContext& ctx) {
  return kraus_from_choi(choi(xi_map(psi, ctx)));
}

/** Kraus route: V_j are Kraus operators of Xi, closed under adjoints. */
inline CommutatorFamily extract_commutators_kraus(const MarkovGenerator& gen, const Superoperator& psi,
                                                  double tol = 1e-8) {
  const DensityContext& ctx = gen.ctx();
  if (!is_cp(psi, gen.tol()).pass) throw Error(ErrorCode::InconsistentPsi, "Psi is not completely positive");
  if (!is_kms_symmetric(psi, ctx, gen.tol()).pass) throw Error(ErrorCode::InconsistentPsi, "Psi is not KMS-symmetric");
  const double resid = psi_consistency(psi, gen);
  if (resid > tol * std::max(1.0, gen.L().norm()))
    throw Error(ErrorCode::InconsistentPsi, "Psi does not generate L (residual " + std::to_string(resid) + ")");
  const Superoperator xi = xi_map(psi, ctx);
  const double tdef = xi_transpose_defect(xi);
  if (tdef > tol * std::max(1.0, xi.norm()))
    throw Error(ErrorCode::InconsistentPsi, "tr(A Xi(B)) != tr(Xi(A) B), defect " + std::to_string(tdef));
  // The two modular conjugations of V(Psi) sum to 2 W(V(Psi)) = 2 Psi, so the Kraus
  // operators of Xi overshoot the form by a factor 2.
  std::vector<Matrix> raw = kraus_from_choi(choi(xi));
  for (auto& v : raw) v *= 1.0 / std::sqrt(2.0);

  // Keep the raw family when it already pairs off under the adjoint.
  const int m = static_cast<int>(raw.size());
  std::vector<int> pair(static_cast<std::size_t>(m), -1);
  bool paired = m > 0;
  double scale = 0.0;
  for (const auto& v : raw) scale = std::max(scale, v.norm());
  for (int j = 0; j < m && paired; ++j) {
    for (int k = 0; k < m; ++k)
      if ((raw[static_cast<std::size_t>(k)] - raw[static_cast<std::size_t>(j)].adjoint()).norm() <= tol * scale) {
        pair[static_cast<std::size_t>(j)] = k;
        break;
      }
    if (pair[static_cast<std::size_t>(j)] < 0) paired = false;
  }
  if (paired) {
    for (int j = 0; j < m; ++j)
      if (pair[static_cast<std::size_t>(pair[static_cast<std::size_t>(j)])] != j) paired = false;
  }
  if (paired) {
    CommutatorFamily fam;
    fam.V = raw;
    fam.pairing = pair;
    for (int j = 0; j < m; ++j) {
      const int k = pair[static_cast<std::size_t>(j)];
      if (k > j) fam.V[static_cast<std::size_t>(k)] = fam.V[static_cast<std::size_t>(j)].adjoint();
      if (k == j) fam.V[static_cast<std::size_t>(j)] = 0.5 * (raw[static_cast<std::size_t>(j)] + raw[static_cast<std::size_t>(j)].adjoint());
    }
    return fam;
  }
  return CommutatorFamily::doubled(raw);
}

/** Kraus route with Psi recovered from the generator. */
inline CommutatorFamily extract_commutators_kraus(const MarkovGenerator& gen, double tol = 1e-8) {
  try {
    const RecoveryResult rec = recover_cp_from_generator(gen, 5000, gen.tol());
    return extract_commutators_kraus(gen, rec.psi, tol);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Infeasible) throw Error(ErrorCode::InconsistentPsi, std::string("recovery failed: ") + e.what());
    throw;
  }
}

/** The two sum identities over the family, against (1 + sigma_{+-i/2})^{-1}(Psi(I)). */
inline Report sum_identities(const CommutatorFamily& fam, const Superoperator& psi, const DensityContext& ctx,
                                  double tol = 1e-8) {
  const int n = ctx.dim();
  Report r("sum_identities", tol);
  r.pass = true;
  const Matrix m = psi.apply(Matrix::Identity(n, n));
  Matrix s1 = Matrix::Zero(n, n), s2 = Matrix::Zero(n, n);
  for (const auto& v : fam.V) {
    s1 += v.adjoint() * sigma_z(ctx, cplx(0.0, -0.5), v);
    s2 += sigma_z(ctx, cplx(0.0, 0.5), v.adjoint()) * v;
  }
  const double d1 = (s1 - resolvent_plus(ctx, m)).norm();
  const double d2 = (s2 - resolvent_minus(ctx, m)).norm();
  r.metrics["first_defect"] = d1;
  r.metrics["second_defect"] = d2;
  r.require("first", d1 <= tol * std::max(1.0, m.norm()));
  r.require("second", d2 <= tol * std::max(1.0, m.norm()));
  return r;
}

// ---------------------------------------------------------------------------
// Innerness and uniqueness.

struct InnerVector {
  Vector xi0;
  double residual = 0.0;
};

/** Least-squares xi0 with delta(A) = pi_l(sigma_{-i/4}(A)) xi0 - pi_r(sigma_{i/4}(A)) xi0. */
inline InnerVector inner_vector(const FirstOrderCalculus& calc, const DensityContext& ctx) {
  const int n = calc.n;
  const auto dh = static_cast<Eigen::Index>(calc.dimH);
  if (dh == 0) return {Vector::Zero(0), 0.0};
  const int nn = n * n;
  Matrix a(static_cast<Eigen::Index>(nn) * dh, dh);
  Vector rhs(static_cast<Eigen::Index>(nn) * dh);
  for (int u = 0; u < nn; ++u) {
    const Matrix e = unit(n, u % n, u / n);
    a.block(static_cast<Eigen::Index>(u) * dh, 0, dh, dh) =
        calc.pi_l(sigma_z(ctx, cplx(0.0, -0.25), e)) - calc.pi_r(sigma_z(ctx, cplx(0.0, 0.25), e));
    rhs.segment(static_cast<Eigen::Index>(u) * dh, dh) = calc.delta[static_cast<std::size_t>(u)];
  }
  const Matrix normal = a.adjoint() * a;
  const Vector xi0 = Eigen::CompleteOrthogonalDecomposition<Matrix>(normal).solve(a.adjoint() * rhs);
  return {xi0, (a * xi0 - rhs).norm()};
}

struct UniquenessWitness {
  Matrix theta;
  Report report;
};

/** Spanning family pi_l(E_ab) delta(E_cd) as columns. */
inline Matrix spanning_family(const FirstOrderCalculus& calc) {
  const int nn = calc.n * calc.n;
  Matrix span(calc.dimH, static_cast<Eigen::Index>(nn) * nn);
  Eigen::Index col = 0;
  for (int u = 0; u < nn; ++u)
    for (int v = 0; v < nn; ++v)
      span.col(col++) = calc.piL[static_cast<std::size_t>(u)] * calc.delta[static_cast<std::size_t>(v)];
  return span;
}

/** Builds Theta mapping the spanning family of calcA onto that of calcB and certifies it. */
inline UniquenessWitness uniqueness_witness(const FirstOrderCalculus& a, const FirstOrderCalculus& b,
                                            const MarkovGenerator& gen, double tol = 1e-6) {
  if (a.n != b.n || a.n != gen.dim()) throw Error(ErrorCode::DimensionMismatch, "calculi over different algebras");
  const Matrix ya = spanning_family(a);
  const Matrix yb = spanning_family(b);
  const Matrix ga = ya.adjoint() * ya;
  const Matrix gb = yb.adjoint() * yb;
  const double mismatch = ga.size() ? (ga - gb).cwiseAbs().maxCoeff() : 0.0;
  Report r("uniqueness", tol);
  r.pass = true;
  r.metrics["gram_mismatch_max"] = mismatch;
  r.metrics["dimH_a"] = a.dimH;
  r.metrics["dimH_b"] = b.dimH;
  if (mismatch > tol) {
    r.pass = false;
    throw Error(ErrorCode::GramMismatch, "spanning Gram matrices differ by " + std::to_string(mismatch), r);
  }
  r.checks["gram"] = true;
  if (a.dimH != b.dimH) {
    r.require("dimension", false);
    return {Matrix(), r};
  }
  const auto dh = static_cast<Eigen::Index>(a.dimH);
  Matrix theta = Matrix::Zero(dh, dh);
  if (dh > 0) {
    // Theta Y_A = Y_B as least squares on Y_A^*. Going through Y_A Y_A^* would square the
    // condition number, which reaches 1e6 when the calculus has nearly degenerate directions.
    theta = Eigen::CompleteOrthogonalDecomposition<Matrix>(ya.adjoint()).solve(yb.adjoint()).adjoint();
  }

  // Theta on directions of weight s is fixed only to ~eps/s, so every identity is tested on
  // random combinations of the spanning family rather than on uniform probes of H.
  Rng rng(0x5eed);
  const Matrix mix = random_ginibre(ya.cols(), 4, rng);
  const Matrix probe = ya * mix;
  const double pnorm = std::max(probe.norm(), 1e-300);
  const Matrix tprobe = theta * probe;
  const double unit_def = dh > 0 ? (probe.adjoint() * (theta.adjoint() * tprobe - probe)).norm() / (pnorm * pnorm) : 0.0;
  r.metrics["unitarity_defect_unweighted"] = dh > 0 ? (theta.adjoint() * theta - Matrix::Identity(dh, dh)).norm() : 0.0;
  double inter = 0.0;
  for (std::size_t u = 0; u < a.piL.size() && dh > 0; ++u) {
    inter = std::max(inter, (theta * (a.piL[u] * probe) - b.piL[u] * tprobe).norm() / pnorm);
    inter = std::max(inter, (theta * (a.piR[u] * probe) - b.piR[u] * tprobe).norm() / pnorm);
  }
  const double jdef =
      dh > 0 ? (theta * (a.jmat * probe.conjugate()) - b.jmat * tprobe.conjugate()).norm() / pnorm : 0.0;
  double ddef = 0.0;
  for (std::size_t u = 0; u < a.delta.size() && dh > 0; ++u) ddef = std::max(ddef, (theta * a.delta[u] - b.delta[u]).norm());
  r.metrics["unitarity_defect"] = unit_def;
  r.metrics["intertwining_defect"] = inter;
  r.metrics["j_defect"] = jdef;
  r.metrics["delta_defect"] = ddef;
  r.require("unitary", unit_def <= tol);
  r.require("intertwines_actions", inter <= tol);
  r.require("intertwines_J", jdef <= tol);
  r.require("maps_delta", ddef <= tol);
  return {theta, r};
}

}  // namespace kmsd
