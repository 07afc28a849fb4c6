#pragma once

// Fisher-information machinery. Per-query matrices are rank one and block
// supported in Lambda coordinates; distribution matrices are their convex
// mixtures. Inversion always goes through the trace-scaled ridge so solver
// and diagnostics see the same spectrum.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "crlearn/errors.hpp"
#include "crlearn/model.hpp"
#include "crlearn/noise.hpp"

namespace crlearn {

using FisherMatrix = Eigen::MatrixXd;
using ParamMask = std::vector<int>;

inline void validate_mask(const ParamMask& m, int dim = 6) {
  if (m.empty()) throw DomainError("parameter mask must be nonempty");
  std::vector<bool> seen(dim, false);
  for (int i : m) {
    if (i < 0 || i >= dim) throw DomainError("mask index out of range");
    if (seen[i]) throw DomainError("duplicate mask index");
    seen[i] = true;
  }
}

struct QueryDistribution {
  std::vector<Query> queries;
  Eigen::VectorXd w;
};

inline void validate(const QueryDistribution& q) {
  if (static_cast<std::size_t>(q.w.size()) != q.queries.size())
    throw DomainError("weight/query size mismatch");
  if (q.w.size() == 0) throw DomainError("empty query distribution");
  if (q.w.minCoeff() < -1e-12) throw DomainError("negative query weight");
  if (std::abs(q.w.sum() - 1.0) > 1e-10)
    throw DomainError("query weights must sum to 1");
}

inline QueryDistribution uniform_distribution(std::vector<Query> queries) {
  QueryDistribution q;
  q.w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(queries.size()),
                                  1.0 / static_cast<double>(queries.size()));
  q.queries = std::move(queries);
  return q;
}

// Score direction v with I_x = v v^T; zero vector when the query carries no
// information (saturated likelihood or vanishing score).
inline Vec6 query_score(const LambdaParams& l, const NoiseModel& n,
                        const Query& q) {
  LikelihoodEval e = noisy_likelihood_grad(l, n, q);
  if (!(e.p > 0.0) || !(e.p < 1.0)) return Vec6::Zero();
  return e.grad / std::sqrt(e.p * (1.0 - e.p));
}

inline FisherMatrix query_fisher(const LambdaParams& l, const NoiseModel& n,
                                 const Query& q) {
  Vec6 v = query_score(l, n, q);
  return v * v.transpose();
}

inline FisherMatrix distribution_fisher(const QueryDistribution& qdist,
                                        const LambdaParams& l,
                                        const NoiseModel& n) {
  validate(qdist);
  FisherMatrix f = FisherMatrix::Zero(6, 6);
  for (Eigen::Index i = 0; i < qdist.w.size(); ++i) {
    if (qdist.w[i] <= 0.0) continue;
    Vec6 v = query_score(l, n, qdist.queries[i]);
    f.noalias() += qdist.w[i] * (v * v.transpose());
  }
  return f;
}

inline FisherMatrix reduced_fisher(const FisherMatrix& f, const ParamMask& m) {
  validate_mask(m, static_cast<int>(f.rows()));
  FisherMatrix out(m.size(), m.size());
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m.size(); ++c) out(r, c) = f(m[r], m[c]);
  return out;
}

// D[i][k] = d Lambda_k / d J_i; J order (IX, IY, IZ, ZX, ZY, ZZ),
// Lambda order (w0, d0, f0, w1, d1, f1).
inline Eigen::Matrix<double, 6, 6> jacobian_lambda_j(const JParams& j) {
  Eigen::Matrix<double, 6, 6> d = Eigen::Matrix<double, 6, 6>::Zero();
  for (int blk = 0; blk < 2; ++blk) {
    BlockCoeffs bc = block_coeffs(j, blk);
    double a = bc.a;
    double re = bc.beta.real(), im = bc.beta.imag();
    double bmag = std::abs(bc.beta);
    double w = std::sqrt(a * a + re * re + im * im);
    if (!(w > 0.0) || !(bmag > 0.0))
      throw SingularityError("jacobian undefined at omega = 0 or |beta| = 0");
    double w2 = w * w;
    // rows: partials with respect to (a, Re beta, Im beta)
    double dw[3] = {a / w, re / w, im / w};
    double dd[3] = {bmag / w2, -a * re / (w2 * bmag), -a * im / (w2 * bmag)};
    double df[3] = {0.0, -im / (bmag * bmag), re / (bmag * bmag)};
    double sgn = (blk == 0) ? 1.0 : -1.0;
    // coefficient of each J component in (a, Re beta, Im beta) of this block
    const int target[6] = {1, 2, 0, 1, 2, 0};  // IX->Re, IY->Im, IZ->a, ZX->Re, ...
    const double coeff[6] = {1.0, 1.0, 1.0, sgn, sgn, sgn};
    for (int i = 0; i < 6; ++i) {
      int tgt = target[i];
      d(i, 3 * blk + 0) += coeff[i] * dw[tgt];
      d(i, 3 * blk + 1) += coeff[i] * dd[tgt];
      d(i, 3 * blk + 2) += coeff[i] * df[tgt];
    }
  }
  return d;
}

inline FisherMatrix fisher_lambda_to_j(const FisherMatrix& f_lambda,
                                       const JParams& j) {
  Eigen::Matrix<double, 6, 6> d = jacobian_lambda_j(j);
  return d * f_lambda * d.transpose();
}

inline FisherMatrix ridged(const FisherMatrix& f) {
  double lambda = 1e-12 * f.trace() / static_cast<double>(f.rows());
  return f + lambda * FisherMatrix::Identity(f.rows(), f.cols());
}

inline Eigen::LLT<FisherMatrix> ridged_llt(const FisherMatrix& f) {
  Eigen::LLT<FisherMatrix> llt(ridged(f));
  if (llt.info() != Eigen::Success)
    throw NumericalError("Fisher matrix not positive definite after ridge");
  return llt;
}

// Tr(f^-1) with the ridge applied.
inline double a_opt_objective(const FisherMatrix& f) {
  auto llt = ridged_llt(f);
  FisherMatrix inv =
      llt.solve(FisherMatrix::Identity(f.rows(), f.cols()));
  return inv.trace();
}

// Tr(f_q^-1 f_test), the Fisher information ratio numerator.
inline double fir_objective(const FisherMatrix& f_q,
                            const FisherMatrix& f_test) {
  if (f_q.rows() != f_test.rows())
    throw DomainError("fir_objective: dimension mismatch");
  auto llt = ridged_llt(f_q);
  return llt.solve(f_test).trace();
}

}  // namespace crlearn
