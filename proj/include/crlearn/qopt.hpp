#pragma once

// Query-distribution optimization over the capped simplex
// {q : sum q = 1, 0 <= q <= ub}, plus the query-space bookkeeping around it:
// entropy filtering, uniform mixing, adaptive time-grid growth, and
// constrained batch sampling against a shot ledger.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crlearn/errors.hpp"
#include "crlearn/fisher.hpp"
#include "crlearn/model.hpp"
#include "crlearn/noise.hpp"
#include "crlearn/rng.hpp"

namespace crlearn {

// ----------------------------------------------------------- query space --

enum class GrowthKind { Fixed, LinearT, ExponentialT };

struct GrowthPolicy {
  GrowthKind kind = GrowthKind::Fixed;
  double increment = 5e-7;  // LinearT: seconds of new horizon per growth
};

struct QuerySpace {
  std::vector<Meas> meas{Meas::X, Meas::Y, Meas::Z};
  std::vector<Prep> preps{Prep::U0, Prep::U1};
  std::vector<double> times;
  GrowthPolicy growth;

  std::size_t size() const { return meas.size() * preps.size() * times.size(); }

  std::vector<Query> queries() const {
    std::vector<Query> qs;
    qs.reserve(size());
    for (Meas m : meas)
      for (Prep u : preps)
        for (double t : times) qs.push_back({m, u, t});
    return qs;
  }
};

inline void validate(const QuerySpace& s) {
  if (s.meas.empty() || s.preps.empty() || s.times.empty())
    throw DomainError("query space must have measurements, preps and times");
  for (std::size_t i = 0; i + 1 < s.times.size(); ++i)
    if (!(s.times[i] < s.times[i + 1]))
      throw DomainError("time grid must be strictly increasing");
  if (!(s.times.front() > 0)) throw DomainError("times must be positive");
}

inline QuerySpace default_query_space(GrowthPolicy growth = {}) {
  QuerySpace s;
  s.growth = growth;
  for (int k = 0; k <= 80; ++k) s.times.push_back(1e-7 + 6.25e-9 * k);
  return s;
}

// Extends the time grid in place at unchanged spacing; the old grid is a
// strict prefix of the new one.
inline QuerySpace grow_space(const QuerySpace& s) {
  validate(s);
  if (s.growth.kind == GrowthKind::Fixed)
    throw PolicyError("fixed query space cannot grow");
  if (s.times.size() < 2)
    throw DomainError("growth needs an established grid spacing");
  double dt = s.times[1] - s.times[0];
  double t_last = s.times.back();
  double horizon = (s.growth.kind == GrowthKind::LinearT)
                       ? s.growth.increment
                       : t_last;  // ExponentialT doubles t_max
  auto n_new = static_cast<long long>(std::llround(horizon / dt));
  if (n_new < 1) throw DomainError("growth increment below grid spacing");
  QuerySpace out = s;
  for (long long i = 1; i <= n_new; ++i) out.times.push_back(t_last + dt * i);
  return out;
}

// -------------------------------------------------------- entropy filter --

inline double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
}

// Keeps x with S(x) > tau * max S; the maximizers always survive.
inline std::vector<Query> entropy_filter(const LambdaParams& l,
                                         const NoiseModel& n,
                                         const std::vector<Query>& queries,
                                         double tau = 0.95) {
  if (!(tau > 0.0) || tau > 1.0) throw DomainError("tau must be in (0, 1]");
  if (queries.empty()) throw DomainError("empty query list");
  std::vector<double> s(queries.size());
  double s_max = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    s[i] = binary_entropy(noisy_likelihood(l, n, queries[i]));
    s_max = std::max(s_max, s[i]);
  }
  std::vector<Query> out;
  for (std::size_t i = 0; i < queries.size(); ++i)
    if (s[i] > tau * s_max || s[i] == s_max) out.push_back(queries[i]);
  return out;
}

// ------------------------------------------------------------ projection --

// Euclidean projection onto {q : sum q = 1, 0 <= q <= ub} by bisection on
// the simplex shift.
inline Eigen::VectorXd project_capped_simplex(const Eigen::VectorXd& y,
                                              const Eigen::VectorXd& ub) {
  if (y.size() != ub.size()) throw DomainError("projection size mismatch");
  if (ub.minCoeff() < 0.0) throw DomainError("negative upper bound");
  if (ub.sum() < 1.0 - 1e-12)
    throw InfeasibleError("upper bounds sum below 1");
  auto mass = [&](double nu) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i)
      s += std::clamp(y[i] - nu, 0.0, ub[i]);
    return s;
  };
  double lo = (y - ub).minCoeff() - 1.0;
  double hi = y.maxCoeff();
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (mass(mid) > 1.0 ? lo : hi) = mid;
  }
  double nu = 0.5 * (lo + hi);
  Eigen::VectorXd q(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    q[i] = std::clamp(y[i] - nu, 0.0, ub[i]);
  return q;
}

// ------------------------------------------------------------ design solve --

struct DesignOptions {
  int max_iters = 5000;
  double rel_tol = 1e-8;
  double kkt_tol = 1e-6;
  bool record_trace = false;
};

struct DesignResult {
  QueryDistribution dist;
  double objective = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
  std::vector<double> trace;  // objective per accepted iterate
};

namespace detail {

// Objective Tr((V diag(q) V^T + lambda(q) I)^-1 W) with the same trace-scaled
// ridge the fisher module applies. Two numerical precautions make the pinned
// stationarity tolerance reachable when the parameter sensitivities span many
// orders of magnitude:
//  - score rows are rescaled internally; Tr(A^-1 W) = Tr((DAD)^-1 DWD) leaves
//    every evaluated quantity unchanged, with the raw-unit ridge lambda(q) I
//    entering the scaled matrix as the exact diagonal lambda(q) D^2;
//  - the weight is carried as a factor W = F F^T, so directions outside
//    range(W) stay exactly null instead of picking up rounding-level mass
//    that A^-1 can amplify by the squared condition number.
class DesignObjective {
 public:
  DesignObjective(const Eigen::MatrixXd& v, const Eigen::MatrixXd& w_factor)
      : colsq_(v.colwise().squaredNorm()) {
    Eigen::Index k = v.rows();
    Eigen::Index n = v.cols();
    if (w_factor.rows() != k) throw DomainError("weight factor row mismatch");
    cridge_ = 1e-12 / static_cast<double>(k);
    double lambda_u =
        n > 0 ? 1e-12 * colsq_.mean() / static_cast<double>(k) : 0.0;
    Eigen::VectorXd inv_scale(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      double rowsq =
          v.row(i).squaredNorm() / std::max<double>(1.0, static_cast<double>(n));
      double s = std::sqrt(rowsq + lambda_u);
      inv_scale[i] = s > 0.0 ? 1.0 / s : 1.0;
    }
    vs_ = inv_scale.asDiagonal() * v;
    fs_ = inv_scale.asDiagonal() * w_factor;
    d2_ = inv_scale.cwiseAbs2();
  }

  double value(const Eigen::VectorXd& q) const {
    Eigen::MatrixXd m = inverse_a(q);
    return (fs_.cwiseProduct(m * fs_)).sum();
  }

  // The ridge moves with q, so A(q) = sum_x q_x (v_x v_x^T + c |v_x|^2 I) is
  // linear in q with PSD atoms and the objective stays convex. The gradient
  // carries the ridge's own derivative, which is the same order as the score
  // term once the parameter sensitivities span many decades:
  // d/dq_x Tr(A^-1 W) = -(v_x^T A^-1 W A^-1 v_x + c |v_x|^2 Tr(A^-1 W A^-1)).
  double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const {
    Eigen::MatrixXd m = inverse_a(q);
    Eigen::MatrixXd g0 = m * fs_;
    Eigen::MatrixXd t = g0.transpose() * vs_;
    double trphi = g0.cwiseAbs2().rowwise().sum().dot(d2_);
    g = -(t.cwiseProduct(t)).colwise().sum();
    g -= (cridge_ * trphi) * colsq_;
    return (fs_.cwiseProduct(g0)).sum();
  }

  // Hessian of the objective restricted to the columns in s. With
  // S_x = v_x v_x^T + r_x I and Phi = A^-1 W A^-1:
  // H_xy = 2 [ (v_x^T A^-1 v_y)(v_x^T Phi v_y) + r_y t_x + r_x t_y
  //            + r_x r_y Tr(A^-1 Phi) ],   t_x = v_x^T A^-1 Phi v_x.
  void hessian_block(const Eigen::VectorXd& q,
                     const std::vector<Eigen::Index>& s,
                     Eigen::MatrixXd& h) const {
    Eigen::MatrixXd m = inverse_a(q);
    Eigen::MatrixXd g0 = m * fs_;
    Eigen::Index ns = static_cast<Eigen::Index>(s.size());
    Eigen::MatrixXd vsub(vs_.rows(), ns);
    Eigen::VectorXd rsub(ns);
    for (Eigen::Index i = 0; i < ns; ++i) {
      vsub.col(i) = vs_.col(s[i]);
      rsub[i] = cridge_ * colsq_[s[i]];
    }
    Eigen::MatrixXd b1 = vsub.transpose() * (m * vsub);
    Eigen::MatrixXd t1 = g0.transpose() * vsub;
    Eigen::MatrixXd b2 = t1.transpose() * t1;
    Eigen::MatrixXd dg0 = d2_.asDiagonal() * g0;
    Eigen::MatrixXd y = m * dg0;
    Eigen::MatrixXd t2 = y.transpose() * vsub;
    Eigen::VectorXd t = (t2.cwiseProduct(t1)).colwise().sum();
    double tau0 = (y.cwiseProduct(dg0)).sum();
    h = 2.0 * (b1.cwiseProduct(b2) + t * rsub.transpose() +
               rsub * t.transpose() + tau0 * rsub * rsub.transpose());
  }

 private:
  Eigen::MatrixXd inverse_a(const Eigen::VectorXd& q) const {
    Eigen::Index k = vs_.rows();
    Eigen::MatrixXd a = vs_ * q.asDiagonal() * vs_.transpose();
    double lambda = 1e-12 * colsq_.dot(q) / static_cast<double>(k);
    a.diagonal() += lambda * d2_;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
      throw NumericalError("design information matrix is singular");
    return llt.solve(Eigen::MatrixXd::Identity(k, k));
  }

  Eigen::VectorXd colsq_;   // raw-unit column norms, sets the ridge
  Eigen::MatrixXd vs_;      // row-rescaled scores
  Eigen::MatrixXd fs_;      // rescaled weight factor, scaled W = fs fs^T
  Eigen::VectorXd d2_;      // squared row rescaling, multiplies the ridge
  double cridge_ = 0.0;     // ridge coefficient per unit column norm
};

// Stationarity on the active set: the multiplier nu must match every free
// coordinate's gradient, and no capped coordinate's gradient may exceed it.
// Zero coordinates are the active lower bounds; they constrain nothing here.
// (Their complementarity is handled as a best-effort descent step in the
// solver: with a rank-deficient optimum the ridge creates equilibrium masses
// of order 1e-12 whose gradients cannot be resolved in double precision, so
// complementarity to 1e-6 is not a certifiable stopping criterion.)
struct KktStats {
  double residual;  // active-set stationarity, relative to the gradient scale
  double nu;        // simplex multiplier estimate
};

inline KktStats kkt_stats(const Eigen::VectorXd& q, const Eigen::VectorXd& g,
                          const Eigen::VectorXd& ub) {
  const double act = 1e-10;
  double g_scale = std::max(g.cwiseAbs().maxCoeff(), 1e-300);
  double free_sum = 0.0;
  int free_n = 0;
  double upper_max = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q[i] <= act) continue;
    if (q[i] >= ub[i] - act)
      upper_max = std::max(upper_max, g[i]);
    else {
      free_sum += g[i];
      ++free_n;
    }
  }
  double nu;
  if (free_n > 0)
    nu = free_sum / free_n;
  else
    nu = std::isfinite(upper_max) ? upper_max : 0.0;
  double resid = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q[i] <= act) continue;
    if (q[i] >= ub[i] - act)
      resid = std::max(resid, g[i] - nu);
    else
      resid = std::max(resid, std::abs(g[i] - nu));
  }
  return {resid / g_scale, nu};
}

inline double kkt_residual(const Eigen::VectorXd& q, const Eigen::VectorXd& g,
                           const Eigen::VectorXd& ub) {
  return kkt_stats(q, g, ub).residual;
}

}  // namespace detail

// Projected gradient descent with Armijo backtracking, followed by a
// working-set projected-Newton polish. The objective's curvature spans many
// orders of magnitude across queries, so first-order steps alone cannot reach
// the stationarity tolerance; the polish solves the problem restricted to the
// (small) support plus any queries whose multiplier sign says they should
// enter. Every accepted iterate in either phase decreases the objective.
// The weight enters as a factor, W = w_factor w_factor^T.
inline DesignResult solve_design(const Eigen::MatrixXd& v,
                                 const Eigen::MatrixXd& w_factor,
                                 std::vector<Query> queries,
                                 Eigen::VectorXd ub = {},
                                 const DesignOptions& opt = {}) {
  Eigen::Index n = v.cols();
  if (static_cast<std::size_t>(n) != queries.size())
    throw DomainError("score/query count mismatch");
  if (n == 0) throw DomainError("empty design space");
  if (ub.size() == 0) ub = Eigen::VectorXd::Ones(n);
  if (ub.size() != n) throw DomainError("upper bound size mismatch");
  if (ub.minCoeff() < 0.0) throw DomainError("negative upper bound");
  if (ub.sum() < 1.0 - 1e-12) throw InfeasibleError("upper bounds sum below 1");
  ub = ub.cwiseMin(1.0);

  detail::DesignObjective obj(v, w_factor);
  Eigen::VectorXd q = project_capped_simplex(
      Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)), ub);
  Eigen::VectorXd g(n);
  double f = obj.value_and_grad(q, g);

  DesignResult res;
  if (opt.record_trace) res.trace.push_back(f);
  int iter = 0;

  // Phase 1: projected gradient with an adaptive step.
  int pgd_cap = std::min(opt.max_iters, 400);
  double step = (1.0 / static_cast<double>(n)) /
                std::max(g.cwiseAbs().maxCoeff(), 1e-300);
  for (; iter < pgd_cap; ++iter) {
    step *= 2.0;
    bool accepted = false;
    double f_next = f;
    Eigen::VectorXd q_next;
    for (int bt = 0; bt < 80; ++bt) {
      q_next = project_capped_simplex(q - step * g, ub);
      double lin = g.dot(q_next - q);
      if (lin >= 0.0) break;  // numerically stationary
      double f_trial = obj.value(q_next);
      if (f_trial <= f + 1e-4 * lin) {
        f_next = f_trial;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    double rel_change = (f - f_next) / std::max(std::abs(f), 1e-300);
    q = q_next;
    f = obj.value_and_grad(q, g);
    if (opt.record_trace) res.trace.push_back(f);
    if (rel_change < std::max(opt.rel_tol, 1e-8)) break;
  }

  // Phase 2: damped Newton on a working set, plus a vertex-exchange probe.
  // The full gradient is cheap, so the objective and gradient stay global;
  // only the Hessian is restricted to the support plus the queries whose
  // multiplier sign says they should enter.
  for (int outer = 0; outer < 60; ++outer) {
    detail::KktStats stats = detail::kkt_stats(q, g, ub);

    bool improved = false;
    if (stats.residual > opt.kkt_tol) {
    std::vector<Eigen::Index> s;
    std::vector<std::pair<double, Eigen::Index>> entering;
    double g_scale = std::max(g.cwiseAbs().maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (q[i] > 1e-10)
        s.push_back(i);
      else if (g[i] < stats.nu - 1e-12 * g_scale)
        entering.push_back({g[i], i});
    }
    std::sort(entering.begin(), entering.end());
    for (std::size_t e = 0; e < entering.size() && e < 128; ++e)
      s.push_back(entering[e].second);
    Eigen::Index m = static_cast<Eigen::Index>(s.size());

    Eigen::VectorXd qs(m), ubs(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      qs[i] = q[s[i]];
      ubs[i] = ub[s[i]];
    }

    double tau_rel = 1e-10;
    Eigen::MatrixXd h;
    for (int inner = 0; inner < 160; ++inner) {
      Eigen::VectorXd gs(m);
      for (Eigen::Index i = 0; i < m; ++i) gs[i] = g[s[i]];
      detail::KktStats in_stats = detail::kkt_stats(qs, gs, ubs);
      // Working-set residual: the zero coordinates were selected for entry,
      // so their complementarity is part of this loop's job.
      double in_resid = in_stats.residual;
      {
        double gsc = std::max(gs.cwiseAbs().maxCoeff(), 1e-300);
        for (Eigen::Index i = 0; i < m; ++i)
          if (qs[i] <= 1e-10)
            in_resid = std::max(in_resid, (in_stats.nu - gs[i]) / gsc);
      }
      if (in_resid <= 0.3 * opt.kkt_tol) break;

      // Coordinates hovering near a bound whose multiplier clearly says they
      // belong on it are sent exactly onto the bound; leaving them to shrink
      // geometrically jams the iteration at dust-sized weights. The margin
      // keeps coordinates whose multiplier is merely equal to nu (e.g. the
      // single free coordinate) in the Newton block. The free block takes
      // the Newton direction, balancing the released mass.
      const double eps_a = 1e-6;
      double gsc = std::max(gs.cwiseAbs().maxCoeff(), 1e-300);
      double snap_margin = 0.5 * opt.kkt_tol * gsc;
      Eigen::VectorXd d = Eigen::VectorXd::Zero(m);
      std::vector<Eigen::Index> fr;
      double rho = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (qs[i] <= eps_a && gs[i] >= in_stats.nu + snap_margin) {
          d[i] = -qs[i];
          rho += qs[i];
        } else if (qs[i] >= ubs[i] - eps_a &&
                   gs[i] <= in_stats.nu - snap_margin) {
          d[i] = ubs[i] - qs[i];
          rho -= ubs[i] - qs[i];
        } else {
          fr.push_back(i);
        }
      }
      Eigen::Index mf = static_cast<Eigen::Index>(fr.size());
      if (mf == 0) break;

      obj.hessian_block(q, s, h);
      double h_scale = std::max(h.diagonal().maxCoeff(), 1e-300);

      bool accepted = false;
      Eigen::VectorXd qs_cand;
      for (int tries = 0; tries < 8 && !accepted; ++tries) {
        Eigen::MatrixXd hf(mf, mf);
        Eigen::VectorXd gf(mf);
        for (Eigen::Index i = 0; i < mf; ++i) {
          gf[i] = gs[fr[i]];
          for (Eigen::Index j = 0; j < mf; ++j) hf(i, j) = h(fr[i], fr[j]);
        }
        hf.diagonal().array() += tau_rel * h_scale;
        Eigen::LLT<Eigen::MatrixXd> llt(hf);
        if (llt.info() != Eigen::Success) {
          tau_rel *= 100.0;
          continue;
        }
        // Newton step for min g'd + d'Hd/2 subject to sum(d) = rho.
        Eigen::VectorXd u = llt.solve(gf);
        Eigen::VectorXd z = llt.solve(Eigen::VectorXd::Ones(mf));
        double nu = (rho + u.sum()) / std::max(z.sum(), 1e-300);
        for (Eigen::Index i = 0; i < mf; ++i) d[fr[i]] = -u[i] + nu * z[i];

        double alpha = 1.0;
        for (int bt = 0; bt < 60 && !accepted; ++bt) {
          qs_cand = project_capped_simplex(qs + alpha * d, ubs);
          double lin = gs.dot(qs_cand - qs);
          if (lin < 0.0) {
            Eigen::VectorXd q_trial = q;
            for (Eigen::Index i = 0; i < m; ++i) q_trial[s[i]] = qs_cand[i];
            double f_trial = obj.value(q_trial);
            if (f_trial <= f + 1e-4 * lin) {
              accepted = true;
              break;
            }
          }
          alpha *= 0.5;
        }
        if (!accepted) tau_rel *= 100.0;
      }
      if (!accepted) break;

      improved = true;
      tau_rel = std::max(tau_rel * 0.1, 1e-12);
      qs = qs_cand;
      for (Eigen::Index i = 0; i < m; ++i) q[s[i]] = qs[i];
      double f_prev = f;
      f = obj.value_and_grad(q, g);
      ++iter;
      if (opt.record_trace) res.trace.push_back(f);
      if ((f_prev - f) < opt.rel_tol * std::max(std::abs(f_prev), 1e-300) &&
          detail::kkt_residual(q, g, ub) <= opt.kkt_tol)
        break;
    }
    }

    // Vertex-exchange probe for entering coordinates. A coordinate entering
    // from (near) zero expands the information matrix rank, so its local
    // curvature scales like 1/q^3 and Newton steps from dust-sized mass only
    // grow geometrically; pulling a finite chunk of mass toward its vertex
    // in one line search escapes that regime. The material-decrease floor
    // rejects ridge-boundary-layer gains, which are real but of relative
    // size ~1e-13 and would otherwise be chased forever.
    bool improved_fw = false;
    {
      detail::KktStats fw_stats = detail::kkt_stats(q, g, ub);
      double g_scale = std::max(g.cwiseAbs().maxCoeff(), 1e-300);
      Eigen::Index jstar = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (q[i] >= ub[i] - 1e-12) continue;
        if (jstar < 0 || g[i] < g[jstar]) jstar = i;
      }
      if (jstar >= 0 &&
          g[jstar] < fw_stats.nu - 0.3 * opt.kkt_tol * g_scale &&
          q[jstar] < 1.0 - 1e-12) {
        Eigen::VectorXd dfw = -q;
        dfw[jstar] += 1.0;
        double lin0 = g.dot(dfw);
        if (lin0 < 0.0) {
          double gamma =
              std::min(1.0, (ub[jstar] - q[jstar]) / (1.0 - q[jstar]));
          for (int bt = 0; bt < 60; ++bt) {
            Eigen::VectorXd q_trial = q + gamma * dfw;
            double f_trial = obj.value(q_trial);
            if (f_trial <= f + 1e-4 * gamma * lin0 &&
                f - f_trial >= opt.rel_tol * std::abs(f)) {
              q = std::move(q_trial);
              f = obj.value_and_grad(q, g);
              ++iter;
              if (opt.record_trace) res.trace.push_back(f);
              improved_fw = true;
              break;
            }
            gamma *= 0.5;
          }
        }
      }
    }
    if (!improved_fw) {
      if (detail::kkt_residual(q, g, ub) <= opt.kkt_tol) break;
      if (!improved) break;
    }
  }

  res.kkt_residual = detail::kkt_residual(q, g, ub);
  res.objective = f;
  res.iterations = iter;
  res.dist.queries = std::move(queries);
  res.dist.w = std::move(q);
  return res;
}

inline Eigen::MatrixXd score_matrix(const LambdaParams& l, const NoiseModel& n,
                                    const std::vector<Query>& queries,
                                    const ParamMask& mask) {
  validate_mask(mask);
  Eigen::MatrixXd v(mask.size(), queries.size());
  for (std::size_t x = 0; x < queries.size(); ++x) {
    Vec6 s = query_score(l, n, queries[x]);
    for (std::size_t r = 0; r < mask.size(); ++r) v(r, x) = s[mask[r]];
  }
  return v;
}

inline const ParamMask& full_mask() {
  static const ParamMask m{0, 1, 2, 3, 4, 5};
  return m;
}

// Minimizes Tr(I_q^-1) over the capped simplex.
inline DesignResult optimize_fi(const LambdaParams& l, const NoiseModel& n,
                                const std::vector<Query>& queries,
                                Eigen::VectorXd ub = {},
                                const ParamMask& mask = full_mask(),
                                const DesignOptions& opt = {}) {
  Eigen::MatrixXd v = score_matrix(l, n, queries, mask);
  Eigen::MatrixXd w = Eigen::MatrixXd::Identity(
      static_cast<Eigen::Index>(mask.size()),
      static_cast<Eigen::Index>(mask.size()));
  return solve_design(v, w, queries, std::move(ub), opt);
}

// Minimizes Tr(I_q^-1 I_test) where I_test is the Fisher matrix of the
// testing distribution. The test Fisher is handed to the solver in factored
// form so its rank structure is exact.
inline DesignResult optimize_fir(const LambdaParams& l, const NoiseModel& n,
                                 const std::vector<Query>& queries,
                                 const QueryDistribution& p_test,
                                 Eigen::VectorXd ub = {},
                                 const ParamMask& mask = full_mask(),
                                 const DesignOptions& opt = {}) {
  validate(p_test);
  Eigen::MatrixXd v = score_matrix(l, n, queries, mask);
  Eigen::MatrixXd vt = score_matrix(l, n, p_test.queries, mask);
  Eigen::MatrixXd w_factor =
      vt * p_test.w.cwiseMax(0.0).cwiseSqrt().asDiagonal();
  return solve_design(v, w_factor, queries, std::move(ub), opt);
}

// ---------------------------------------------------------------- mixing --

inline QueryDistribution mix_uniform(const QueryDistribution& q,
                                     std::uint64_t n_tot) {
  validate(q);
  if (n_tot < 1) throw DomainError("n_tot must be at least 1");
  double mu = 1.0 - std::pow(static_cast<double>(n_tot), -1.0 / 6.0);
  QueryDistribution out = q;
  double unif = 1.0 / static_cast<double>(q.w.size());
  out.w = mu * q.w + (1.0 - mu) * Eigen::VectorXd::Constant(q.w.size(), unif);
  return out;
}

// -------------------------------------------------------- batch sampling --

// Draws n_b i.i.d. queries from qdist restricted to ledger-available ones,
// then caps each query at its remaining shots and reassigns the excess
// uniformly among queries that still have capacity.
inline std::vector<std::uint64_t> sample_batch_counts(
    const QueryDistribution& qdist, std::uint64_t n_b,
    const std::vector<std::uint64_t>& ledger, RngStream& rng) {
  validate(qdist);
  std::size_t n = qdist.queries.size();
  if (ledger.size() != n) throw DomainError("ledger size mismatch");

  std::uint64_t total = 0;
  bool unlimited = false;
  for (std::uint64_t c : ledger) {
    if (c == kUnlimitedShots) unlimited = true;
    else if (total <= kUnlimitedShots - c) total += c;
  }
  if (!unlimited && total < n_b)
    throw BudgetExhaustedError("ledger holds fewer shots than the batch");

  std::vector<double> w(n);
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = (ledger[i] > 0) ? std::max(qdist.w[i], 0.0) : 0.0;
    wsum += w[i];
  }

  std::vector<std::uint64_t> cnt(n, 0);
  std::uint64_t excess = n_b;
  if (wsum > 0.0) {
    std::vector<double> cdf(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += w[i] / wsum;
      cdf[i] = acc;
    }
    cdf[n - 1] = 1.0;
    for (std::uint64_t d = 0; d < n_b; ++d) cnt[rng.sample_cdf(cdf)] += 1;
    excess = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (cnt[i] > ledger[i]) {
        excess += cnt[i] - ledger[i];
        cnt[i] = ledger[i];
      }
  }

  if (excess > 0) {
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n; ++i)
      if (cnt[i] < ledger[i]) open.push_back(i);
    while (excess > 0) {
      std::size_t pick = rng.uniform_index(open.size());
      std::size_t i = open[pick];
      cnt[i] += 1;
      excess -= 1;
      if (cnt[i] >= ledger[i]) {
        open[pick] = open.back();
        open.pop_back();
      }
    }
  }
  return cnt;
}

inline std::vector<Query> sample_batch(const QueryDistribution& qdist,
                                       std::uint64_t n_b,
                                       const std::vector<std::uint64_t>& ledger,
                                       RngStream& rng) {
  std::vector<std::uint64_t> cnt = sample_batch_counts(qdist, n_b, ledger, rng);
  std::vector<Query> out;
  out.reserve(n_b);
  for (std::size_t i = 0; i < cnt.size(); ++i)
    for (std::uint64_t s = 0; s < cnt[i]; ++s) out.push_back(qdist.queries[i]);
  return out;
}

}  // namespace crlearn
