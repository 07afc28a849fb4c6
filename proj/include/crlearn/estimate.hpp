#pragma once

// Staged estimation: Rabi curves from shots, frequency estimation by dense
// regression scan plus bracketed refinement, closed-form initialization, and
// the three-stage maximum-likelihood solve.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crlearn/errors.hpp"
#include "crlearn/fisher.hpp"
#include "crlearn/model.hpp"
#include "crlearn/noise.hpp"
#include "crlearn/oracle.hpp"
#include "crlearn/rng.hpp"

namespace crlearn {

// Normalization scale for parameter components, in s^-1. Used both for the
// RMSE metric and to nondimensionalize coordinates inside the optimizers.
inline constexpr double kXi = 1e6;

// ------------------------------------------------------------ Rabi curves --

struct RabiCurve {
  Meas m = Meas::X;
  Prep u = Prep::U0;
  std::vector<double> t;             // sorted ascending
  std::vector<double> p;             // population difference 2 p(0) - 1
  std::vector<std::uint64_t> shots;  // shots behind each point
};

struct RabiCurveSet {
  std::vector<RabiCurve> curves;

  const RabiCurve* find(Meas m, Prep u) const {
    for (const auto& c : curves)
      if (c.m == m && c.u == u) return &c;
    return nullptr;
  }
};

// Bounded 1-D MLE of the population difference q in [-1, 1] for one query's
// signal multiset. The per-shot density (1+q)f0/2 + (1-q)f1/2 is log-concave
// in q, so the score is monotone and bisection is exact.
inline double signal_rabi_mle(const GaussianSignal& g,
                              const std::vector<std::complex<double>>& cs) {
  std::vector<double> f0(cs.size()), f1(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    f0[i] = signal_density(g, cs[i], 0);
    f1[i] = signal_density(g, cs[i], 1);
  }
  auto score = [&](double q) {
    double s = 0.0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
      double mix = (1.0 + q) * f0[i] + (1.0 - q) * f1[i];
      s += (f0[i] - f1[i]) / std::max(mix, 1e-300);
    }
    return s;
  };
  if (score(-1.0) <= 0.0) return -1.0;
  if (score(1.0) >= 0.0) return 1.0;
  double lo = -1.0, hi = 1.0;
  for (int it = 0; it < 80; ++it) {
    double mid = 0.5 * (lo + hi);
    (score(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Rabi estimates per (meas, prep) curve. BitFlip data gets the exact affine
// readout inversion (unbounded by design); signal data gets the bounded
// per-query MLE, clamped to [-1, 1] by construction.
inline RabiCurveSet rabi_from_data(const Dataset& d,
                                   const ReadoutModel& readout) {
  std::map<std::pair<int, int>, std::vector<const QueryShots*>> groups;
  for (const auto& row : d.rows()) {
    if (row.count() == 0)
      throw MissingDataError("query with no shots at t = " +
                             std::to_string(row.q.t));
    groups[{static_cast<int>(row.q.m), static_cast<int>(row.q.u)}].push_back(
        &row);
  }
  if (groups.empty()) throw MissingDataError("dataset has no shots");

  const GaussianSignal* gs = nullptr;
  if (d.kind() == ReadoutKind::GaussianSignal) {
    gs = std::get_if<GaussianSignal>(&readout);
    if (!gs)
      throw ModelKindError("signal dataset needs a GaussianSignal readout");
  }
  double r0 = 0.0, r1 = 0.0;
  readout_rates(readout, r0, r1);

  RabiCurveSet out;
  for (auto& [key, rows] : groups) {
    std::sort(rows.begin(), rows.end(),
              [](const QueryShots* a, const QueryShots* b) {
                return a->q.t < b->q.t;
              });
    RabiCurve c;
    c.m = static_cast<Meas>(key.first);
    c.u = static_cast<Prep>(key.second);
    for (const QueryShots* row : rows) {
      c.t.push_back(row->q.t);
      c.shots.push_back(row->count());
      if (gs) {
        c.p.push_back(signal_rabi_mle(*gs, row->signals));
      } else {
        double p_hat0 = static_cast<double>(row->n0) /
                        static_cast<double>(row->n0 + row->n1);
        c.p.push_back(rabi_readout_correction(p_hat0, r0, r1));
      }
    }
    out.curves.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------- frequency estimation --

struct FrequencyEstimate {
  double omega0 = 0.0;
  double omega1 = 0.0;
  // Equal-residual candidates were found; the lowest frequency was kept.
  bool tie0 = false;
  bool tie1 = false;
  // A block without any curves keeps omega = 0 and has = false.
  bool has0 = false;
  bool has1 = false;
};

namespace detail {

// Least-squares fit of one curve against {cos(w2 t), sin(w2 t), 1}, where w2
// is the angular frequency of the curve itself (2 omega for the Rabi forms).
// Returns the residual sum of squares.
inline double curve_fit(const std::vector<double>& t,
                        const std::vector<double>& p, double w2,
                        Eigen::Vector3d* coef = nullptr) {
  Eigen::Matrix3d gram = Eigen::Matrix3d::Zero();
  Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < t.size(); ++i) {
    Eigen::Vector3d v(std::cos(w2 * t[i]), std::sin(w2 * t[i]), 1.0);
    gram += v * v.transpose();
    rhs += p[i] * v;
  }
  // Tiny ridge keeps the w2 -> 0 limit solvable (cos column ~ constant).
  gram.diagonal().array() += 1e-10 * gram.trace();
  Eigen::Vector3d c = gram.ldlt().solve(rhs);
  if (coef) *coef = c;
  double rss = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    double fit =
        c[0] * std::cos(w2 * t[i]) + c[1] * std::sin(w2 * t[i]) + c[2];
    rss += (p[i] - fit) * (p[i] - fit);
  }
  return rss;
}

inline std::vector<const RabiCurve*> block_curves(const RabiCurveSet& curves,
                                                  int block) {
  std::vector<const RabiCurve*> out;
  for (const auto& c : curves.curves)
    if (block_index(c.u) == block) out.push_back(&c);
  return out;
}

}  // namespace detail

// Frequency per preparation block: curves prepared with U_j estimate omega_j
// (the likelihood factorizes over blocks, so there is no cross assignment).
// A dense scan of the regression residual over curve frequencies, allowing
// off-bin candidates, is refined by golden-section search well inside one
// Fourier bin of the scan minimum.
inline FrequencyEstimate estimate_frequencies(const RabiCurveSet& curves,
                                              const std::vector<double>& grid) {
  if (grid.size() < 8)
    throw DomainError("frequency estimation needs >= 8 grid points");
  double dt = grid[1] - grid[0];
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    dt = std::min(dt, grid[i + 1] - grid[i]);
  if (!(dt > 0.0)) throw DomainError("time grid must be strictly increasing");
  double span = grid.back() - grid.front();
  double bin = 2.0 * kPi / span;       // Fourier resolution of the window
  double w2_max = kPi / dt;            // Nyquist for the curve frequency
  double step = bin / 16.0;

  if (curves.curves.empty())
    throw MissingDataError("no curves to estimate frequencies from");

  FrequencyEstimate out;
  for (int block = 0; block < 2; ++block) {
    auto bc = detail::block_curves(curves, block);
    if (bc.empty()) continue;
    double amp = 0.0;
    for (const RabiCurve* c : bc) {
      if (c->t.size() < 8)
        throw DomainError("frequency estimation needs >= 8 points per curve");
      for (double v : c->p) amp = std::max(amp, std::abs(v));
    }
    if (amp < 0.05)
      throw WeakSignalError("flat Rabi curves in preparation block " +
                            std::to_string(block));

    auto resid = [&](double w2) {
      double e = 0.0;
      for (const RabiCurve* c : bc) e += detail::curve_fit(c->t, c->p, w2);
      return e;
    };

    double best_w2 = step, best_e = resid(step);
    bool tie = false;
    for (double w2 = 2.0 * step; w2 <= w2_max; w2 += step) {
      double e = resid(w2);
      if (e < best_e * (1.0 - 1e-12)) {
        best_w2 = w2;
        best_e = e;
        tie = false;
      } else if (e <= best_e * (1.0 + 1e-12)) {
        tie = true;  // keep the lower frequency
      }
    }

    double lo = std::max(step / 16.0, best_w2 - step);
    double hi = std::min(w2_max, best_w2 + step);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = lo, b = hi;
    double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
    double f1 = resid(x1), f2 = resid(x2);
    for (int it = 0; it < 120 && (b - a) > 1e-12 * w2_max; ++it) {
      if (f1 < f2) {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - gr * (b - a);
        f1 = resid(x1);
      } else {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + gr * (b - a);
        f2 = resid(x2);
      }
    }
    double w2_hat = 0.5 * (a + b);
    if (block == 0) {
      out.omega0 = 0.5 * w2_hat;
      out.tie0 = tie;
      out.has0 = true;
    } else {
      out.omega1 = 0.5 * w2_hat;
      out.tie1 = tie;
      out.has1 = true;
    }
  }
  return out;
}

// ------------------------------------------------------------- initializer --

struct InitEstimate {
  LambdaParams lambda;
  FrequencyEstimate freq;
  // Coefficient system was inconsistent; the block fell back to delta=phi=0.
  std::array<bool, 2> coeff_fallback{false, false};
};

namespace detail {

// Residual of a block's curves against the closed Rabi forms.
inline double block_residual(const std::vector<const RabiCurve*>& bc,
                             double omega, double delta, double phi) {
  double e = 0.0;
  for (const RabiCurve* c : bc)
    for (std::size_t i = 0; i < c->t.size(); ++i) {
      double r = rabi_eval(c->m, delta, phi, omega * c->t[i]).r;
      e += (c->p[i] - r) * (c->p[i] - r);
    }
  return e;
}

// Joint gradient descent on the residual over (omega, delta, phi), with the
// frequency nondimensionalized by kXi so one step size fits all coordinates.
// The frequency is confined to [omega_lo, omega_hi]: the refinement polishes
// the basin the frequency scan locked onto, it must not jump to another one.
inline void refine_block(const std::vector<const RabiCurve*>& bc,
                         double omega_lo, double omega_hi, double& omega,
                         double& delta, double& phi) {
  Eigen::Vector3d x(omega / kXi, delta, phi);
  Eigen::Vector3d lo(omega_lo / kXi, -kPi / 2, -kPi - 1.0);
  Eigen::Vector3d hi(omega_hi / kXi, kPi / 2, kPi + 1.0);
  auto clamp = [&](Eigen::Vector3d v) {
    return v.cwiseMax(lo).cwiseMin(hi);
  };
  auto eval = [&](const Eigen::Vector3d& z, Eigen::Vector3d* g) {
    if (g) g->setZero();
    double e = 0.0;
    for (const RabiCurve* c : bc)
      for (std::size_t i = 0; i < c->t.size(); ++i) {
        RabiEval re = rabi_eval(c->m, z[1], z[2], z[0] * kXi * c->t[i]);
        double d = re.r - c->p[i];
        e += d * d;
        if (g) {
          (*g)[0] += 2.0 * d * re.du * c->t[i] * kXi;
          (*g)[1] += 2.0 * d * re.ddelta;
          (*g)[2] += 2.0 * d * re.dphi;
        }
      }
    return e;
  };
  Eigen::Vector3d g;
  double f = eval(x, &g);
  double eta = 1.0;
  for (int it = 0; it < 200; ++it) {
    double gmax = g.cwiseAbs().maxCoeff();
    if (gmax <= 1e-12 * std::max(1.0, f)) break;
    bool moved = false;
    for (int halve = 0; halve < 50; ++halve) {
      Eigen::Vector3d xt = clamp(x - eta * g);
      double lin = g.dot(xt - x);
      if (lin >= 0.0) {
        eta *= 0.5;
        continue;
      }
      double ft = eval(xt, nullptr);
      if (ft <= f + 1e-4 * lin) {
        x = xt;
        f = eval(x, &g);
        eta *= 2.0;
        moved = true;
        break;
      }
      eta *= 0.5;
    }
    if (!moved) break;
  }
  omega = x[0] * kXi;
  delta = x[1];
  phi = wrap_phi(x[2]);
}

}  // namespace detail

namespace detail {

// Closed-form map from regression coefficients to the block angles. The MZ
// offset fixes |delta| (offset = sin^2 delta); the MX/MY sin-quadrature
// amplitudes fix phi up to the sign of delta, so the four (sign, phi vs
// phi+pi) branches are scored against the residual and the lowest wins, ties
// toward the smallest |phi|.
inline void block_closed_form(const std::vector<const RabiCurve*>& bc,
                              double omega, double& delta, double& phi,
                              bool& fallback) {
  Eigen::Vector3d cz = Eigen::Vector3d::Zero();
  Eigen::Vector3d cx = Eigen::Vector3d::Zero();
  Eigen::Vector3d cy = Eigen::Vector3d::Zero();
  bool has_z = false, has_x = false, has_y = false;
  for (const RabiCurve* c : bc) {
    Eigen::Vector3d coef;
    curve_fit(c->t, c->p, 2.0 * omega, &coef);
    if (c->m == Meas::Z) {
      cz = coef;
      has_z = true;
    } else if (c->m == Meas::X) {
      cx = coef;
      has_x = true;
    } else {
      cy = coef;
      has_y = true;
    }
  }

  double delta_mag = 0.0, phi0 = 0.0;
  bool ok = true;
  if (has_z && std::isfinite(cz[2])) {
    if (cz[2] < -0.2 || cz[2] > 1.2) ok = false;
    double s2 = std::clamp(cz[2], 0.0, 1.0);
    delta_mag = std::asin(std::sqrt(s2));
  } else if (has_x || has_y) {
    // sin(delta) cos(delta) from the offsets when no MZ curve is present
    double h = std::hypot(cx[2], cy[2]);
    delta_mag = 0.5 * std::asin(std::clamp(2.0 * h, 0.0, 1.0));
  } else {
    ok = false;
  }
  if (has_x || has_y) {
    // sin-quadrature amplitudes: B_X = cos(delta) sin(phi),
    // B_Y = -cos(delta) cos(phi)
    phi0 = std::atan2(cx[1], -cy[1]);
    if (!std::isfinite(phi0)) {
      phi0 = 0.0;
      ok = false;
    }
  }
  fallback = !ok;
  if (!ok) {
    delta_mag = 0.0;
    phi0 = 0.0;
  }

  struct Branch {
    double delta, phi, resid;
  };
  std::vector<Branch> branches;
  for (double sd : {1.0, -1.0})
    for (double dp : {0.0, kPi}) {
      double d = sd * delta_mag, pphi = wrap_phi(phi0 + dp);
      branches.push_back({d, pphi, block_residual(bc, omega, d, pphi)});
    }
  std::sort(branches.begin(), branches.end(),
            [](const Branch& a, const Branch& b) {
              if (std::abs(a.resid - b.resid) >
                  1e-12 * (1.0 + std::abs(a.resid)))
                return a.resid < b.resid;
              return std::abs(a.phi) < std::abs(b.phi);
            });
  delta = branches.front().delta;
  phi = branches.front().phi;
}

}  // namespace detail

// Closed-form block initialization from the regression coefficients, then a
// joint descent refinement of (omega, delta, phi) per block, with omega kept
// within one Fourier bin of the frequency estimate.
inline InitEstimate init_estimate(const RabiCurveSet& curves,
                                  const std::vector<double>& grid,
                                  const FrequencyEstimate& freq) {
  double dt = grid.size() > 1 ? grid[1] - grid[0] : 1.0;
  double t_lo = grid.empty() ? 0.0 : grid[0], t_hi = t_lo;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    dt = std::min(dt, grid[i + 1] - grid[i]);
  for (double t : grid) {
    t_lo = std::min(t_lo, t);
    t_hi = std::max(t_hi, t);
  }
  double omega_max = kPi / dt;
  double bin = t_hi > t_lo ? kPi / (t_hi - t_lo) : omega_max;

  InitEstimate out;
  out.freq = freq;
  for (int block = 0; block < 2; ++block) {
    auto bc = detail::block_curves(curves, block);
    if (bc.empty())
      throw MissingDataError("no curves for preparation block " +
                             std::to_string(block));
    double omega = block == 0 ? freq.omega0 : freq.omega1;

    double delta = 0.0, phi = 0.0;
    bool fallback = false;
    detail::block_closed_form(bc, omega, delta, phi, fallback);
    out.coeff_fallback[block] = fallback;

    detail::refine_block(bc, std::max(0.0, omega - bin),
                         std::min(omega_max, omega + bin), omega, delta, phi);

    if (block == 0) {
      out.lambda.omega0 = omega;
      out.lambda.delta0 = delta;
      out.lambda.phi0 = phi;
    } else {
      out.lambda.omega1 = omega;
      out.lambda.delta1 = delta;
      out.lambda.phi1 = phi;
    }
  }
  return out;
}

inline InitEstimate init_estimate(const RabiCurveSet& curves,
                                  const std::vector<double>& grid) {
  return init_estimate(curves, grid, estimate_frequencies(curves, grid));
}

// ---------------------------------------------------------------- the MLE --

struct EstimatorConfig {
  bool stage1 = true;  // stochastic descent in the polar parameterization
  bool stage2 = true;  // stochastic descent in the coupling parameterization
  double eta = 1e-3;   // Adam step; callers decay it as 1/sqrt(N)
  std::uint64_t batch = 256;
  int max_epochs = 50;
  double plateau_rel = 1e-7;  // relative full-loss improvement to keep going
  double qn_tol = 1e-8;       // projected-gradient infinity norm, scaled
  int qn_max_iters = 500;
  double omega_max = 0.0;     // 0: derive pi/dt from the dataset's time grid
  ParamMask mask;             // active Lambda components; empty means all six
};

namespace detail {

struct AggRow {
  Query q;
  double n0 = 0.0, n1 = 0.0;                    // bit-outcome counts
  std::vector<std::pair<double, double>> sig;   // (f0, f1) per signal shot
};

struct LossData {
  std::vector<AggRow> rows;
  double total = 0.0;
};

inline LossData make_loss_data(const Dataset& d, const NoiseModel& nm) {
  const GaussianSignal* gs = nullptr;
  if (d.kind() == ReadoutKind::GaussianSignal) {
    gs = std::get_if<GaussianSignal>(&nm.readout);
    if (!gs)
      throw ModelKindError("signal dataset needs a GaussianSignal readout");
  }
  LossData out;
  for (const auto& row : d.rows()) {
    if (row.count() == 0) continue;
    AggRow r;
    r.q = row.q;
    if (gs) {
      r.sig.reserve(row.signals.size());
      for (auto c : row.signals)
        r.sig.emplace_back(signal_density(*gs, c, 0),
                           signal_density(*gs, c, 1));
    } else {
      r.n0 = static_cast<double>(row.n0);
      r.n1 = static_cast<double>(row.n1);
    }
    out.total += static_cast<double>(row.count());
    out.rows.push_back(std::move(r));
  }
  if (out.rows.empty()) throw MissingDataError("dataset has no shots");
  return out;
}

// Mean negative log-likelihood; 0 log 0 counts as 0, a genuinely impossible
// observation makes the loss non-finite and throws with the query index.
inline double nll(const LambdaParams& l, const NoiseModel& nm,
                  const LossData& d, Vec6* grad = nullptr) {
  double loss = 0.0;
  if (grad) grad->setZero();
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    const AggRow& row = d.rows[i];
    double p;
    Vec6 gp;
    if (grad) {
      LikelihoodEval e = noisy_likelihood_grad(l, nm, row.q);
      p = e.p;
      gp = e.grad;
    } else {
      p = noisy_likelihood(l, nm, row.q);
    }
    double term = 0.0, coef = 0.0;
    if (!row.sig.empty()) {
      for (auto [f0, f1] : row.sig) {
        double mix = p * f0 + (1.0 - p) * f1;
        term -= std::log(mix);
        if (grad) coef -= (f0 - f1) / mix;
      }
    } else {
      if (row.n0 > 0.0) {
        term -= row.n0 * std::log(p);
        if (grad) coef -= row.n0 / p;
      }
      if (row.n1 > 0.0) {
        term -= row.n1 * std::log1p(-p);
        if (grad) coef += row.n1 / (1.0 - p);
      }
    }
    if (!std::isfinite(term))
      throw NumericalError("non-finite loss at query index " +
                           std::to_string(i));
    loss += term;
    if (grad) *grad += coef * gp;
  }
  loss /= d.total;
  if (grad) *grad /= d.total;
  return loss;
}

struct ShotRef {
  std::uint32_t row;
  std::uint32_t item;  // outcome bit (counts) or signal index
};

inline std::vector<ShotRef> shot_refs(const LossData& d) {
  std::vector<ShotRef> refs;
  refs.reserve(static_cast<std::size_t>(d.total));
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    const AggRow& row = d.rows[i];
    auto ri = static_cast<std::uint32_t>(i);
    if (!row.sig.empty()) {
      for (std::uint32_t k = 0; k < row.sig.size(); ++k)
        refs.push_back({ri, k});
    } else {
      for (std::uint64_t c = 0; c < static_cast<std::uint64_t>(row.n0); ++c)
        refs.push_back({ri, 0});
      for (std::uint64_t c = 0; c < static_cast<std::uint64_t>(row.n1); ++c)
        refs.push_back({ri, 1});
    }
  }
  return refs;
}

// Minibatch gradient of the mean negative log-likelihood. Likelihoods are
// clamped away from {0, 1} here; exactness is only required of the full
// evaluations that rank candidates.
inline Vec6 batch_grad(const LambdaParams& l, const NoiseModel& nm,
                       const LossData& d, const std::vector<ShotRef>& refs,
                       std::size_t begin, std::size_t end) {
  Vec6 g = Vec6::Zero();
  std::unordered_map<std::uint32_t, LikelihoodEval> cache;
  for (std::size_t i = begin; i < end; ++i) {
    const ShotRef& ref = refs[i];
    auto it = cache.find(ref.row);
    if (it == cache.end())
      it = cache
               .emplace(ref.row,
                        noisy_likelihood_grad(l, nm, d.rows[ref.row].q))
               .first;
    const LikelihoodEval& e = it->second;
    double p = std::clamp(e.p, 1e-12, 1.0 - 1e-12);
    double coef;
    const AggRow& row = d.rows[ref.row];
    if (!row.sig.empty()) {
      auto [f0, f1] = row.sig[ref.item];
      double mix = p * f0 + (1.0 - p) * f1;
      coef = -(f0 - f1) / std::max(mix, 1e-300);
    } else {
      coef = ref.item == 0 ? -1.0 / p : 1.0 / (1.0 - p);
    }
    g += coef * e.grad;
  }
  return g / static_cast<double>(end - begin);
}

// Projected L-BFGS on a box, memory 10. Curvature pairs with non-positive
// s.y are skipped; convergence is the projected-gradient infinity norm.
inline double lbfgs_box(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
    Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
    double tol, int max_iters) {
  auto project = [&](Eigen::VectorXd v) {
    return v.cwiseMax(lo).cwiseMin(hi);
  };
  std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> mem;  // (s, y)
  Eigen::VectorXd g(x.size());
  double f = fg(x, g);
  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::VectorXd pg = x - project(x - g);
    if (pg.cwiseAbs().maxCoeff() <= tol) break;

    Eigen::VectorXd dir = -g;
    if (!mem.empty()) {
      std::vector<double> alpha(mem.size());
      Eigen::VectorXd qv = g;
      for (std::size_t k = mem.size(); k-- > 0;) {
        const auto& [s, y] = mem[k];
        alpha[k] = s.dot(qv) / y.dot(s);
        qv -= alpha[k] * y;
      }
      const auto& [s0, y0] = mem.back();
      qv *= y0.dot(s0) / y0.dot(y0);
      for (std::size_t k = 0; k < mem.size(); ++k) {
        const auto& [s, y] = mem[k];
        double beta = y.dot(qv) / y.dot(s);
        qv += (alpha[k] - beta) * s;
      }
      dir = -qv;
    }
    if (dir.dot(g) >= 0.0) dir = -g;

    double fn = f;
    Eigen::VectorXd xn = x, gn = g;
    bool accepted = false;
    for (int pass = 0; pass < 2 && !accepted; ++pass) {
      double step = 1.0;
      for (int halve = 0; halve < 40; ++halve) {
        Eigen::VectorXd xt = project(x + step * dir);
        double lin = g.dot(xt - x);
        if (lin < 0.0) {
          Eigen::VectorXd gt(x.size());
          double ft = fg(xt, gt);
          if (ft <= f + 1e-4 * lin) {
            xn = xt;
            fn = ft;
            gn = gt;
            accepted = true;
            break;
          }
        }
        step *= 0.5;
      }
      if (!accepted) dir = -g;  // retry once along steepest descent
    }
    if (!accepted) break;

    Eigen::VectorXd s = xn - x, y = gn - g;
    if (s.dot(y) > 1e-10 * s.norm() * y.norm()) {
      mem.emplace_back(std::move(s), std::move(y));
      if (mem.size() > 10) mem.pop_front();
    }
    x = xn;
    f = fn;
    g = gn;
  }
  return f;
}

inline LambdaParams apply_coords(const LambdaParams& base, const ParamMask& m,
                                 const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& scale) {
  Vec6 v = base.to_vec();
  for (std::size_t k = 0; k < m.size(); ++k) v[m[k]] = x[k] * scale[k];
  return LambdaParams::from_vec(v);
}

}  // namespace detail

// Three-stage MLE inside the Lambda bound box. Stage 1 is Adam on the
// masked polar coordinates, stage 2 is Adam on the couplings (full
// parameterization only), stage 3 is projected L-BFGS on the couplings, or
// on the masked polar coordinates when a mask is active. All coordinates are
// nondimensionalized by kXi. The best full loss seen, including the
// initialization, decides the returned estimate; stages never worsen it.
inline LambdaParams mle(const Dataset& d, const NoiseModel& nm,
                        const LambdaParams& init, const EstimatorConfig& cfg,
                        RngStream& rng) {
  if (!(cfg.eta > 0.0) || !(cfg.plateau_rel > 0.0) || !(cfg.qn_tol > 0.0) ||
      cfg.batch == 0)
    throw ConfigError("estimator steps and tolerances must be positive");
  ParamMask mask = cfg.mask;
  if (mask.empty()) mask = {0, 1, 2, 3, 4, 5};
  validate_mask(mask);
  bool full = mask.size() == 6;

  double omega_max = cfg.omega_max;
  if (!(omega_max > 0.0)) {
    std::vector<double> ts;
    for (const auto& row : d.rows()) ts.push_back(row.q.t);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    double dt = 0.0;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
      double gap = ts[i + 1] - ts[i];
      if (gap > 0.0 && (dt == 0.0 || gap < dt)) dt = gap;
    }
    if (dt == 0.0)
      throw ConfigError("omega bound underivable from a single-time dataset");
    omega_max = kPi / dt;
  }
  LambdaBounds box = lambda_bounds(omega_max);

  detail::LossData data = detail::make_loss_data(d, nm);

  // Optimization box: phi widened by one radian on each side so minima
  // straddling +-pi stay reachable; the result is wrapped back at the end.
  Eigen::VectorXd scale(mask.size()), lo(mask.size()), hi(mask.size());
  for (std::size_t k = 0; k < mask.size(); ++k) {
    int c = mask[k];
    scale[k] = (c % 3 == 0) ? kXi : 1.0;
    double wide = (c % 3 == 2) ? 1.0 : 0.0;
    lo[k] = (box.lo[c] - wide) / scale[k];
    hi[k] = (box.hi[c] + wide) / scale[k];
  }

  // Wrap the periodic coordinates and clamp the rest into the box, so the
  // returned estimate respects the bounds no matter where the caller's
  // initialization came from.
  Vec6 vi = init.to_vec();
  vi[2] = wrap_phi(vi[2]);
  vi[5] = wrap_phi(vi[5]);
  for (int c = 0; c < 6; ++c) vi[c] = std::clamp(vi[c], box.lo[c], box.hi[c]);
  LambdaParams start0 = LambdaParams::from_vec(vi);

  LambdaParams best = start0;
  double best_loss = detail::nll(start0, nm, data);

  // Only in-box candidates may become the returned estimate; the coupling
  // box does not imply the omega bound, so it is rechecked here.
  auto consider = [&](const LambdaParams& l) {
    double loss = detail::nll(l, nm, data);
    if (l.omega0 <= omega_max && l.omega1 <= omega_max && loss < best_loss) {
      best_loss = loss;
      best = l;
    }
    return loss;
  };

  // One entry per shot; only materialized when a stochastic stage runs.
  std::vector<detail::ShotRef> refs;
  if (cfg.stage1 || (cfg.stage2 && full)) refs = detail::shot_refs(data);
  auto adam_stage = [&](bool j_coords, LambdaParams start) -> LambdaParams {
    // Coordinates: masked Lambda over kXi, or the six couplings over kXi.
    Eigen::VectorXd x;
    if (j_coords) {
      x = lambda_to_j(start).to_vec() / kXi;
    } else {
      Vec6 v = start.to_vec();
      x.resize(mask.size());
      for (std::size_t k = 0; k < mask.size(); ++k)
        x[k] = v[mask[k]] / scale[k];
    }
    Eigen::VectorXd m = Eigen::VectorXd::Zero(x.size());
    Eigen::VectorXd v2 = Eigen::VectorXd::Zero(x.size());
    auto point = [&](const Eigen::VectorXd& z) {
      if (j_coords) return j_to_lambda(JParams::from_vec(z * kXi));
      return detail::apply_coords(start, mask, z, scale);
    };
    LambdaParams stage_best = start;
    double stage_prev = detail::nll(start, nm, data);
    double stage_best_loss = stage_prev;
    double t_adam = 0.0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      rng.shuffle(refs);
      for (std::size_t at = 0; at < refs.size(); at += cfg.batch) {
        std::size_t end = std::min(refs.size(), at + cfg.batch);
        LambdaParams cur = point(x);
        Vec6 g6 = detail::batch_grad(cur, nm, data, refs, at, end);
        Eigen::VectorXd g(x.size());
        if (j_coords) {
          Vec6 gj;
          try {
            gj = jacobian_lambda_j(lambda_to_j(cur)) * g6;
          } catch (const SingularityError&) {
            return stage_best;  // map undefined here; keep the best epoch
          }
          g = gj * kXi;
        } else {
          for (std::size_t k = 0; k < mask.size(); ++k)
            g[k] = g6[mask[k]] * scale[k];
        }
        t_adam += 1.0;
        m = 0.9 * m + 0.1 * g;
        v2 = 0.999 * v2 + 0.001 * g.cwiseAbs2();
        double bc1 = 1.0 - std::pow(0.9, t_adam);
        double bc2 = 1.0 - std::pow(0.999, t_adam);
        Eigen::VectorXd step =
            (m / bc1).cwiseQuotient(((v2 / bc2).cwiseSqrt().array() + 1e-8)
                                        .matrix());
        x -= cfg.eta * step;
        if (!j_coords) x = x.cwiseMax(lo).cwiseMin(hi);
        else x = x.cwiseMax(-omega_max / kXi).cwiseMin(omega_max / kXi);
      }
      LambdaParams cur = point(x);
      double loss = consider(cur);
      if (loss < stage_best_loss) {
        stage_best_loss = loss;
        stage_best = cur;
      }
      if (stage_prev - loss < cfg.plateau_rel * std::abs(stage_prev)) break;
      stage_prev = loss;
    }
    return stage_best;
  };

  LambdaParams cur = start0;
  if (cfg.stage1) cur = adam_stage(false, cur);
  if (cfg.stage2 && full) {
    try {
      jacobian_lambda_j(lambda_to_j(cur));
      cur = adam_stage(true, cur);
    } catch (const SingularityError&) {
      // coupling coordinates undefined at this point; stage skipped
    }
  }

  // Stage 3: quasi-Newton refinement.
  if (full) {
    JParams j0 = lambda_to_j(cur);
    try {
      jacobian_lambda_j(j0);
      Eigen::VectorXd x = j0.to_vec() / kXi;
      Eigen::VectorXd jlo = Eigen::VectorXd::Constant(6, -omega_max / kXi);
      Eigen::VectorXd jhi = Eigen::VectorXd::Constant(6, omega_max / kXi);
      auto fg = [&](const Eigen::VectorXd& z, Eigen::VectorXd& g) {
        JParams j = JParams::from_vec(z * kXi);
        Vec6 g6;
        double f = detail::nll(j_to_lambda(j), nm, data, &g6);
        g = jacobian_lambda_j(j) * g6 * kXi;
        return f;
      };
      detail::lbfgs_box(fg, x, jlo, jhi, cfg.qn_tol, cfg.qn_max_iters);
      consider(j_to_lambda(JParams::from_vec(x * kXi)));
    } catch (const SingularityError&) {
      // refinement wandered onto the coordinate singularity; keep best
    }
  } else {
    Vec6 v = cur.to_vec();
    Eigen::VectorXd x(mask.size());
    for (std::size_t k = 0; k < mask.size(); ++k) x[k] = v[mask[k]] / scale[k];
    auto fg = [&](const Eigen::VectorXd& z, Eigen::VectorXd& g) {
      LambdaParams l = detail::apply_coords(cur, mask, z, scale);
      Vec6 g6;
      double f = detail::nll(l, nm, data, &g6);
      g.resize(mask.size());
      for (std::size_t k = 0; k < mask.size(); ++k)
        g[k] = g6[mask[k]] * scale[k];
      return f;
    };
    detail::lbfgs_box(fg, x, lo, hi, cfg.qn_tol, cfg.qn_max_iters);
    consider(detail::apply_coords(cur, mask, x, scale));
  }

  best.phi0 = wrap_phi(best.phi0);
  best.phi1 = wrap_phi(best.phi1);
  return best;
}

// --------------------------------------------------------------- baseline --

// The FFT-and-regression reference method: frequencies from the spectral
// scan, angles from the closed-form coefficient map. No joint descent and no
// likelihood stages; this is the estimator the learners are compared against.
inline LambdaParams baseline_estimate(const Dataset& d,
                                      const ReadoutModel& readout,
                                      const std::vector<double>& grid) {
  RabiCurveSet curves = rabi_from_data(d, readout);
  FrequencyEstimate freq = estimate_frequencies(curves, grid);
  LambdaParams out;
  for (int block = 0; block < 2; ++block) {
    auto bc = detail::block_curves(curves, block);
    if (bc.empty())
      throw MissingDataError("no curves for preparation block " +
                             std::to_string(block));
    double omega = block == 0 ? freq.omega0 : freq.omega1;
    double delta = 0.0, phi = 0.0;
    bool fallback = false;
    detail::block_closed_form(bc, omega, delta, phi, fallback);
    if (block == 0) {
      out.omega0 = omega;
      out.delta0 = delta;
      out.phi0 = phi;
    } else {
      out.omega1 = omega;
      out.delta1 = delta;
      out.phi1 = phi;
    }
  }
  return out;
}

// --------------------------------------------------------------- bootstrap --

struct BootstrapResult {
  std::vector<double> omega0, omega1;  // per-realization estimates
  double log_mean0 = 0.0, log_sd0 = 0.0;
  double log_mean1 = 0.0, log_sd1 = 0.0;
};

// Parametric bootstrap of the frequency estimates: binomial resampling of
// each query at its observed rate and shot count (signal data resamples the
// signal multiset), a log-normal fitted to the realizations.
inline BootstrapResult bootstrap_rabi(const Dataset& d,
                                      const ReadoutModel& readout,
                                      const std::vector<double>& grid,
                                      int n_rep, RngStream& rng) {
  if (n_rep < 2) throw DomainError("bootstrap needs n_rep >= 2");
  const GaussianSignal* gs = nullptr;
  if (d.kind() == ReadoutKind::GaussianSignal)
    gs = std::get_if<GaussianSignal>(&readout);
  double r0 = 0.0, r1 = 0.0;
  readout_rates(readout, r0, r1);

  RabiCurveSet base = rabi_from_data(d, readout);
  std::map<std::tuple<int, int, double>, const QueryShots*> by_query;
  for (const auto& row : d.rows())
    by_query[{static_cast<int>(row.q.m), static_cast<int>(row.q.u),
              row.q.t}] = &row;

  BootstrapResult out;
  for (int rep = 0; rep < n_rep; ++rep) {
    RabiCurveSet resampled;
    resampled.curves.reserve(base.curves.size());
    for (const auto& c : base.curves) {
      RabiCurve rc = c;
      for (std::size_t i = 0; i < c.t.size(); ++i) {
        std::uint64_t n = c.shots[i];
        if (gs) {
          const QueryShots* src = by_query.at(
              {static_cast<int>(c.m), static_cast<int>(c.u), c.t[i]});
          std::vector<std::complex<double>> draw(n);
          for (auto& s : draw)
            s = src->signals[rng.uniform_index(src->signals.size())];
          rc.p[i] = signal_rabi_mle(*gs, draw);
        } else {
          // the observed 0-frequency behind the corrected point
          double p0 = 0.5 * (1.0 + c.p[i]);
          double p_hat0 =
              std::clamp((1.0 - r0) * p0 + r1 * (1.0 - p0), 0.0, 1.0);
          std::uint64_t k = rng.binomial(n, p_hat0);
          rc.p[i] = rabi_readout_correction(
              static_cast<double>(k) / static_cast<double>(n), r0, r1);
        }
      }
      resampled.curves.push_back(std::move(rc));
    }
    FrequencyEstimate f = estimate_frequencies(resampled, grid);
    out.omega0.push_back(f.omega0);
    out.omega1.push_back(f.omega1);
  }

  auto fit = [](const std::vector<double>& v, double& mu, double& sd) {
    double s = 0.0;
    for (double x : v) s += std::log(x);
    mu = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (std::log(x) - mu) * (std::log(x) - mu);
    sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  };
  fit(out.omega0, out.log_mean0, out.log_sd0);
  fit(out.omega1, out.log_mean1, out.log_sd1);
  return out;
}

}  // namespace crlearn
