#pragma once

// Noise sources layered on the noiseless model: readout misclassification,
// pulse-shape time dilation, and decoherence-induced depolarization.
//
// Composite likelihood of observing bit 0:
//   p~(0|q) = (1 - p_d(t)) [(1-r0) p0 + r1 (1-p0)] + p_d(t)/2 (1 - r0 + r1)
// where p0 is the noiseless likelihood at the effective time t + dt_eff and
// p_d the depolarization probability at the raw query time. Conventions:
// r0 = p(read 1 | true 0), r1 = p(read 0 | true 1).

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <variant>

#include "crlearn/errors.hpp"
#include "crlearn/model.hpp"

namespace crlearn {

// ---------------------------------------------------------------- readout --

struct BitFlip {
  double r0 = 0.0;
  double r1 = 0.0;
};

struct GaussianSignal {
  std::complex<double> mean0{1.0, 0.0};
  std::complex<double> mean1{-1.0, 0.0};
  Eigen::Matrix2d cov0 = Eigen::Matrix2d::Identity();
  Eigen::Matrix2d cov1 = Eigen::Matrix2d::Identity();
};

using ReadoutModel = std::variant<BitFlip, GaussianSignal>;

// Standard normal CDF and its inverse (bisection plus Newton polish).
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p in (0,1)");
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 60; ++i) {
    double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  double x = 0.5 * (lo + hi);
  for (int i = 0; i < 3; ++i) {
    double f = normal_cdf(x) - p;
    double d = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
    if (d > 0) x -= f / d;
  }
  return x;
}

// Signal-plane readout with class means at +-1 whose zero-threshold
// discrimination reproduces the requested flip rates exactly.
inline GaussianSignal gaussian_signal_for_error(double r0, double r1) {
  if (r0 < 0 || r1 < 0 || r0 + r1 >= 1.0)
    throw DomainError("gaussian_signal_for_error: need r0,r1 >= 0, r0+r1 < 1");
  auto sigma_for = [](double r) {
    double z = normal_quantile(std::max(r, 1e-15));
    return -1.0 / z;  // P(N(1, s^2) < 0) = r
  };
  GaussianSignal g;
  double s0 = sigma_for(r0), s1 = sigma_for(r1);
  g.cov0 = s0 * s0 * Eigen::Matrix2d::Identity();
  g.cov1 = s1 * s1 * Eigen::Matrix2d::Identity();
  return g;
}

inline double signal_density(const GaussianSignal& g, std::complex<double> c,
                             int y) {
  const auto& mean = (y == 0) ? g.mean0 : g.mean1;
  const auto& cov = (y == 0) ? g.cov0 : g.cov1;
  Eigen::Vector2d d(c.real() - mean.real(), c.imag() - mean.imag());
  double det = cov.determinant();
  if (!(det > 0)) throw DomainError("signal covariance must be SPD");
  double quad = d.dot(cov.inverse() * d);
  return std::exp(-0.5 * quad) / (2.0 * kPi * std::sqrt(det));
}

inline double signal_density(const ReadoutModel& r, std::complex<double> c,
                             int y) {
  const auto* g = std::get_if<GaussianSignal>(&r);
  if (!g) throw ModelKindError("signal_density requires GaussianSignal readout");
  return signal_density(*g, c, y);
}

// Exact inverse of the bit-flip channel on a Rabi value, deliberately
// unclamped: extreme observed frequencies land outside [-1, 1].
inline double rabi_readout_correction(double p_hat0, double r0, double r1) {
  if (r0 + r1 >= 1.0) throw DomainError("readout correction: r0 + r1 >= 1");
  double p_hat1 = 1.0 - p_hat0;
  return (p_hat0 * (1.0 + r0 - r1) - p_hat1 * (1.0 - r0 + r1)) /
         (1.0 - r0 - r1);
}

// ------------------------------------------------------------------ pulse --

struct PulseShapeModel {
  double a = 0.0;  // dimensionless
  double b = 0.0;  // seconds
};

inline double delta_t_eff(const PulseShapeModel& p, double omega) {
  if (!(omega > 0)) throw DomainError("delta_t_eff: omega must be > 0");
  return p.a / (omega + p.b * omega * omega);
}

// ------------------------------------------------------------ decoherence --

struct DecoherenceNone {};

struct DecoherenceSingleParam {
  double mu;        // seconds
  double t0 = 0.0;  // seconds
};

struct DecoherenceTwoParam {
  double mu_u0;
  double mu_u1;
  double t0 = 0.0;
};

struct DecoherenceTwoQubit {
  double t1_ctrl;
  double t2_ctrl;
  double t1_tgt;
  double t2_tgt;
};

using DecoherenceModel = std::variant<DecoherenceNone, DecoherenceSingleParam,
                                      DecoherenceTwoParam, DecoherenceTwoQubit>;

// Survival probability 1 - p_d of the composed per-qubit amplitude and phase
// damping channels, as the normalized unitarity of the product channel:
// with A_k = exp(-t/(2 T1_k)), P_k = exp(-t (1/T2_k - 1/(2 T1_k))),
// s_k = 1 + 2 (A_k P_k) + A_k^2 and affine shift t_k = 1 - A_k,
//   1 - p_d = [s1 s2 - 1 + (s1 - 1) t2^2 + (s2 - 1) t1^2] / 15.
inline double two_qubit_survival(const DecoherenceTwoQubit& d, double t) {
  auto one = [&](double T1, double T2, double& s, double& shift) {
    double A = std::exp(-t / (2.0 * T1));
    double P = std::exp(-t * (1.0 / T2 - 1.0 / (2.0 * T1)));
    s = 1.0 + 2.0 * A * P + A * A;
    shift = 1.0 - A;
  };
  double s1, t1, s2, t2;
  one(d.t1_ctrl, d.t2_ctrl, s1, t1);
  one(d.t1_tgt, d.t2_tgt, s2, t2);
  return (s1 * s2 - 1.0 + (s1 - 1.0) * t2 * t2 + (s2 - 1.0) * t1 * t1) / 15.0;
}

inline double depolarization_prob(const DecoherenceModel& d, double t,
                                  Prep u = Prep::U0) {
  if (!(t >= 0) || !std::isfinite(t))
    throw DomainError("depolarization_prob: t must be finite and >= 0");
  struct V {
    double t;
    Prep u;
    double operator()(const DecoherenceNone&) const { return 0.0; }
    double operator()(const DecoherenceSingleParam& m) const {
      return t <= m.t0 ? 0.0 : 1.0 - std::exp(-(t - m.t0) / m.mu);
    }
    double operator()(const DecoherenceTwoParam& m) const {
      double mu = (u == Prep::U0) ? m.mu_u0 : m.mu_u1;
      return t <= m.t0 ? 0.0 : 1.0 - std::exp(-(t - m.t0) / mu);
    }
    double operator()(const DecoherenceTwoQubit& m) const {
      return 1.0 - two_qubit_survival(m, t);
    }
  };
  return std::visit(V{t, u}, d);
}

// -------------------------------------------------------------- composite --

struct NoiseModel {
  ReadoutModel readout = BitFlip{};
  PulseShapeModel pulse{};
  DecoherenceModel decoherence = DecoherenceNone{};
};

inline NoiseModel noise_none() { return NoiseModel{}; }

inline void validate(const NoiseModel& n) {
  if (const auto* b = std::get_if<BitFlip>(&n.readout)) {
    if (b->r0 < 0 || b->r1 < 0 || b->r0 + b->r1 >= 1.0)
      throw ConfigError("readout: need r0, r1 >= 0 and r0 + r1 < 1");
  } else {
    const auto& g = std::get<GaussianSignal>(n.readout);
    if (!(g.cov0.determinant() > 0) || !(g.cov1.determinant() > 0) ||
        g.cov0(0, 0) <= 0 || g.cov1(0, 0) <= 0)
      throw ConfigError("readout: signal covariances must be SPD");
  }
  if (n.pulse.a < 0 || n.pulse.b < 0)
    throw ConfigError("pulse: a and b must be >= 0");
  struct V {
    void operator()(const DecoherenceNone&) const {}
    void operator()(const DecoherenceSingleParam& m) const {
      if (!(m.mu > 0)) throw ConfigError("decoherence: mu must be > 0");
    }
    void operator()(const DecoherenceTwoParam& m) const {
      if (!(m.mu_u0 > 0) || !(m.mu_u1 > 0))
        throw ConfigError("decoherence: mu_u0, mu_u1 must be > 0");
    }
    void operator()(const DecoherenceTwoQubit& m) const {
      auto pair_ok = [](double T1, double T2) {
        return T1 > 0 && T2 > 0 && T2 <= 2.0 * T1 + 1e-15;
      };
      if (!pair_ok(m.t1_ctrl, m.t2_ctrl) || !pair_ok(m.t1_tgt, m.t2_tgt))
        throw ConfigError("decoherence: need T1, T2 > 0 and T2 <= 2 T1");
    }
  };
  std::visit(V{}, n.decoherence);
}

// Evolution time actually experienced by the block selected by the prep.
// Degenerate omega = 0 blocks take no pulse shift.
inline double effective_time(const LambdaParams& l, const PulseShapeModel& p,
                             const Query& q) {
  if (p.a == 0.0) return q.t;
  double w = l.omega(block_index(q.u));
  return (w > 0.0) ? q.t + delta_t_eff(p, w) : q.t;
}

inline void readout_rates(const ReadoutModel& r, double& r0, double& r1) {
  if (const auto* b = std::get_if<BitFlip>(&r)) {
    r0 = b->r0;
    r1 = b->r1;
  } else {
    r0 = 0.0;  // signal readout happens after the quantum channel
    r1 = 0.0;
  }
}

// p(y = 0) after decoherence and pulse shift but before readout.
inline double pre_readout_likelihood(const LambdaParams& l,
                                     const NoiseModel& n, const Query& q) {
  double p0 = likelihood_noiseless(l, {q.m, q.u, effective_time(l, n.pulse, q)});
  double pd = depolarization_prob(n.decoherence, q.t, q.u);
  return (1.0 - pd) * p0 + 0.5 * pd;
}

// p~(observed 0). For GaussianSignal readout there is no bit-flip stage and
// this equals the pre-readout likelihood.
inline double noisy_likelihood(const LambdaParams& l, const NoiseModel& n,
                               const Query& q) {
  double r0, r1;
  readout_rates(n.readout, r0, r1);
  double p0 = likelihood_noiseless(l, {q.m, q.u, effective_time(l, n.pulse, q)});
  double pd = depolarization_prob(n.decoherence, q.t, q.u);
  return (1.0 - pd) * ((1.0 - r0) * p0 + r1 * (1.0 - p0)) +
         0.5 * pd * (1.0 - r0 + r1);
}

// p~ together with its gradient in Lambda coordinates. The score lives in the
// block selected by the prep; the omega derivative is chained through the
// pulse shift: u = omega t + a/(1 + b omega).
struct LikelihoodEval {
  double p;   // p~(0)
  Vec6 grad;  // d p~ / d Lambda
};

inline LikelihoodEval noisy_likelihood_grad(const LambdaParams& l,
                                            const NoiseModel& n,
                                            const Query& q) {
  double r0, r1;
  readout_rates(n.readout, r0, r1);
  int b = block_index(q.u);
  double w = l.omega(b), delta = l.delta(b), phi = l.phi(b);

  double u, du_domega;
  if (n.pulse.a > 0.0 && w > 0.0) {
    double denom = 1.0 + n.pulse.b * w;
    u = w * q.t + n.pulse.a / denom;
    du_domega = q.t - n.pulse.a * n.pulse.b / (denom * denom);
  } else {
    u = w * q.t;
    du_domega = q.t;
  }
  RabiEval e = rabi_eval(q.m, delta, phi, u);
  double pd = depolarization_prob(n.decoherence, q.t, q.u);
  double p0 = 0.5 * (1.0 + e.r);

  LikelihoodEval out;
  out.p = (1.0 - pd) * ((1.0 - r0) * p0 + r1 * (1.0 - p0)) +
          0.5 * pd * (1.0 - r0 + r1);
  double pref = 0.5 * (1.0 - pd) * (1.0 - r0 - r1);
  out.grad = Vec6::Zero();
  out.grad[3 * b + 0] = pref * e.du * du_domega;
  out.grad[3 * b + 1] = pref * e.ddelta;
  out.grad[3 * b + 2] = pref * e.dphi;
  return out;
}

}  // namespace crlearn
