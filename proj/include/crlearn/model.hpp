#pragma once

// Two-qubit cross-resonance Hamiltonian model.
//
// H = sum_{a in {X,Y,Z}} (J_Ia I(x)sigma_a + J_Za sigmaZ(x)sigma_a), acting on
// (control, target) with basis index 2c + t. H is block diagonal in the
// control state; block j in {0, 1} has
//   a_j    = J_IZ + (-1)^j J_ZZ
//   beta_j = (J_IX + (-1)^j J_ZX) + i (J_IY + (-1)^j J_ZY)
// and the polar parameterization
//   omega_j = sqrt(a_j^2 + |beta_j|^2)   (rad/s)
//   delta_j = asin(a_j / omega_j)        in [-pi/2, pi/2]
//   phi_j   = arg(beta_j)                in [-pi, pi]
// with the degenerate convention delta = phi = 0 when omega = 0.
//
// A query is (measurement basis, control preparation, evolution time); the
// measured bit is the target qubit, the control is summed out.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>

#include "crlearn/errors.hpp"

namespace crlearn {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat4c = Eigen::Matrix4cd;
using Mat2c = Eigen::Matrix2cd;

inline constexpr double kPi = std::numbers::pi;

enum class Meas { X = 0, Y = 1, Z = 2 };
enum class Prep { U0 = 0, U1 = 1 };

inline int block_index(Prep u) { return static_cast<int>(u); }

inline char meas_char(Meas m) { return m == Meas::X ? 'X' : (m == Meas::Y ? 'Y' : 'Z'); }

struct Query {
  Meas m;
  Prep u;
  double t;  // seconds, > 0
};

// Ledger value for an unconstrained shot budget.
inline constexpr std::uint64_t kUnlimitedShots =
    std::numeric_limits<std::uint64_t>::max();

// Wrap an angle into [-pi, pi].
inline double wrap_phi(double phi) {
  double w = std::remainder(phi, 2.0 * kPi);
  if (w < -kPi) w += 2.0 * kPi;
  return w;
}

// Pauli coefficients, fixed component order (IX, IY, IZ, ZX, ZY, ZZ).
struct JParams {
  double ix = 0, iy = 0, iz = 0, zx = 0, zy = 0, zz = 0;

  Vec6 to_vec() const {
    Vec6 v;
    v << ix, iy, iz, zx, zy, zz;
    return v;
  }
  static JParams from_vec(const Vec6& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }
};

struct BlockCoeffs {
  double a;
  std::complex<double> beta;
};

inline BlockCoeffs block_coeffs(const JParams& j, int block) {
  double sign = (block == 0) ? 1.0 : -1.0;
  return {j.iz + sign * j.zz,
          {j.ix + sign * j.zx, j.iy + sign * j.zy}};
}

// Polar block parameters, fixed component order
// (omega0, delta0, phi0, omega1, delta1, phi1).
struct LambdaParams {
  double omega0 = 0, delta0 = 0, phi0 = 0;
  double omega1 = 0, delta1 = 0, phi1 = 0;

  Vec6 to_vec() const {
    Vec6 v;
    v << omega0, delta0, phi0, omega1, delta1, phi1;
    return v;
  }
  static LambdaParams from_vec(const Vec6& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }

  double omega(int block) const { return block == 0 ? omega0 : omega1; }
  double delta(int block) const { return block == 0 ? delta0 : delta1; }
  double phi(int block) const { return block == 0 ? phi0 : phi1; }
};

inline LambdaParams j_to_lambda(const JParams& j) {
  LambdaParams l;
  for (int b = 0; b < 2; ++b) {
    BlockCoeffs c = block_coeffs(j, b);
    double mag = std::abs(c.beta);
    double omega = std::hypot(c.a, mag);
    double delta = 0.0, phi = 0.0;
    if (omega > 0.0) {
      double s = c.a / omega;
      s = std::clamp(s, -1.0, 1.0);
      delta = std::asin(s);
      phi = (mag > 0.0) ? std::arg(c.beta) : 0.0;
    }
    if (b == 0) {
      l.omega0 = omega;
      l.delta0 = delta;
      l.phi0 = phi;
    } else {
      l.omega1 = omega;
      l.delta1 = delta;
      l.phi1 = phi;
    }
  }
  return l;
}

inline JParams lambda_to_j(const LambdaParams& l) {
  double a[2];
  std::complex<double> beta[2];
  for (int b = 0; b < 2; ++b) {
    double w = l.omega(b), d = l.delta(b), p = l.phi(b);
    a[b] = w * std::sin(d);
    beta[b] = w * std::cos(d) * std::complex<double>(std::cos(p), std::sin(p));
  }
  JParams j;
  j.iz = 0.5 * (a[0] + a[1]);
  j.zz = 0.5 * (a[0] - a[1]);
  j.ix = 0.5 * (beta[0].real() + beta[1].real());
  j.zx = 0.5 * (beta[0].real() - beta[1].real());
  j.iy = 0.5 * (beta[0].imag() + beta[1].imag());
  j.zy = 0.5 * (beta[0].imag() - beta[1].imag());
  return j;
}

// Throws DomainError on out-of-range block parameters.
inline void validate(const LambdaParams& l) {
  for (int b = 0; b < 2; ++b) {
    if (!(l.omega(b) >= 0.0) || !std::isfinite(l.omega(b)))
      throw DomainError("lambda: omega must be finite and >= 0");
    if (!(std::abs(l.delta(b)) <= kPi / 2 + 1e-12))
      throw DomainError("lambda: delta outside [-pi/2, pi/2]");
    if (!(std::abs(l.phi(b)) <= kPi + 1e-12))
      throw DomainError("lambda: phi outside [-pi, pi]");
  }
}

// exp(-i H t), block diagonal; u = omega_j t per block.
inline Mat2c unitary_block(double omega, double delta, double phi, double t) {
  const std::complex<double> I(0, 1);
  double u = omega * t;
  double cu = std::cos(u), su = std::sin(u);
  double sd = std::sin(delta), cd = std::cos(delta);
  Mat2c U;
  U << cu - I * sd * su, -I * std::exp(-I * phi) * cd * su,
      -I * std::exp(I * phi) * cd * su, cu + I * sd * su;
  return U;
}

inline Mat4c unitary(const LambdaParams& l, double t) {
  Mat4c U = Mat4c::Zero();
  U.block<2, 2>(0, 0) = unitary_block(l.omega0, l.delta0, l.phi0, t);
  U.block<2, 2>(2, 2) = unitary_block(l.omega1, l.delta1, l.phi1, t);
  return U;
}

// Basis-change matrices applied before the Z readout of the target qubit.
inline Mat4c meas_matrix(Meas m) {
  const std::complex<double> I(0, 1);
  const double s = 1.0 / std::sqrt(2.0);
  Mat2c g;
  switch (m) {
    case Meas::X:
      g << s, s, -s, s;
      break;
    case Meas::Y:
      g << s, -I * s, -I * s, s;
      break;
    case Meas::Z:
      g = Mat2c::Identity();
      break;
  }
  Mat4c M = Mat4c::Zero();
  M.block<2, 2>(0, 0) = g;
  M.block<2, 2>(2, 2) = g;
  return M;
}

inline Mat4c prep_matrix(Prep u) {
  Mat4c P = Mat4c::Zero();
  if (u == Prep::U0) {
    P = Mat4c::Identity();
  } else {
    P.block<2, 2>(0, 2) = Mat2c::Identity();
    P.block<2, 2>(2, 0) = Mat2c::Identity();
  }
  return P;
}

// Rabi observable r = 2 p(y=0) - 1 of one block as a function of the phase
// u = omega * tau, with partial derivatives in (u, delta, phi).
struct RabiEval {
  double r;
  double du;
  double ddelta;
  double dphi;
};

inline RabiEval rabi_eval(Meas m, double delta, double phi, double u) {
  double sd = std::sin(delta), cd = std::cos(delta);
  double c2d = std::cos(2.0 * delta), s2d = std::sin(2.0 * delta);
  double cp = std::cos(phi), sp = std::sin(phi);
  double s2 = std::sin(2.0 * u), c2 = std::cos(2.0 * u);
  RabiEval e{};
  switch (m) {
    case Meas::X:
      e.r = sd * cd * cp * (1.0 - c2) + cd * sp * s2;
      e.du = 2.0 * cd * sp * c2 + 2.0 * sd * cd * cp * s2;
      e.ddelta = c2d * cp * (1.0 - c2) - sd * sp * s2;
      e.dphi = -sd * cd * sp * (1.0 - c2) + cd * cp * s2;
      break;
    case Meas::Y:
      e.r = sd * cd * sp * (1.0 - c2) - cd * cp * s2;
      e.du = -2.0 * cd * cp * c2 + 2.0 * sd * cd * sp * s2;
      e.ddelta = c2d * sp * (1.0 - c2) + sd * cp * s2;
      e.dphi = sd * cd * cp * (1.0 - c2) + cd * sp * s2;
      break;
    case Meas::Z:
      e.r = sd * sd + cd * cd * c2;
      e.du = -2.0 * cd * cd * s2;
      e.ddelta = s2d * (1.0 - c2);
      e.dphi = 0.0;
      break;
  }
  return e;
}

inline double rabi_model(const LambdaParams& l, Meas m, Prep u, double t) {
  int b = block_index(u);
  return rabi_eval(m, l.delta(b), l.phi(b), l.omega(b) * t).r;
}

// p(y = 0) for a noiseless query; closed form of the Born probability
// sum_z |<z y| M U(t) P |00>|^2.
inline double likelihood_noiseless(const LambdaParams& l, const Query& q) {
  if (!(q.t >= 0.0) || !std::isfinite(q.t))
    throw DomainError("query time must be finite and >= 0");
  return 0.5 * (1.0 + rabi_model(l, q.m, q.u, q.t));
}

struct LambdaBounds {
  Vec6 lo;
  Vec6 hi;
};

// Box for the polar parameters given the largest resolvable frequency
// pi / dt of a time grid with spacing dt.
inline LambdaBounds lambda_bounds(double omega_max) {
  LambdaBounds b;
  b.lo << 0, -kPi / 2, -kPi, 0, -kPi / 2, -kPi;
  b.hi << omega_max, kPi / 2, kPi, omega_max, kPi / 2, kPi;
  return b;
}

}  // namespace crlearn
