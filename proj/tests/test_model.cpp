#include <catch2/catch_amalgamated.hpp>

#include "crlearn/model.hpp"
#include "crlearn/rng.hpp"
#include "support/reference.hpp"
#include "support/testutil.hpp"

using namespace crlearn;

TEST_CASE("coordinate map: pinned drive configuration", "[model]") {
  // Measured drive configuration; block frequencies known to 1%.
  JParams j{-4.57e6, -1.47e6, -0.29e6, 6.50e6, 1.39e6, 0.41e6};
  LambdaParams l = j_to_lambda(j);
  CHECK(l.omega0 == Catch::Approx(1.94e6).epsilon(0.01));
  CHECK(l.omega1 == Catch::Approx(11.45e6).epsilon(0.01));

  // Inverse map reproduces the J vector.
  JParams back = lambda_to_j(l);
  for (int i = 0; i < 6; ++i)
    CHECK(back.to_vec()[i] == Catch::Approx(j.to_vec()[i]).epsilon(1e-6));
}

TEST_CASE("coordinate map: reduced single-coupling model", "[model]") {
  double jzx = 3.0e6;
  JParams j{0, 0, 0, jzx, 0, 0};
  LambdaParams l = j_to_lambda(j);
  CHECK(l.omega0 == Catch::Approx(jzx));
  CHECK(l.delta0 == Catch::Approx(0.0).margin(1e-14));
  CHECK(l.phi0 == Catch::Approx(0.0).margin(1e-14));
  CHECK(l.omega1 == Catch::Approx(jzx));
  CHECK(l.delta1 == Catch::Approx(0.0).margin(1e-14));
  CHECK(std::abs(l.phi1) == Catch::Approx(kPi));

  LambdaParams lp{jzx, 0, 0, jzx, 0, kPi};
  JParams back = lambda_to_j(lp);
  CHECK(back.zx == Catch::Approx(jzx));
  CHECK(std::abs(back.ix) < 1e-9 * jzx);
  CHECK(std::abs(back.iy) < 1e-9 * jzx);
  CHECK(std::abs(back.iz) < 1e-9 * jzx);
  CHECK(std::abs(back.zy) < 1e-9 * jzx);
  CHECK(std::abs(back.zz) < 1e-9 * jzx);
}

TEST_CASE("coordinate map: symmetric blocks give pure IX", "[model]") {
  double w = 2.0e6;
  LambdaParams l{w, 0, 0, w, 0, 0};
  JParams j = lambda_to_j(l);
  CHECK(j.ix == Catch::Approx(w));
  CHECK(std::abs(j.zx) < 1e-9 * w);
  CHECK(std::abs(j.iy) + std::abs(j.iz) + std::abs(j.zy) + std::abs(j.zz) <
        1e-9 * w);
}

TEST_CASE("coordinate map: random round trips", "[model]") {
  RngStream rng(101, 0);
  for (int rep = 0; rep < 200; ++rep) {
    JParams j = tu::random_j(rng);
    JParams back = lambda_to_j(j_to_lambda(j));
    double scale = j.to_vec().cwiseAbs().maxCoeff();
    for (int i = 0; i < 6; ++i)
      CHECK(std::abs(back.to_vec()[i] - j.to_vec()[i]) <= 1e-9 * scale);

    LambdaParams l = tu::random_lambda(rng);
    // Keep away from the branch cuts so the polar angles are unique.
    l.delta0 *= 0.95;
    l.delta1 *= 0.95;
    l.phi0 *= 0.99;
    l.phi1 *= 0.99;
    LambdaParams l2 = j_to_lambda(lambda_to_j(l));
    CHECK(l2.omega0 == Catch::Approx(l.omega0).epsilon(1e-9));
    CHECK(l2.omega1 == Catch::Approx(l.omega1).epsilon(1e-9));
    CHECK(l2.delta0 == Catch::Approx(l.delta0).margin(1e-9));
    CHECK(l2.delta1 == Catch::Approx(l.delta1).margin(1e-9));
    CHECK(l2.phi0 == Catch::Approx(l.phi0).margin(1e-9));
    CHECK(l2.phi1 == Catch::Approx(l.phi1).margin(1e-9));
  }
}

TEST_CASE("coordinate map: degenerate zero Hamiltonian", "[model]") {
  LambdaParams l = j_to_lambda(JParams{});
  for (int i = 0; i < 6; ++i) CHECK(l.to_vec()[i] == 0.0);
}

TEST_CASE("unitary: identity at t = 0 and unitarity", "[model]") {
  RngStream rng(102, 0);
  LambdaParams l = tu::random_lambda(rng);
  CHECK((unitary(l, 0.0) - Mat4c::Identity()).norm() < 1e-14);

  for (int rep = 0; rep < 100; ++rep) {
    LambdaParams lr = tu::random_lambda(rng);
    double t = 1e-7 + 5e-7 * rng.uniform();
    Mat4c u = unitary(lr, t);
    CHECK((u.adjoint() * u - Mat4c::Identity()).norm() < 1e-12);
  }
}

TEST_CASE("unitary: matches matrix-exponential oracle", "[model]") {
  RngStream rng(103, 0);
  for (int rep = 0; rep < 300; ++rep) {
    JParams j = tu::random_j(rng);
    double t = 1e-8 + 6e-7 * rng.uniform();
    Mat4c u = unitary(j_to_lambda(j), t);
    Mat4c u_ref = ref::expm_unitary(ref::hamiltonian(j), t);
    CHECK((u - u_ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("likelihood: trivial anchor points", "[model]") {
  RngStream rng(104, 0);
  LambdaParams l = tu::random_lambda(rng);
  CHECK(likelihood_noiseless(l, {Meas::Z, Prep::U0, 0.0}) ==
        Catch::Approx(1.0));
  CHECK(likelihood_noiseless(l, {Meas::Z, Prep::U1, 0.0}) ==
        Catch::Approx(1.0));

  // Node of 1 - cos^2(delta) sin^2(omega t) at delta = 0, omega t = pi/2.
  LambdaParams node{2e6, 0, 0.7, 3e6, 0, -0.4};
  double t0 = (kPi / 2) / node.omega0;
  CHECK(likelihood_noiseless(node, {Meas::Z, Prep::U0, t0}) ==
        Catch::Approx(0.0).margin(1e-12));
  double t1 = (kPi / 2) / node.omega1;
  CHECK(likelihood_noiseless(node, {Meas::Z, Prep::U1, t1}) ==
        Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("likelihood: matches Born-rule brute force", "[model]") {
  RngStream rng(105, 0);
  for (int rep = 0; rep < 500; ++rep) {
    JParams j = tu::random_j(rng);
    Query q = tu::random_query(rng, 1e-8, 6e-7);
    double p = likelihood_noiseless(j_to_lambda(j), q);
    double p_ref = ref::born_p0(j, q);
    CHECK(std::abs(p - p_ref) < 1e-10);
    CHECK(std::abs((1.0 - p) - ref::born_p(j, q, 1)) < 1e-10);
  }
}

TEST_CASE("rabi: identity with the likelihood and reduced-model zero",
          "[model]") {
  RngStream rng(106, 0);
  for (int rep = 0; rep < 200; ++rep) {
    LambdaParams l = tu::random_lambda(rng);
    Query q = tu::random_query(rng);
    double r = rabi_model(l, q.m, q.u, q.t);
    CHECK(std::abs(r - (2.0 * likelihood_noiseless(l, q) - 1.0)) < 1e-12);
  }

  // delta = phi = 0 block: the X-basis signal vanishes for all t.
  LambdaParams reduced{2.5e6, 0, 0, 2.5e6, 0, kPi};
  for (int k = 1; k <= 40; ++k) {
    double t = k * 1.5e-8;
    CHECK(std::abs(rabi_model(reduced, Meas::X, Prep::U0, t)) < 1e-13);
    CHECK(rabi_model(reduced, Meas::Z, Prep::U0, t) ==
          Catch::Approx(std::cos(2 * reduced.omega0 * t)).margin(1e-12));
  }

  // t = 0: Z-basis Rabi value is 1 regardless of parameters.
  LambdaParams l0 = tu::random_lambda(rng);
  CHECK(rabi_model(l0, Meas::Z, Prep::U0, 0.0) == Catch::Approx(1.0));
}

TEST_CASE("rabi: analytic partials match finite differences", "[model]") {
  RngStream rng(107, 0);
  for (int rep = 0; rep < 200; ++rep) {
    double delta = (kPi / 2) * (2 * rng.uniform() - 1) * 0.98;
    double phi = kPi * (2 * rng.uniform() - 1) * 0.98;
    double u = 6.0 * rng.uniform();
    Meas m = static_cast<Meas>(rng.uniform_index(3));

    RabiEval e = rabi_eval(m, delta, phi, u);
    Eigen::VectorXd x(3);
    x << u, delta, phi;
    auto f = [&](const Eigen::VectorXd& v) {
      return rabi_eval(m, v[1], v[2], v[0]).r;
    };
    Eigen::VectorXd g = ref::fd_grad(f, x, 1e-6);
    CHECK(e.du == Catch::Approx(g[0]).margin(1e-6));
    CHECK(e.ddelta == Catch::Approx(g[1]).margin(1e-6));
    CHECK(e.dphi == Catch::Approx(g[2]).margin(1e-6));
  }
}

TEST_CASE("angle wrap and bounds box", "[model]") {
  CHECK(std::abs(wrap_phi(3 * kPi)) == Catch::Approx(kPi).margin(1e-12));
  CHECK(wrap_phi(-3 * kPi + 0.1) == Catch::Approx(-kPi + 0.1).margin(1e-12));
  CHECK(wrap_phi(0.3) == Catch::Approx(0.3));

  LambdaBounds b = lambda_bounds(1e8);
  CHECK(b.lo[0] == 0.0);
  CHECK(b.hi[0] == 1e8);
  CHECK(b.lo[2] == Catch::Approx(-kPi));
  CHECK(b.hi[4] == Catch::Approx(kPi / 2));

  CHECK_THROWS_AS(validate(LambdaParams{-1.0, 0, 0, 1e6, 0, 0}), DomainError);
  CHECK_THROWS_AS(validate(LambdaParams{1e6, 2.0, 0, 1e6, 0, 0}), DomainError);
  CHECK_NOTHROW(validate(LambdaParams{1e6, 0.3, -2.0, 2e6, -0.2, 3.0}));
}

TEST_CASE("rng: determinism and substream independence", "[rng]") {
  RngStream a(42, 7), b(42, 7), c(42, 8);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    auto x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    all_equal = all_equal && (x == y);
    any_diff = any_diff || (x != z);
  }
  CHECK(all_equal);
  CHECK(any_diff);

  RngStream parent(42, 7);
  RngStream s1 = parent.substream(3), s2 = parent.substream(3);
  CHECK(s1.next_u64() == s2.next_u64());

  // Normal moments sanity.
  RngStream n(9, 1);
  double sum = 0;
  double sq = 0;
  const int nn = 20000;
  for (int i = 0; i < nn; ++i) {
    double v = n.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / nn) < 0.03);
  CHECK(sq / nn == Catch::Approx(1.0).epsilon(0.05));
}
