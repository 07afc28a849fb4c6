#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "crlearn/oracle.hpp"
#include "support/reference.hpp"
#include "support/testutil.hpp"

using namespace crlearn;

namespace {

std::vector<Query> full_query_space() {
  std::vector<Query> qs;
  for (Meas m : tu::all_meas())
    for (Prep u : tu::all_preps())
      for (int k = 0; k <= 80; ++k)
        qs.push_back({m, u, 1e-7 + 6.25e-9 * k});
  return qs;
}

LambdaParams drive_theta() {
  JParams j{-4.57e6, -1.47e6, -0.29e6, 6.50e6, 1.39e6, 0.41e6};
  return j_to_lambda(j);
}

NoiseModel drive_noise() {
  NoiseModel n;
  n.readout = BitFlip{0.0078, 0.033};
  n.pulse = PulseShapeModel{6.2774, 1.5086e-9};
  n.decoherence = DecoherenceTwoQubit{94.0e-6, 177.2e-6, 75.7e-6, 128.1e-6};
  return n;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST_CASE("simulated shots are deterministic for a fixed stream", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  Query q{Meas::X, Prep::U0, 3e-7};

  std::vector<int> first;
  {
    RngStream rng(99, 5);
    for (int i = 0; i < 200; ++i) first.push_back(simulate_shot(theta, n, q, rng).y);
  }
  std::vector<int> second;
  {
    RngStream rng(99, 5);
    for (int i = 0; i < 200; ++i) second.push_back(simulate_shot(theta, n, q, rng).y);
  }
  REQUIRE(first == second);

  RngStream other(99, 6);
  std::vector<int> shifted;
  for (int i = 0; i < 200; ++i) shifted.push_back(simulate_shot(theta, n, q, other).y);
  REQUIRE(first != shifted);
}

TEST_CASE("deterministic outcome when the likelihood saturates", "[oracle]") {
  // MZ response is sin^2(delta) + cos^2(delta) cos^2(omega t); delta = pi/2
  // pins it at 1 for every time.
  LambdaParams theta{1e6, std::acos(-1.0) / 2, 0.3, 2e6, std::acos(-1.0) / 2, -0.8};
  NoiseModel n = noise_none();
  RngStream rng(7, 0);
  for (int i = 0; i < 100; ++i) {
    Query q{Meas::Z, Prep::U0, 1e-7 + 3e-9 * i};
    REQUIRE(simulate_shot(theta, n, q, rng).y == 0);
  }
}

TEST_CASE("shot frequencies match the noisy likelihood", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  RngStream rng(2024, 0);
  const int shots = 100000;
  for (const Query& q : {Query{Meas::X, Prep::U0, 1.5e-7},
                         Query{Meas::Y, Prep::U1, 4e-7},
                         Query{Meas::Z, Prep::U1, 6e-7}}) {
    double p0 = noisy_likelihood(theta, n, q);
    int k0 = 0;
    for (int i = 0; i < shots; ++i) k0 += (simulate_shot(theta, n, q, rng).y == 0);
    double sigma = std::sqrt(p0 * (1 - p0) / shots);
    REQUIRE(std::abs(static_cast<double>(k0) / shots - p0) < 3 * sigma + 1e-12);
  }
}

TEST_CASE("signal shots reproduce class statistics", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  n.readout = gaussian_signal_for_error(0.0078, 0.033);
  Query q{Meas::Y, Prep::U0, 2.5e-7};

  RngStream rng(31, 2);
  const int shots = 200000;
  double sum_re = 0;
  for (int i = 0; i < shots; ++i) {
    ShotRecord rec = simulate_shot(theta, n, q, rng);
    REQUIRE(rec.has_signal);
    sum_re += rec.c.real();
  }
  double p0 = pre_readout_likelihood(theta, n, q);
  // E[Re c] = p0 * (+1) + (1 - p0) * (-1); variance per class is O(sigma^2+1).
  double expect = 2 * p0 - 1;
  REQUIRE(std::abs(sum_re / shots - expect) < 0.02);
}

TEST_CASE("generated dataset has the full ledger", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  auto qs = full_query_space();
  RngStream rng(11, 0);
  Dataset d = generate_dataset(theta, n, qs, 512, rng);

  REQUIRE(d.n_queries() == 486);
  REQUIRE(d.total() == 248832);
  for (const auto& row : d.rows()) REQUIRE(row.count() == 512);
  for (const Query& q : qs) REQUIRE(d.remaining(q) == 512);

  RngStream rng2(11, 1);
  REQUIRE_THROWS_AS(generate_dataset(theta, n, qs, 0, rng2), DomainError);
}

TEST_CASE("replay draws deplete the ledger and preserve the multiset",
          "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  std::vector<Query> qs{{Meas::X, Prep::U0, 2e-7}, {Meas::Z, Prep::U1, 5e-7}};
  RngStream gen_rng(4, 0);
  Dataset d = generate_dataset(theta, n, qs, 512, gen_rng);

  const Query& q = qs[0];
  std::uint64_t n0_before = d.rows()[0].n0;
  std::uint64_t n1_before = d.rows()[0].n1;

  RngStream rng(4, 1);
  std::uint64_t drawn0 = 0, drawn1 = 0;
  for (int i = 0; i < 512; ++i) {
    REQUIRE(d.remaining(q) == 512 - static_cast<std::uint64_t>(i));
    ShotRecord rec = replay_draw(d, q, rng);
    (rec.y == 0 ? drawn0 : drawn1) += 1;
  }
  REQUIRE(d.remaining(q) == 0);
  REQUIRE(drawn0 == n0_before);
  REQUIRE(drawn1 == n1_before);
  REQUIRE_THROWS_AS(replay_draw(d, q, rng), ExhaustedQueryError);
  REQUIRE(d.remaining(qs[1]) == 512);

  Query unknown{Meas::Y, Prep::U0, 3e-7};
  REQUIRE_THROWS_AS(replay_draw(d, unknown, rng), ExhaustedQueryError);
}

TEST_CASE("replay preserves the signal multiset", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  n.readout = gaussian_signal_for_error(0.0078, 0.033);
  std::vector<Query> qs{{Meas::Y, Prep::U1, 3e-7}};
  RngStream gen_rng(8, 0);
  Dataset d = generate_dataset(theta, n, qs, 200, gen_rng);

  std::vector<std::complex<double>> stored = d.rows()[0].signals;
  std::vector<std::complex<double>> drawn;
  RngStream rng(8, 1);
  for (int i = 0; i < 200; ++i) drawn.push_back(replay_draw(d, qs[0], rng).c);

  auto lex = [](const std::complex<double>& a, const std::complex<double>& b) {
    return a.real() != b.real() ? a.real() < b.real() : a.imag() < b.imag();
  };
  std::sort(stored.begin(), stored.end(), lex);
  std::sort(drawn.begin(), drawn.end(), lex);
  REQUIRE(stored == drawn);
}

TEST_CASE("dataset files round trip", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  std::vector<Query> qs;
  for (int k = 0; k < 9; ++k)
    qs.push_back({tu::all_meas()[k % 3], tu::all_preps()[k % 2], 1e-7 + 6.25e-9 * k});

  RngStream rng(13, 0);
  Dataset d = generate_dataset(theta, n, qs, 64, rng);
  std::string path = temp_path("crlearn_roundtrip.jsonl");
  save_dataset(d, path, nlohmann::json{{"seed", 13}});

  Dataset back = load_dataset(path);
  REQUIRE(back.kind() == d.kind());
  REQUIRE(back.n_queries() == d.n_queries());
  REQUIRE(back.total() == d.total());
  for (std::size_t i = 0; i < d.rows().size(); ++i) {
    const auto& a = d.rows()[i];
    const auto& b = back.rows()[i];
    REQUIRE(a.q.m == b.q.m);
    REQUIRE(a.q.u == b.q.u);
    REQUIRE(a.q.t == b.q.t);  // bit-exact through JSON
    REQUIRE(a.n0 == b.n0);
    REQUIRE(a.n1 == b.n1);
  }
  std::remove(path.c_str());
}

TEST_CASE("signal dataset files round trip bit-exactly", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  n.readout = gaussian_signal_for_error(0.0078, 0.033);
  std::vector<Query> qs{{Meas::X, Prep::U0, 2e-7}, {Meas::Y, Prep::U1, 4.5e-7}};
  RngStream rng(17, 0);
  Dataset d = generate_dataset(theta, n, qs, 50, rng);
  std::string path = temp_path("crlearn_roundtrip_sig.jsonl");
  save_dataset(d, path);

  Dataset back = load_dataset(path);
  REQUIRE(back.kind() == ReadoutKind::GaussianSignal);
  for (std::size_t i = 0; i < d.rows().size(); ++i)
    REQUIRE(back.rows()[i].signals == d.rows()[i].signals);
  std::remove(path.c_str());
}

TEST_CASE("regeneration with the same seed is byte identical", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  std::vector<Query> qs{{Meas::X, Prep::U0, 2e-7},
                        {Meas::Y, Prep::U0, 3e-7},
                        {Meas::Z, Prep::U1, 4e-7}};
  std::string pa = temp_path("crlearn_regen_a.jsonl");
  std::string pb = temp_path("crlearn_regen_b.jsonl");
  {
    RngStream rng(21, 0);
    save_dataset(generate_dataset(theta, n, qs, 128, rng), pa);
  }
  {
    RngStream rng(21, 0);
    save_dataset(generate_dataset(theta, n, qs, 128, rng), pb);
  }
  REQUIRE(slurp(pa) == slurp(pb));

  {
    RngStream rng(22, 0);
    save_dataset(generate_dataset(theta, n, qs, 128, rng), pb);
  }
  REQUIRE(slurp(pa) != slurp(pb));
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("malformed dataset files raise parse errors", "[oracle]") {
  std::string path = temp_path("crlearn_malformed.jsonl");

  SECTION("truncation breaks the header count") {
    LambdaParams theta = drive_theta();
    NoiseModel n = drive_noise();
    std::vector<Query> qs{{Meas::X, Prep::U0, 2e-7}};
    RngStream rng(3, 0);
    save_dataset(generate_dataset(theta, n, qs, 32, rng), path);

    std::string text = slurp(path);
    std::size_t cut = text.rfind("{\"m\"");
    std::ofstream out(path, std::ios::binary);
    out << text.substr(0, cut);
    out.close();
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
  }

  SECTION("garbage record reports its line number") {
    std::ofstream out(path, std::ios::binary);
    out << R"({"version":"0.1.0","n_queries":1,"shots_per_query":2,"readout_kind":"bitflip"})"
        << "\n";
    out << R"({"m":"X","u":0,"t":2e-07,"y":0})" << "\n";
    out << "not json\n";
    out.close();
    try {
      load_dataset(path);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      REQUIRE(e.line == 3);
    }
  }

  SECTION("bad field values are rejected") {
    auto write_with_record = [&](const std::string& record) {
      std::ofstream out(path, std::ios::binary);
      out << R"({"version":"0.1.0","n_queries":1,"shots_per_query":1,"readout_kind":"bitflip"})"
          << "\n";
      out << record << "\n";
    };
    write_with_record(R"({"m":"Q","u":0,"t":2e-07,"y":0})");
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
    write_with_record(R"({"m":"X","u":2,"t":2e-07,"y":0})");
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
    write_with_record(R"({"m":"X","u":0,"t":-1e-07,"y":0})");
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
    write_with_record(R"({"m":"X","u":0,"t":2e-07,"y":3})");
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
    write_with_record(R"({"m":"X","u":0,"t":2e-07})");
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
  }

  SECTION("missing header field") {
    std::ofstream out(path, std::ios::binary);
    out << R"({"version":"0.1.0","n_queries":1,"shots_per_query":1})" << "\n";
    out.close();
    REQUIRE_THROWS_AS(load_dataset(path), ParseError);
  }

  std::remove(path.c_str());
}

TEST_CASE("save rejects ragged datasets", "[oracle]") {
  Dataset d(ReadoutKind::BitFlip);
  d.add({{Meas::X, Prep::U0, 2e-7}, 0, {0, 0}, false});
  d.add({{Meas::X, Prep::U0, 2e-7}, 1, {0, 0}, false});
  d.add({{Meas::Z, Prep::U1, 3e-7}, 0, {0, 0}, false});
  REQUIRE_THROWS_AS(save_dataset(d, temp_path("crlearn_ragged.jsonl")), DomainError);
}

TEST_CASE("oracle variant routes draws and ledgers", "[oracle]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  Query q{Meas::X, Prep::U0, 2e-7};

  Oracle sim = SimulatorOracle{theta, n};
  REQUIRE(!oracle_limited(sim));
  REQUIRE(oracle_remaining(sim, q) == kUnlimitedShots);
  REQUIRE(oracle_readout_kind(sim) == ReadoutKind::BitFlip);
  RngStream rng(5, 0);
  for (int i = 0; i < 10; ++i) {
    int y = oracle_draw(sim, q, rng).y;
    REQUIRE((y == 0 || y == 1));
  }

  RngStream gen_rng(5, 1);
  Oracle rep = ReplayOracle{generate_dataset(theta, n, {q}, 16, gen_rng)};
  REQUIRE(oracle_limited(rep));
  REQUIRE(oracle_remaining(rep, q) == 16);
  for (int i = 0; i < 16; ++i) oracle_draw(rep, q, rng);
  REQUIRE(oracle_remaining(rep, q) == 0);
  REQUIRE_THROWS_AS(oracle_draw(rep, q, rng), ExhaustedQueryError);
}

TEST_CASE("empirical frequencies are calibrated across the query space",
          "[oracle][slow]") {
  LambdaParams theta = drive_theta();
  NoiseModel n = drive_noise();
  auto qs = full_query_space();
  RngStream rng(777, 0);
  const std::uint64_t shots = 10000;
  Dataset d = generate_dataset(theta, n, qs, shots, rng);

  double chi2 = 0;
  for (const auto& row : d.rows()) {
    double p = noisy_likelihood(theta, n, row.q);
    double mean = shots * p;
    double var = shots * p * (1 - p);
    double delta = static_cast<double>(row.n0) - mean;
    chi2 += delta * delta / var;
  }
  double pval = ref::chi2_sf(chi2, static_cast<double>(d.n_queries()));
  INFO("chi2 = " << chi2 << ", p = " << pval);
  REQUIRE(pval > 0.001);
}
