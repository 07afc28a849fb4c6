#pragma once

// Outcome sources: a stochastic simulator and an offline replay store with
// per-query shot ledgers. A Dataset doubles as the accumulated-observation
// container for the estimation pipeline; bit outcomes are kept aggregated
// per query (the likelihood only needs counts), signal outcomes are kept
// individually.

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include <json.hpp>

#include "crlearn/errors.hpp"
#include "crlearn/model.hpp"
#include "crlearn/noise.hpp"
#include "crlearn/rng.hpp"
#include "crlearn/version.hpp"

namespace crlearn {

enum class ReadoutKind { BitFlip, GaussianSignal };

inline ReadoutKind readout_kind(const NoiseModel& n) {
  return std::holds_alternative<BitFlip>(n.readout) ? ReadoutKind::BitFlip
                                                    : ReadoutKind::GaussianSignal;
}

struct ShotRecord {
  Query q;
  int y = 0;                       // bit outcome (BitFlip) or hidden state
  std::complex<double> c{0, 0};    // readout signal (GaussianSignal)
  bool has_signal = false;
};

struct QueryShots {
  Query q;
  std::uint64_t n0 = 0;  // bit-outcome multiset, aggregated
  std::uint64_t n1 = 0;
  std::vector<std::complex<double>> signals;

  std::uint64_t count() const {
    return signals.empty() ? n0 + n1
                           : static_cast<std::uint64_t>(signals.size());
  }
};

class Dataset {
 public:
  explicit Dataset(ReadoutKind kind = ReadoutKind::BitFlip) : kind_(kind) {}

  ReadoutKind kind() const { return kind_; }
  const std::vector<QueryShots>& rows() const { return rows_; }
  std::size_t n_queries() const { return rows_.size(); }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& r : rows_) n += r.count();
    return n;
  }

  void add(const ShotRecord& rec) {
    QueryShots& row = rows_[row_index(rec.q)];
    if (kind_ == ReadoutKind::BitFlip) {
      (rec.y == 0 ? row.n0 : row.n1) += 1;
    } else {
      row.signals.push_back(rec.c);
    }
  }

  // Bulk insertion of aggregated bit outcomes; only meaningful for the
  // bit-flip readout where outcome order carries no information.
  void add_counts(const Query& q, std::uint64_t n0, std::uint64_t n1) {
    if (kind_ != ReadoutKind::BitFlip)
      throw ModelKindError("aggregated counts need a bit readout");
    QueryShots& row = rows_[row_index(q)];
    row.n0 += n0;
    row.n1 += n1;
  }

  std::uint64_t remaining(const Query& q) const {
    auto it = index_.find(key_of(q));
    return it == index_.end() ? 0 : rows_[it->second].count();
  }

  // Removes and returns a uniformly chosen unused shot for q.
  ShotRecord draw(const Query& q, RngStream& rng) {
    auto it = index_.find(key_of(q));
    if (it == index_.end() || rows_[it->second].count() == 0)
      throw ExhaustedQueryError("no shots left for query at t = " +
                                std::to_string(q.t));
    QueryShots& row = rows_[it->second];
    ShotRecord rec;
    rec.q = row.q;
    if (kind_ == ReadoutKind::BitFlip) {
      std::uint64_t pick = rng.uniform_index(row.n0 + row.n1);
      if (pick < row.n0) {
        rec.y = 0;
        row.n0 -= 1;
      } else {
        rec.y = 1;
        row.n1 -= 1;
      }
    } else {
      std::size_t pick = rng.uniform_index(row.signals.size());
      rec.c = row.signals[pick];
      rec.has_signal = true;
      row.signals[pick] = row.signals.back();
      row.signals.pop_back();
    }
    return rec;
  }

 private:
  using Key = std::tuple<int, int, std::uint64_t>;

  static Key key_of(const Query& q) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(q.t));
    std::memcpy(&bits, &q.t, sizeof(bits));
    return {static_cast<int>(q.m), static_cast<int>(q.u), bits};
  }

  std::size_t row_index(const Query& q) {
    auto [it, inserted] = index_.try_emplace(key_of(q), rows_.size());
    if (inserted) {
      QueryShots row;
      row.q = q;
      rows_.push_back(row);
    }
    return it->second;
  }

  ReadoutKind kind_;
  std::vector<QueryShots> rows_;
  std::map<Key, std::size_t> index_;
};

// ------------------------------------------------------------- simulation --

inline ShotRecord simulate_shot(const LambdaParams& theta_star,
                                const NoiseModel& n, const Query& q,
                                RngStream& rng) {
  ShotRecord rec;
  rec.q = q;
  if (readout_kind(n) == ReadoutKind::BitFlip) {
    double p0 = noisy_likelihood(theta_star, n, q);
    rec.y = rng.bernoulli(p0) ? 0 : 1;
  } else {
    const auto& g = std::get<GaussianSignal>(n.readout);
    double p0 = pre_readout_likelihood(theta_star, n, q);
    rec.y = rng.bernoulli(p0) ? 0 : 1;
    const auto& mean = (rec.y == 0) ? g.mean0 : g.mean1;
    const auto& cov = (rec.y == 0) ? g.cov0 : g.cov1;
    Eigen::LLT<Eigen::Matrix2d> llt(cov);
    Eigen::Vector2d z(rng.normal(), rng.normal());
    Eigen::Vector2d s = llt.matrixL() * z;
    rec.c = {mean.real() + s[0], mean.imag() + s[1]};
    rec.has_signal = true;
  }
  return rec;
}

inline Dataset generate_dataset(const LambdaParams& theta_star,
                                const NoiseModel& n,
                                const std::vector<Query>& space,
                                std::uint64_t shots_per_query,
                                RngStream& rng) {
  if (shots_per_query < 1)
    throw DomainError("generate_dataset: shots_per_query must be >= 1");
  Dataset d(readout_kind(n));
  for (const Query& q : space)
    for (std::uint64_t s = 0; s < shots_per_query; ++s)
      d.add(simulate_shot(theta_star, n, q, rng));
  return d;
}

// Shot-count equivalent of generate_dataset for the bit-flip readout: one
// binomial draw per query instead of one Bernoulli draw per shot, so large
// shot budgets stay cheap. Not available for signal readouts, whose shots
// each carry a continuous value.
inline Dataset generate_dataset_counts(const LambdaParams& theta_star,
                                       const NoiseModel& n,
                                       const std::vector<Query>& space,
                                       std::uint64_t shots_per_query,
                                       RngStream& rng) {
  if (shots_per_query < 1)
    throw DomainError("generate_dataset_counts: shots_per_query must be >= 1");
  if (readout_kind(n) != ReadoutKind::BitFlip)
    throw ModelKindError("aggregated generation needs a bit readout");
  Dataset d(ReadoutKind::BitFlip);
  for (const Query& q : space) {
    double p0 = noisy_likelihood(theta_star, n, q);
    std::uint64_t n0 = rng.binomial(shots_per_query, p0);
    d.add_counts(q, n0, shots_per_query - n0);
  }
  return d;
}

inline ShotRecord replay_draw(Dataset& d, const Query& q, RngStream& rng) {
  return d.draw(q, rng);
}

// ------------------------------------------------------------- file format --

inline const char* readout_kind_name(ReadoutKind k) {
  return k == ReadoutKind::BitFlip ? "bitflip" : "gaussian";
}

// Newline-delimited JSON: a header object, then one object per shot.
// Requires a uniform shots-per-query ledger (the generator's output shape).
inline void save_dataset(const Dataset& d, const std::string& path,
                         const nlohmann::json& config = {}) {
  std::uint64_t per_query = d.rows().empty() ? 0 : d.rows()[0].count();
  for (const auto& r : d.rows())
    if (r.count() != per_query)
      throw DomainError("save_dataset: non-uniform shot counts");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  nlohmann::json header{{"version", kVersion},
                        {"n_queries", d.n_queries()},
                        {"shots_per_query", per_query},
                        {"readout_kind", readout_kind_name(d.kind())}};
  if (!config.is_null() && !config.empty()) header["config"] = config;
  out << header.dump() << "\n";
  for (const auto& row : d.rows()) {
    nlohmann::json base{{"m", std::string(1, meas_char(row.q.m))},
                        {"u", static_cast<int>(row.q.u)},
                        {"t", row.q.t}};
    if (d.kind() == ReadoutKind::BitFlip) {
      for (std::uint64_t i = 0; i < row.n0; ++i) {
        nlohmann::json j = base;
        j["y"] = 0;
        out << j.dump() << "\n";
      }
      for (std::uint64_t i = 0; i < row.n1; ++i) {
        nlohmann::json j = base;
        j["y"] = 1;
        out << j.dump() << "\n";
      }
    } else {
      for (const auto& c : row.signals) {
        nlohmann::json j = base;
        j["c_re"] = c.real();
        j["c_im"] = c.imag();
        out << j.dump() << "\n";
      }
    }
  }
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset: " + path);
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++line_no;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, std::string("bad header: ") + e.what());
  }
  for (const char* field : {"version", "n_queries", "shots_per_query",
                            "readout_kind"})
    if (!header.contains(field))
      throw ParseError(1, std::string("header missing field ") + field);

  std::string kind_name = header["readout_kind"].get<std::string>();
  ReadoutKind kind;
  if (kind_name == "bitflip")
    kind = ReadoutKind::BitFlip;
  else if (kind_name == "gaussian")
    kind = ReadoutKind::GaussianSignal;
  else
    throw ParseError(1, "unknown readout_kind: " + kind_name);

  Dataset d(kind);
  std::uint64_t n_records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad record: ") + e.what());
    }
    ShotRecord rec;
    try {
      std::string m = j.at("m").get<std::string>();
      if (m == "X")
        rec.q.m = Meas::X;
      else if (m == "Y")
        rec.q.m = Meas::Y;
      else if (m == "Z")
        rec.q.m = Meas::Z;
      else
        throw ParseError(line_no, "bad measurement label: " + m);
      int u = j.at("u").get<int>();
      if (u != 0 && u != 1) throw ParseError(line_no, "bad prep index");
      rec.q.u = static_cast<Prep>(u);
      rec.q.t = j.at("t").get<double>();
      if (!(rec.q.t > 0) || !std::isfinite(rec.q.t))
        throw ParseError(line_no, "bad time value");
      if (kind == ReadoutKind::BitFlip) {
        rec.y = j.at("y").get<int>();
        if (rec.y != 0 && rec.y != 1) throw ParseError(line_no, "bad outcome");
      } else {
        rec.c = {j.at("c_re").get<double>(), j.at("c_im").get<double>()};
        rec.has_signal = true;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad record: ") + e.what());
    }
    d.add(rec);
    ++n_records;
  }

  std::uint64_t expect = header["n_queries"].get<std::uint64_t>() *
                         header["shots_per_query"].get<std::uint64_t>();
  if (n_records != expect)
    throw ParseError(line_no, "record count " + std::to_string(n_records) +
                                  " does not match header total " +
                                  std::to_string(expect));
  return d;
}

// ------------------------------------------------------------------ oracle --

struct SimulatorOracle {
  LambdaParams theta_star;
  NoiseModel noise;
};

struct ReplayOracle {
  Dataset data;  // private copy; the learner owns and depletes it
};

using Oracle = std::variant<SimulatorOracle, ReplayOracle>;

inline ShotRecord oracle_draw(Oracle& o, const Query& q, RngStream& rng) {
  if (auto* sim = std::get_if<SimulatorOracle>(&o))
    return simulate_shot(sim->theta_star, sim->noise, q, rng);
  return std::get<ReplayOracle>(o).data.draw(q, rng);
}

inline std::uint64_t oracle_remaining(const Oracle& o, const Query& q) {
  if (std::holds_alternative<SimulatorOracle>(o)) return kUnlimitedShots;
  return std::get<ReplayOracle>(o).data.remaining(q);
}

inline bool oracle_limited(const Oracle& o) {
  return std::holds_alternative<ReplayOracle>(o);
}

inline ReadoutKind oracle_readout_kind(const Oracle& o) {
  if (const auto* sim = std::get_if<SimulatorOracle>(&o))
    return readout_kind(sim->noise);
  return std::get<ReplayOracle>(o).data.kind();
}

}  // namespace crlearn
