#pragma once

// Deterministic random streams. All distributions are implemented by hand on
// top of std::mt19937_64 because the std::*_distribution algorithms are not
// pinned by the standard; identical (seed, stream) must give identical draws
// on every platform. Streams are keyed by (seed, stream_id) mixed through
// splitmix64, and substreams derive fresh ids without consuming draws.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "crlearn/errors.hpp"

namespace crlearn {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_id_(stream_id) {
    std::uint64_t s = seed ^ (0xd1342543de82ef95ULL * (stream_id + 1));
    std::seed_seq seq{static_cast<std::uint32_t>(splitmix64(s)),
                      static_cast<std::uint32_t>(splitmix64(s) >> 32),
                      static_cast<std::uint32_t>(splitmix64(s)),
                      static_cast<std::uint32_t>(splitmix64(s) >> 32)};
    eng_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Child stream with an independent state; does not advance this stream.
  RngStream substream(std::uint64_t child_id) const {
    std::uint64_t s = stream_id_;
    std::uint64_t mixed = splitmix64(s) ^ (child_id * 0x9e3779b97f4a7c15ULL);
    return RngStream(seed_, mixed);
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw DomainError("uniform_index: n must be positive");
    std::uint64_t threshold = (0ULL - n) % n;
    for (;;) {
      std::uint64_t r = eng_();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via polar Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Index draw from a cumulative distribution (cdf.back() ~ 1, monotone).
  std::size_t sample_cdf(const std::vector<double>& cdf) {
    if (cdf.empty()) throw DomainError("sample_cdf: empty cdf");
    double u = uniform() * cdf.back();
    std::size_t lo = 0, hi = cdf.size() - 1;
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (cdf[mid] <= u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return lo;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Binomial(n, p): direct summation for n <= 64, otherwise inversion summed
  // outward from the mode (expected O(sqrt(n p q)) steps; a from-zero walk
  // underflows its prefix and costs O(n) at large n).
  std::uint64_t binomial(std::uint64_t n, double p) {
    if (n == 0 || p <= 0.0) return 0;
    if (p >= 1.0) return n;
    if (n <= 64) {
      std::uint64_t k = 0;
      for (std::uint64_t i = 0; i < n; ++i) k += bernoulli(p) ? 1 : 0;
      return k;
    }
    double u = uniform();
    double q = 1.0 - p;
    double nd = static_cast<double>(n);
    std::uint64_t mode = static_cast<std::uint64_t>((nd + 1.0) * p);
    if (mode > n) mode = n;
    double md = static_cast<double>(mode);
    double pm = std::exp(std::lgamma(nd + 1.0) - std::lgamma(md + 1.0) -
                         std::lgamma(nd - md + 1.0) + md * std::log(p) +
                         (nd - md) * std::log(q));
    u -= pm;
    if (u <= 0.0) return mode;
    double pd = pm, pu = pm;
    std::uint64_t lo = mode, hi = mode;
    for (;;) {
      bool stepped = false;
      if (lo > 0) {
        double kd = static_cast<double>(lo);
        pd *= kd * q / ((nd - kd + 1.0) * p);
        --lo;
        u -= pd;
        if (u <= 0.0) return lo;
        stepped = true;
      }
      if (hi < n) {
        double kd = static_cast<double>(hi);
        pu *= (nd - kd) * p / ((kd + 1.0) * q);
        ++hi;
        u -= pu;
        if (u <= 0.0) return hi;
        stepped = true;
      }
      if (!stepped) return mode;  // rounding residue, probability ~1e-16
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace crlearn
