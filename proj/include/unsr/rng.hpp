#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "unsr/common.hpp"

namespace unsr {

// Deterministic random stream. All run randomness flows from one seed split
// into named, mutually independent sub-streams; draws on one stream never
// advance another. Value derivation avoids std distributions so sequences
// are identical across standard libraries.
class RngStream {
 public:
  RngStream() : RngStream("default", 0) {}

  RngStream(std::string_view name, std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint64_t>(0x9e3779b97f4a7c15ull), seed, fnv1a(name)};
    eng_.seed(seq);
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for desk-scale n.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw UsageError("RngStream::uniform_int: n must be positive");
    return eng_() % n;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw RuntimeError("RngStream: malformed engine state");
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  std::mt19937_64 eng_;
};

// The four sub-streams a training run draws from.
struct RunRngs {
  RngStream env;      // episode start states
  RngStream explore;  // epsilon-greedy action noise
  RngStream sample;   // replay batch selection
  RngStream init;     // parameter initialization

  explicit RunRngs(std::uint64_t seed)
      : env("env", seed), explore("explore", seed), sample("sample", seed), init("init", seed) {}
};

}  // namespace unsr
