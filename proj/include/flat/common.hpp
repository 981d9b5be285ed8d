#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace flat {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// UTF-8 <-> codepoint conversions. Sentences are handled as codepoint
// sequences so that lattice positions index characters, not bytes.
std::u32string utf8_decode(const std::string& s);
std::string utf8_encode(const std::u32string& s);
std::string utf8_encode(char32_t c);

// Seeded RNG, threaded explicitly through everything that draws numbers.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() { return unit_(gen_); }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double normal(double mean, double stddev) {
    return mean + stddev * normal_(gen_);
  }
  // Uniform integer in [0, n).
  int uniform_int(int n) {
    require(n > 0, "Rng::uniform_int: n must be positive");
    return static_cast<int>(gen_() % static_cast<uint64_t>(n));
  }
  bool bernoulli(double p) { return uniform() < p; }
  uint64_t next_u64() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::string trim(const std::string& s);
std::vector<std::string> split_ws(const std::string& s);

}  // namespace flat
