#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mpiforge {

// Portable random source: the std::mt19937_64 engine (bit-exact across
// standard libraries) with distributions implemented here rather than through
// the implementation-defined std:: distribution classes.
//   uniform():  top 53 bits of one draw scaled to [0, 1)
//   normal():   Box-Muller on two uniform() draws, cosine branch only
//   uniform_int(lo, hi): lo + draw % (hi - lo + 1)
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);
  double normal(double mean = 0.0, double stddev = 1.0);

  [[nodiscard]] std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace mpiforge
