#include "plan_iv/core.hpp"

namespace plan_iv {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

namespace {

// Fills the whole Mersenne Twister state from a splitmix64 stream; a bare integer seed
// leaves the state linearly related to the seed.
struct SplitMixSeedSeq {
  using result_type = std::uint32_t;
  std::uint64_t state;
  template <class It>
  void generate(It first, It last) {
    for (; first != last; ++first) {
      state = splitmix64(state);
      *first = static_cast<std::uint32_t>(state >> 32);
    }
  }
};

std::mt19937_64 seeded_engine(std::uint64_t seed) {
  SplitMixSeedSeq seq{seed};
  return std::mt19937_64(seq);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : engine_(seeded_engine(seed)) {}

double Rng::normal() { return normal_(engine_); }

Vec Rng::normal_vec(Index n) {
  Vec v(n);
  for (Index k = 0; k < n; ++k) v[k] = normal_(engine_);
  return v;
}

double Rng::uniform() { return uniform_(engine_); }

std::size_t Rng::categorical(std::span<const double> probs) {
  if (probs.empty()) throw ConfigError("categorical draw over an empty support");
  const double u = uniform();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] <= 0.0) continue;
    last_positive = k;
    acc += probs[k];
    if (u < acc) return k;
  }
  // rounding in the cumulative sum
  return last_positive;
}

}  // namespace plan_iv
