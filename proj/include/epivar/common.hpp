#ifndef EPIVAR_COMMON_HPP
#define EPIVAR_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace epivar {

/// Compartment of one individual at one timestep.
enum class State : std::uint8_t { S = 0, I = 1, R = 2 };

inline char to_char(State s) {
  switch (s) {
    case State::S: return 'S';
    case State::I: return 'I';
    case State::R: return 'R';
  }
  return '?';
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Observations that no trajectory can satisfy.
class InfeasibleEvidence : public Error {
 public:
  using Error::Error;
};

class InstanceTooLarge : public Error {
 public:
  using Error::Error;
};

inline State parse_state(const std::string& s) {
  if (s == "S" || s == "s") return State::S;
  if (s == "I" || s == "i") return State::I;
  if (s == "R" || s == "r") return State::R;
  throw Error("unknown state '" + s + "'");
}

/// Marker for a zero-probability event in log space.
inline constexpr double kImpossible = -std::numeric_limits<double>::infinity();

inline bool is_impossible(double logp) { return logp == kImpossible; }

using Rng = std::mt19937_64;

/// Uniform in [0, 1) from the top 53 bits; independent of the standard
/// library's distribution implementations so runs replay bit-exactly.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(mix_seed(master) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t k = v.size(); k > 1; --k) {
    std::swap(v[k - 1], v[uniform_index(rng, k)]);
  }
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = kImpossible;
  for (double x : xs) m = std::max(m, x);
  if (is_impossible(m)) return kImpossible;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

/// Streaming log-sum-exp with a running maximum.
class LogSumExp {
 public:
  void add(double x) {
    if (is_impossible(x)) return;
    if (x <= max_) {
      sum_ += std::exp(x - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - x) + 1.0;
      max_ = x;
    }
  }
  double value() const { return is_impossible(max_) ? kImpossible : max_ + std::log(sum_); }

 private:
  double max_ = kImpossible;
  double sum_ = 0.0;
};

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(std::span<const double> xs) {
  MeanStderr r;
  if (xs.empty()) return r;
  double n = static_cast<double>(xs.size());
  for (double x : xs) r.mean += x;
  r.mean /= n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  return r;
}

}  // namespace epivar

#endif  // EPIVAR_COMMON_HPP
