#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dcrl {

/// Deterministic random source. All distributions are implemented on top of
/// the raw mt19937_64 stream (std::*_distribution is implementation-defined,
/// which would break cross-platform reproducibility of serialized datasets).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1]; safe as a log argument.
  double uniform_pos() {
    return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached second value).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  /// Uniform integer in {0, ..., n-1}.
  int uniform_int(int n) {
    const int k = static_cast<int>(uniform() * n);
    return k < n ? k : n - 1;
  }

  /// Index drawn from a probability vector (assumed normalized).
  int categorical(const Eigen::VectorXd& probs) {
    const double u = uniform();
    double acc = 0.0;
    for (int i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  Eigen::VectorXd normal_vec(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// Column-major fill so that draw order is independent of row count changes
  /// in downstream reshapes.
  Eigen::MatrixXd normal_mat(int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    // Fisher-Yates on the raw stream.
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(i + 1)]);
    return p;
  }

  /// Engine state round-trip for checkpoint resume.
  std::string serialize_state() const;
  void restore_state(const std::string& s);

 private:
  std::mt19937_64 gen_;
};

}  // namespace dcrl
