#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bidmix {

// log(1 + exp(x)) without overflow for large |x|.
inline double log1pexp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double logistic(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sum_j exp(a_j)); entries equal to -inf are skipped. Returns -inf if all
// entries are -inf and n == 0 is treated the same way.
double logsumexp(const double* a, int n);
inline double logsumexp(const Eigen::VectorXd& a) {
  return logsumexp(a.data(), static_cast<int>(a.size()));
}

// Weighted empirical quantile (type-4 style: cumulative weight crossing).
// level in [0, 1]; weights must be nonnegative with a positive sum.
double weighted_quantile(std::vector<double> values, std::vector<double> weights,
                         double level);

// Runs fn(i) for each i in [0, n) on up to `threads` workers. Output must be
// written to per-index slots so the result is independent of scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// FNV-1a 64-bit hashes, used to fingerprint pipeline artifacts.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64_file(const std::string& path);  // throws DataError
std::string to_hex(std::uint64_t v);

// Shortest fixed formatting that round-trips a double: printf "%.17g".
std::string format_g17(double v);

// Splits one CSV line on commas. No quoting support; embedded commas in
// fields are not representable in this format.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace bidmix
