#include "bidmix/rng.hpp"

#include <cmath>
#include <numbers>

namespace bidmix {

std::uint64_t Rng::mix(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  // 1 - u1 lies in (0, 1], keeping the log finite.
  double r = std::sqrt(-2.0 * std::log1p(-u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::categorical(const double* probs, int k) {
  double u = uniform();
  double cum = 0.0;
  for (int i = 0; i < k; ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return k - 1;
}

Eigen::VectorXd Rng::dirichlet_ones(int k) {
  Eigen::VectorXd g(k);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    double u = uniform();
    g[i] = -std::log1p(-u);  // Exp(1)
    total += g[i];
  }
  if (total <= 0.0) {
    g.setConstant(1.0 / k);
    return g;
  }
  return g / total;
}

}  // namespace bidmix
