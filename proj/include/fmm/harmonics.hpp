#pragma once

#include <complex>
#include <span>
#include <vector>

#include "fmm/geometry.hpp"

namespace fmm {

/// Expansion coefficients, flat over (n,m) with m in [-n,n].
using Coeffs = std::vector<std::complex<double>>;

constexpr int coeff_index(int n, int m) { return n * n + n + m; }
constexpr int coeff_count(int order) { return (order + 1) * (order + 1); }

constexpr int kMaxOrder = 60;

/// Square roots of factorials and binomials shared by the translation
/// operators. Immutable after construction; pass by const reference.
class HarmonicTables {
 public:
  explicit HarmonicTables(int order);
  int order() const { return order_; }
  double sqrt_factorial(int i) const { return sqf_[static_cast<size_t>(i)]; }
  double sqrt_binomial(int a, int b) const {
    return sqf_[static_cast<size_t>(a)] /
           (sqf_[static_cast<size_t>(b)] * sqf_[static_cast<size_t>(a - b)]);
  }

 private:
  int order_;
  std::vector<double> sqf_; // sqrt(i!), i = 0..2*order
};

/// Seminormalized spherical harmonics of the direction of v, all (n,m) up to
/// `order`, written into out[coeff_index(n,m)]. v must be nonzero.
void sph_harmonics(Vec3 v, int order, std::complex<double>* out);

/// Regular solid harmonics |v|^n times the above; v = 0 gives the constant.
void regular_solid(Vec3 v, int order, std::complex<double>* out);

/// Accumulates the multipole of the points about (center, scale) into M,
/// which must hold coeff_count(order) entries.
void p2m(std::span<const Source> pts, Vec3 center, double scale, int order, Coeffs& M);

/// Field of a multipole / local expansion at x. Evaluation order is fixed,
/// so equal inputs give bitwise equal results.
double multipole_eval(const Coeffs& M, Vec3 center, double scale, int order, Vec3 x);
double local_eval(const Coeffs& L, Vec3 center, double scale, int order, Vec3 x);

/// Child multipole into parent multipole (exact) and parent local into child
/// local (exact). Both accumulate into the destination.
void m2m(const HarmonicTables& tab, const Coeffs& child, Vec3 child_center, double child_scale,
         Coeffs& parent, Vec3 parent_center, double parent_scale);
void l2l(const HarmonicTables& tab, const Coeffs& parent, Vec3 parent_center,
         double parent_scale, Coeffs& child, Vec3 child_center, double child_scale);

/// Multipole-to-local translations; both accumulate into L. m2l_direct is
/// the quartic reference, m2l_rotated the rotation-accelerated production
/// path. They agree to roundoff on admissible pairs.
void m2l_direct(const HarmonicTables& tab, const Coeffs& M, Vec3 source_center,
                double source_scale, Coeffs& L, Vec3 target_center, double target_scale);
void m2l_rotated(const HarmonicTables& tab, const Coeffs& M, Vec3 source_center,
                 double source_scale, Coeffs& L, Vec3 target_center, double target_scale);

/// Both directions of one pair with a single rotation frame. Bitwise
/// equivalent to two m2l_rotated calls; cheaper because the Wigner matrices
/// are built once.
void m2l_pair(const HarmonicTables& tab, const Coeffs& Mi, Vec3 ci, double ai, Coeffs& Li,
              const Coeffs& Mj, Vec3 cj, double aj, Coeffs& Lj);

struct PrecisionPolicy {
  int order;
  bool capped;
  double achieved_bound;
};

/// Smallest order with bound_constant * theta^(Q+1) / (1-theta)^2 <= tol,
/// capped at kMaxOrder.
PrecisionPolicy choose_order(double tol, double theta, double bound_constant = 1.0);

} // namespace fmm
