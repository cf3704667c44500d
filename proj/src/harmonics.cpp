#include "fmm/harmonics.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace fmm {

namespace {

constexpr int kHalfCount = (kMaxOrder + 1) * (kMaxOrder + 2) / 2;

constexpr int half_index(int n, int m) { return n * (n + 1) / 2 + m; }

double parity(int e) { return (e & 1) ? -1.0 : 1.0; }

bool lex_less(Vec3 a, Vec3 b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

} // namespace

HarmonicTables::HarmonicTables(int order) : order_(order) {
  if (order < 0 || order > kMaxOrder)
    throw std::invalid_argument("HarmonicTables: order out of range");
  sqf_.resize(static_cast<size_t>(4 * order) + 2);
  sqf_[0] = 1.0;
  for (size_t i = 1; i < sqf_.size(); ++i)
    sqf_[i] = sqf_[i - 1] * std::sqrt(static_cast<double>(i));
}

// Column-wise seminormalized associated Legendre evaluation shared by both
// spherical-harmonic entry points. Emits P(n,m) for one m at a time.
template <typename Emit>
static void legendre_columns(double ct, double st, int order, Emit&& emit) {
  double pmm = 1.0;
  for (int m = 0; m <= order; ++m) {
    if (m > 0) pmm *= -std::sqrt((2.0 * m - 1.0) / (2.0 * m)) * st;
    double pa = pmm, pb = 0.0;
    emit(m, m, pa);
    if (m + 1 <= order) {
      double next = ct * std::sqrt(2.0 * m + 1.0) * pa;
      pb = pa;
      pa = next;
      emit(m + 1, m, pa);
    }
    for (int n = m + 2; n <= order; ++n) {
      double num = (2.0 * n - 1.0) * ct * pa -
                   std::sqrt(static_cast<double>(n - 1 - m) * (n - 1 + m)) * pb;
      double next = num / std::sqrt(static_cast<double>(n - m) * (n + m));
      pb = pa;
      pa = next;
      emit(n, m, pa);
    }
  }
}

void sph_harmonics(Vec3 v, int order, std::complex<double>* out) {
  double r = norm(v);
  double proj = std::hypot(v.x, v.y);
  double ct = v.z / r;
  double st = proj / r;
  std::complex<double> eph =
      proj > 0.0 ? std::complex<double>(v.x / proj, v.y / proj) : std::complex<double>(1.0, 0.0);
  std::array<std::complex<double>, 2 * kMaxOrder + 7> ph;
  ph[0] = 1.0;
  for (int m = 1; m <= order; ++m) ph[static_cast<size_t>(m)] = ph[static_cast<size_t>(m) - 1] * eph;
  legendre_columns(ct, st, order, [&](int n, int m, double p) {
    std::complex<double> val = p * ph[static_cast<size_t>(m)];
    out[coeff_index(n, m)] = val;
    if (m > 0) out[coeff_index(n, -m)] = parity(m) * std::conj(val);
  });
}

void regular_solid(Vec3 v, int order, std::complex<double>* out) {
  double r = norm(v);
  if (r == 0.0) {
    for (int i = 0; i < coeff_count(order); ++i) out[i] = 0.0;
    out[0] = 1.0;
    return;
  }
  sph_harmonics(v, order, out);
  double rn = 1.0;
  for (int n = 1; n <= order; ++n) {
    rn *= r;
    for (int m = -n; m <= n; ++m) out[coeff_index(n, m)] *= rn;
  }
}

void p2m(std::span<const Source> pts, Vec3 center, double scale, int order, Coeffs& M) {
  if (M.size() < static_cast<size_t>(coeff_count(order)))
    M.resize(static_cast<size_t>(coeff_count(order)));
  std::array<std::complex<double>, (kMaxOrder + 1) * (kMaxOrder + 1)> R;
  double inv = 1.0 / scale;
  for (const Source& s : pts) {
    regular_solid(inv * (s.position - center), order, R.data());
    for (int i = 0; i < coeff_count(order); ++i)
      M[static_cast<size_t>(i)] += s.mass * std::conj(R[static_cast<size_t>(i)]);
  }
}

double multipole_eval(const Coeffs& M, Vec3 center, double scale, int order, Vec3 x) {
  Vec3 w = x - center;
  double r = norm(w);
  std::array<std::complex<double>, (kMaxOrder + 1) * (kMaxOrder + 1)> Y;
  sph_harmonics(w, order, Y.data());
  std::complex<double> total = 0.0;
  double f = 1.0 / r;
  for (int n = 0; n <= order; ++n) {
    std::complex<double> acc = 0.0;
    for (int m = -n; m <= n; ++m)
      acc += M[static_cast<size_t>(coeff_index(n, m))] * Y[static_cast<size_t>(coeff_index(n, m))];
    total += f * acc;
    f *= scale / r;
  }
  return total.real();
}

double local_eval(const Coeffs& L, Vec3 center, double scale, int order, Vec3 x) {
  Vec3 w = x - center;
  double r = norm(w);
  if (r == 0.0) return L[0].real();
  std::array<std::complex<double>, (kMaxOrder + 1) * (kMaxOrder + 1)> Y;
  sph_harmonics(w, order, Y.data());
  std::complex<double> total = 0.0;
  double f = 1.0;
  for (int n = 0; n <= order; ++n) {
    std::complex<double> acc = 0.0;
    for (int m = -n; m <= n; ++m)
      acc += L[static_cast<size_t>(coeff_index(n, m))] * Y[static_cast<size_t>(coeff_index(n, m))];
    total += f * acc;
    f *= r / scale;
  }
  return total.real();
}

void m2m(const HarmonicTables& tab, const Coeffs& child, Vec3 child_center, double child_scale,
         Coeffs& parent, Vec3 parent_center, double parent_scale) {
  int Q = tab.order();
  std::array<std::complex<double>, (kMaxOrder + 1) * (kMaxOrder + 1)> R;
  regular_solid((1.0 / parent_scale) * (child_center - parent_center), Q, R.data());
  std::array<double, kMaxOrder + 1> pw;
  pw[0] = 1.0;
  for (int i = 1; i <= Q; ++i) pw[static_cast<size_t>(i)] = pw[static_cast<size_t>(i) - 1] * (child_scale / parent_scale);
  for (int n = 0; n <= Q; ++n) {
    for (int m = 0; m <= n; ++m) {
      std::complex<double> acc = 0.0;
      for (int j = 0; j <= n; ++j) {
        for (int k = -j; k <= j; ++k) {
          int nn = n - j, mm = m - k;
          if (mm < -nn || mm > nn) continue;
          acc += tab.sqrt_binomial(n - m, j - k) * tab.sqrt_binomial(n + m, j + k) *
                 std::conj(R[static_cast<size_t>(coeff_index(j, k))]) * pw[static_cast<size_t>(nn)] *
                 child[static_cast<size_t>(coeff_index(nn, mm))];
        }
      }
      parent[static_cast<size_t>(coeff_index(n, m))] += acc;
      if (m > 0) parent[static_cast<size_t>(coeff_index(n, -m))] += parity(m) * std::conj(acc);
    }
  }
}

void l2l(const HarmonicTables& tab, const Coeffs& parent, Vec3 parent_center,
         double parent_scale, Coeffs& child, Vec3 child_center, double child_scale) {
  int Q = tab.order();
  std::array<std::complex<double>, (kMaxOrder + 1) * (kMaxOrder + 1)> R;
  regular_solid((1.0 / parent_scale) * (child_center - parent_center), Q, R.data());
  std::array<double, kMaxOrder + 1> pw;
  pw[0] = 1.0;
  for (int i = 1; i <= Q; ++i) pw[static_cast<size_t>(i)] = pw[static_cast<size_t>(i) - 1] * (child_scale / parent_scale);
  for (int j = 0; j <= Q; ++j) {
    for (int k = 0; k <= j; ++k) {
      std::complex<double> acc = 0.0;
      for (int n = j; n <= Q; ++n) {
        for (int m = -n; m <= n; ++m) {
          int nn = n - j, mm = m - k;
          if (mm < -nn || mm > nn) continue;
          acc += tab.sqrt_binomial(n - m, j - k) * tab.sqrt_binomial(n + m, j + k) *
                 R[static_cast<size_t>(coeff_index(nn, mm))] *
                 parent[static_cast<size_t>(coeff_index(n, m))];
        }
      }
      acc *= pw[static_cast<size_t>(j)];
      child[static_cast<size_t>(coeff_index(j, k))] += acc;
      if (k > 0) child[static_cast<size_t>(coeff_index(j, -k))] += parity(k) * std::conj(acc);
    }
  }
}

void m2l_direct(const HarmonicTables& tab, const Coeffs& M, Vec3 source_center,
                double source_scale, Coeffs& L, Vec3 target_center, double target_scale) {
  int Q = tab.order();
  Vec3 t = source_center - target_center;
  double h = norm(t);
  if (h == 0.0) throw std::invalid_argument("m2l_direct: coincident centers");
  std::vector<std::complex<double>> Y(static_cast<size_t>(coeff_count(2 * Q)));
  sph_harmonics(t, 2 * Q, Y.data());
  std::array<double, kMaxOrder + 1> ps, pt;
  ps[0] = 1.0;
  pt[0] = 1.0;
  for (int i = 1; i <= Q; ++i) {
    ps[static_cast<size_t>(i)] = ps[static_cast<size_t>(i) - 1] * (source_scale / h);
    pt[static_cast<size_t>(i)] = pt[static_cast<size_t>(i) - 1] * (target_scale / h);
  }
  for (int j = 0; j <= Q; ++j) {
    for (int k = -j; k <= j; ++k) {
      std::complex<double> acc = 0.0;
      for (int n = 0; n <= Q; ++n) {
        for (int m = -n; m <= n; ++m) {
          int d = m - k;
          double g = tab.sqrt_factorial(n + j - d) * tab.sqrt_factorial(n + j + d) /
                     (tab.sqrt_factorial(n - m) * tab.sqrt_factorial(n + m) *
                      tab.sqrt_factorial(j - k) * tab.sqrt_factorial(j + k));
          acc += parity(n + k) * M[static_cast<size_t>(coeff_index(n, m))] * g *
                 ps[static_cast<size_t>(n)] * Y[static_cast<size_t>(coeff_index(n + j, d))];
        }
      }
      L[static_cast<size_t>(coeff_index(j, k))] += acc * pt[static_cast<size_t>(j)] / h;
    }
  }
}

namespace {

// Scratch for the rotation-accelerated M2L. Plain per-thread buffers, no
// values survive a call.
struct RotScratch {
  std::vector<double> dp, dm;
  std::vector<int> off;
  std::vector<double> sqrt_int; // sqrt(i) for the integer recurrence factors
  std::array<std::complex<double>, kHalfCount> ha, hb, hc;
  std::array<std::complex<double>, kMaxOrder + 1> ph;
};

thread_local RotScratch rot_scratch;

int wigner_size(int order) {
  int s = 0;
  for (int n = 0; n <= order; ++n) s += (n + 1) * (2 * n + 1);
  return s;
}

// Wigner d-matrices for the y-rotation with the given cosine/sine (DP) and
// its inverse (DM). Rows mp >= 0, columns m in [-n,n], block offsets in off.
void generate_dmatrix(double cb, double sb, int order, RotScratch& rs) {
  rs.off.resize(static_cast<size_t>(order) + 1);
  int total = 0;
  for (int n = 0; n <= order; ++n) {
    rs.off[static_cast<size_t>(n)] = total;
    total += (n + 1) * (2 * n + 1);
  }
  rs.dp.resize(static_cast<size_t>(total));
  rs.dm.resize(static_cast<size_t>(total));
  // The recurrence factors are square roots of small integers; tabulating
  // them swaps a sqrt per entry for a load of the very same value.
  const std::size_t want = static_cast<std::size_t>(4 * order * order + 1);
  if (rs.sqrt_int.size() < want) {
    std::size_t i = rs.sqrt_int.size();
    rs.sqrt_int.resize(want);
    for (; i < want; ++i) rs.sqrt_int[i] = std::sqrt(static_cast<double>(i));
  }
  const double* S = rs.sqrt_int.data();
  double* DP = rs.dp.data();
  double* DM = rs.dm.data();
  auto didx = [&](int n, int mp, int m) { return rs.off[static_cast<size_t>(n)] + mp * (2 * n + 1) + n + m; };
  double s2 = (1.0 - cb) / 2.0; // sin^2(angle/2)
  double c2 = (1.0 + cb) / 2.0;

  DP[0] = 1.0;
  DM[0] = 1.0;
  if (order == 0) return;
  DP[didx(1, 0, -1)] = -sb / std::sqrt(2.0);
  DP[didx(1, 0, 0)] = cb;
  DP[didx(1, 0, 1)] = sb / std::sqrt(2.0);
  DP[didx(1, 1, -1)] = s2;
  DP[didx(1, 1, 0)] = -sb / std::sqrt(2.0);
  DP[didx(1, 1, 1)] = c2;
  for (int mp = 0; mp <= 1; ++mp)
    for (int m = -1; m <= 1; ++m)
      DM[didx(1, mp, m)] = DP[didx(1, mp, m)] * parity(mp - m);

  for (int n = 2; n <= order; ++n) {
    {
      double* pc = &DP[didx(n, 0, 0)];
      double* pp = &DP[didx(n - 1, 0, 0)];
      double* mc = &DM[didx(n, 0, 0)];
      for (int m = -n; m <= n; ++m) {
        double v = 0.0;
        if (m + 1 <= n - 1) v -= sb * 0.5 * S[(n - m) * (n - m - 1)] * pp[m + 1];
        if (std::abs(m) <= n - 1) v += cb * S[(n - m) * (n + m)] * pp[m];
        if (m - 1 >= -(n - 1)) v += sb * 0.5 * S[(n + m) * (n + m - 1)] * pp[m - 1];
        pc[m] = v / n;
        mc[m] = pc[m] * parity(m);
      }
    }
    for (int mp = 1; mp <= n; ++mp) {
      double* pc = &DP[didx(n, mp, 0)];
      double* pp = &DP[didx(n - 1, mp - 1, 0)];
      double* mc = &DM[didx(n, mp, 0)];
      double factor = 1.0 / S[(n + mp) * (n + mp - 1)];
      for (int m = -n; m <= n; ++m) {
        double v = 0.0;
        if (m + 1 <= n - 1) v += s2 * S[(n - m) * (n - m - 1)] * pp[m + 1];
        if (m - 1 >= -(n - 1)) v += c2 * S[(n + m) * (n + m - 1)] * pp[m - 1];
        if (std::abs(m) <= n - 1) v -= sb * S[(n + m) * (n - m)] * pp[m];
        pc[m] = v * factor;
        mc[m] = pc[m] * parity(mp - m);
      }
    }
  }
}

void half_from_full(const Coeffs& full, int order, std::complex<double>* half) {
  for (int n = 0; n <= order; ++n)
    for (int m = 0; m <= n; ++m)
      half[half_index(n, m)] = full[static_cast<size_t>(coeff_index(n, m))];
}

// in-place phase twist c_n^m *= ph[m]
void rotate_z_half(std::complex<double>* c, int order, const std::complex<double>* ph) {
  for (int n = 0; n <= order; ++n)
    for (int m = 1; m <= n; ++m) c[half_index(n, m)] *= ph[m];
}

void rotate_y_half(const std::complex<double>* in, const double* d, const int* off, int order,
                   std::complex<double>* out) {
  for (int n = 0; n <= order; ++n) {
    double power_mp = 1.0;
    for (int mp = 0; mp <= n; ++mp) {
      const double* coeff = &d[off[n] + mp * (2 * n + 1) + n];
      const std::complex<double>* cn = &in[half_index(n, 0)];
      std::complex<double> acc = cn[0] * coeff[0];
      double power_m = -1.0;
      for (int m = 1; m <= n; ++m) {
        acc += cn[m] * power_m * coeff[m] + std::conj(cn[m]) * coeff[-m];
        power_m = -power_m;
      }
      out[half_index(n, mp)] = acc * power_mp;
      power_mp = -power_mp;
    }
  }
}

// Axial translation along +z (zp) or -z (zm); the latter is the z-reflection
// conjugate of the former.
void m2l_axial_half(const HarmonicTables& tab, const std::complex<double>* M, int order,
                    double shat, double that, double h, bool toward_positive_z,
                    std::complex<double>* L) {
  std::array<double, kMaxOrder + 1> ps;
  ps[0] = 1.0;
  for (int i = 1; i <= order; ++i) ps[static_cast<size_t>(i)] = ps[static_cast<size_t>(i) - 1] * shat;
  double tj = 1.0 / h;
  for (int j = 0; j <= order; ++j) {
    for (int k = 0; k <= j; ++k) {
      std::complex<double> acc = 0.0;
      for (int n = k; n <= order; ++n) {
        double ph = toward_positive_z ? parity(n + k) : parity(j + k);
        acc += M[half_index(n, k)] * ph * ps[static_cast<size_t>(n)] *
               tab.sqrt_binomial(n + j, n - k) * tab.sqrt_binomial(n + j, n + k);
      }
      L[half_index(j, k)] = acc * tj;
    }
    tj *= that;
  }
}

void accumulate_full(const std::complex<double>* half, int order, Coeffs& out) {
  for (int j = 0; j <= order; ++j)
    for (int k = 0; k <= j; ++k) {
      std::complex<double> v = half[half_index(j, k)];
      out[static_cast<size_t>(coeff_index(j, k))] += v;
      if (k > 0) out[static_cast<size_t>(coeff_index(j, -k))] += parity(k) * std::conj(v);
    }
}

// One direction of a canonically oriented pair. t = c_src - c_tgt rotated by
// the frame lands on +z when standard_orientation, on -z otherwise.
void m2l_one_direction(const HarmonicTables& tab, const Coeffs& M, double src_scale,
                       Coeffs& L, double tgt_scale, double h, bool axial_only,
                       bool standard_orientation, bool positive_z, RotScratch& rs) {
  int Q = tab.order();
  double shat = src_scale / h, that = tgt_scale / h;
  half_from_full(M, Q, rs.ha.data());
  if (axial_only) {
    bool up = standard_orientation ? positive_z : !positive_z;
    m2l_axial_half(tab, rs.ha.data(), Q, shat, that, h, up, rs.hb.data());
    accumulate_full(rs.hb.data(), Q, L);
    return;
  }
  rotate_z_half(rs.ha.data(), Q, rs.ph.data());
  rotate_y_half(rs.ha.data(), rs.dp.data(), rs.off.data(), Q, rs.hb.data());
  m2l_axial_half(tab, rs.hb.data(), Q, shat, that, h, standard_orientation, rs.hc.data());
  rotate_y_half(rs.hc.data(), rs.dm.data(), rs.off.data(), Q, rs.hb.data());
  for (int n = 0; n <= Q; ++n) // undo the z twist
    for (int m = 1; m <= n; ++m) rs.hb[static_cast<size_t>(half_index(n, m))] *= std::conj(rs.ph[static_cast<size_t>(m)]);
  accumulate_full(rs.hb.data(), Q, L);
}

// Shared driver: pair canonically oriented by lexicographic center order so
// every rank builds the identical frame for a given pair of boxes.
void m2l_core(const HarmonicTables& tab, const Coeffs* Mi, Vec3 ci, double ai, Coeffs* Li,
              const Coeffs* Mj, Vec3 cj, double aj, Coeffs* Lj) {
  bool swapped = lex_less(cj, ci);
  Vec3 ca = swapped ? cj : ci, cb = swapped ? ci : cj;
  Vec3 t = ca - cb;
  double h = norm(t);
  if (h == 0.0) throw std::invalid_argument("m2l: coincident centers");
  bool axial_only = t.x == 0.0 && t.y == 0.0;
  bool positive_z = t.z > 0.0;
  RotScratch& rs = rot_scratch;
  if (!axial_only) {
    double proj = std::hypot(t.x, t.y);
    std::complex<double> eph(t.x / proj, t.y / proj);
    rs.ph[0] = 1.0;
    for (int m = 1; m <= tab.order(); ++m) rs.ph[static_cast<size_t>(m)] = rs.ph[static_cast<size_t>(m) - 1] * eph;
    generate_dmatrix(t.z / h, proj / h, tab.order(), rs);
  }
  // direction a -> b is the standard (+z) orientation of this frame
  const Coeffs* Ma = swapped ? Mj : Mi;
  Coeffs* La = swapped ? Lj : Li;
  double aa = swapped ? aj : ai;
  const Coeffs* Mb = swapped ? Mi : Mj;
  Coeffs* Lb = swapped ? Li : Lj;
  double ab = swapped ? ai : aj;
  if (Ma && Lb) m2l_one_direction(tab, *Ma, aa, *Lb, ab, h, axial_only, true, positive_z, rs);
  if (Mb && La) m2l_one_direction(tab, *Mb, ab, *La, aa, h, axial_only, false, positive_z, rs);
}

} // namespace

void m2l_rotated(const HarmonicTables& tab, const Coeffs& M, Vec3 source_center,
                 double source_scale, Coeffs& L, Vec3 target_center, double target_scale) {
  m2l_core(tab, &M, source_center, source_scale, nullptr, nullptr, target_center, target_scale,
           &L);
}

void m2l_pair(const HarmonicTables& tab, const Coeffs& Mi, Vec3 ci, double ai, Coeffs& Li,
              const Coeffs& Mj, Vec3 cj, double aj, Coeffs& Lj) {
  m2l_core(tab, &Mi, ci, ai, &Li, &Mj, cj, aj, &Lj);
}

PrecisionPolicy choose_order(double tol, double theta, double bound_constant) {
  if (!(theta > 0.0) || !(theta < 1.0))
    throw std::invalid_argument("choose_order: theta must lie in (0,1)");
  if (!(tol > 0.0)) throw std::invalid_argument("choose_order: tol must be positive");
  if (!(bound_constant > 0.0))
    throw std::invalid_argument("choose_order: bound constant must be positive");
  double denom = (1.0 - theta) * (1.0 - theta);
  double bound = bound_constant * theta / denom;
  for (int q = 0; q <= kMaxOrder; ++q) {
    if (bound <= tol) return {q, false, bound};
    bound *= theta;
  }
  return {kMaxOrder, true, bound / theta};
}

} // namespace fmm
