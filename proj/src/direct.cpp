#include "fmm/direct.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "fmm/wire.hpp"
#include "p2p_kernels.hpp"

namespace fmm {

std::vector<double> brute_force_self(std::span<const Source> sources) {
  std::size_t n = sources.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dx = sources[i].position.x - sources[j].position.x;
      double dy = sources[i].position.y - sources[j].position.y;
      double dz = sources[i].position.z - sources[j].position.z;
      double d2 = dx * dx + dy * dy + dz * dz;
      acc += sources[j].mass / std::sqrt(d2);
    }
    out[i] = acc;
  }
  return out;
}

std::vector<double> brute_force_at(std::span<const Source> sources,
                                   std::span<const TargetPoint> targets) {
  std::vector<double> out(targets.size(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double acc = 0.0;
    for (const Source& s : sources) {
      double dx = targets[i].position.x - s.position.x;
      double dy = targets[i].position.y - s.position.y;
      double dz = targets[i].position.z - s.position.z;
      double d2 = dx * dx + dy * dy + dz * dz;
      acc += s.mass / std::sqrt(d2);
    }
    out[i] = acc;
  }
  return out;
}

void PackedPoints::append(const Source& s) {
  x.push_back(s.position.x);
  y.push_back(s.position.y);
  z.push_back(s.position.z);
  m.push_back(s.mass);
  id.push_back(s.global_id);
}

void PackedPoints::append_anonymous(Vec3 p, double mass) {
  x.push_back(p.x);
  y.push_back(p.y);
  z.push_back(p.z);
  m.push_back(mass);
  id.push_back(-1);
}

void PackedPoints::clear() {
  x.clear();
  y.clear();
  z.clear();
  m.clear();
  id.clear();
}

namespace {

using RangeFn = double (*)(Vec3, std::int64_t, const PackedPoints&, std::uint32_t, std::uint32_t,
                           double*);
using MutualFn = void (*)(const PackedPoints&, std::uint32_t, std::uint32_t, std::uint32_t,
                          std::uint32_t, double*, double*);

RangeFn pick_range() {
#ifdef FMM_X86_KERNEL_VARIANTS
  if (__builtin_cpu_supports("avx512f")) return kern_avx512::p2p_range_impl;
  if (__builtin_cpu_supports("avx2")) return kern_avx2::p2p_range_impl;
#endif
  return kern_generic::p2p_range_impl;
}

RangeFn pick_range_nx() {
#ifdef FMM_X86_KERNEL_VARIANTS
  if (__builtin_cpu_supports("avx512f")) return kern_avx512::p2p_range_nx_impl;
  if (__builtin_cpu_supports("avx2")) return kern_avx2::p2p_range_nx_impl;
#endif
  return kern_generic::p2p_range_nx_impl;
}

MutualFn pick_mutual() {
#ifdef FMM_X86_KERNEL_VARIANTS
  if (__builtin_cpu_supports("avx512f")) return kern_avx512::p2p_mutual_impl;
  if (__builtin_cpu_supports("avx2")) return kern_avx2::p2p_mutual_impl;
#endif
  return kern_generic::p2p_mutual_impl;
}

} // namespace

double p2p_range(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                 std::uint32_t e, double* w) {
  static const RangeFn f = pick_range();
  return f(t, tid, src, b, e, w);
}

double p2p_range_nx(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                    std::uint32_t e, double* w) {
  static const RangeFn f = pick_range_nx();
  return f(t, tid, src, b, e, w);
}

void p2p_mutual(const PackedPoints& pts, std::uint32_t ab, std::uint32_t ae, std::uint32_t bb,
                std::uint32_t be, double* phi, double* w) {
  static const MutualFn f = pick_mutual();
  f(pts, ab, ae, bb, be, phi, w);
}

void write_potentials(const std::string& path, std::span<const double> phi) {
  std::vector<std::uint8_t> buf;
  buf.reserve(12 + 8 * phi.size());
  buf.insert(buf.end(), {'F', 'M', 'M', 'P'});
  wire::put_u64(buf, phi.size());
  for (double v : phi) wire::put_f64(buf, v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("direct: cannot open " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("direct: write failed: " + path);
}

std::vector<double> read_potentials(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("direct: cannot open " + path);
  in.seekg(0, std::ios::end);
  auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> data(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(data.data()), size);
  if (!in) throw std::runtime_error("direct: read failed: " + path);
  if (data.size() < 12 || data[0] != 'F' || data[1] != 'M' || data[2] != 'M' ||
      data[3] != 'P')
    throw std::runtime_error("direct: not a potential file: " + path);
  wire::Reader r(data.data() + 4, data.size() - 4);
  std::uint64_t n = r.u64();
  if (r.remaining() != 8 * n)
    throw std::runtime_error("direct: corrupt potential file: " + path);
  std::vector<double> out(n);
  for (std::uint64_t i = 0; i < n; ++i) out[i] = r.f64();
  return out;
}

} // namespace fmm
