#pragma once

#include <cstdint>

#include "fmm/direct.hpp"

// The near-field kernels compiled per instruction set; direct.cpp picks the
// widest variant the CPU supports when the first sweep runs. Every variant
// performs the identical sequence of IEEE operations, so the choice never
// changes a result, only the speed.
namespace fmm::kern_generic {
double p2p_range_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                      std::uint32_t e, double* w);
double p2p_range_nx_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                         std::uint32_t e, double* w);
void p2p_mutual_impl(const PackedPoints& pts, std::uint32_t ab, std::uint32_t ae,
                     std::uint32_t bb, std::uint32_t be, double* phi, double* w);
} // namespace fmm::kern_generic

namespace fmm::kern_avx2 {
double p2p_range_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                      std::uint32_t e, double* w);
double p2p_range_nx_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                         std::uint32_t e, double* w);
void p2p_mutual_impl(const PackedPoints& pts, std::uint32_t ab, std::uint32_t ae,
                     std::uint32_t bb, std::uint32_t be, double* phi, double* w);
} // namespace fmm::kern_avx2

namespace fmm::kern_avx512 {
double p2p_range_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                      std::uint32_t e, double* w);
double p2p_range_nx_impl(Vec3 t, std::int64_t tid, const PackedPoints& src, std::uint32_t b,
                         std::uint32_t e, double* w);
void p2p_mutual_impl(const PackedPoints& pts, std::uint32_t ab, std::uint32_t ae,
                     std::uint32_t bb, std::uint32_t be, double* phi, double* w);
} // namespace fmm::kern_avx512
