#define FMM_KERNEL_NS kern_avx512
#include "p2p_kernels.inc"
