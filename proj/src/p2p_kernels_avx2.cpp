#define FMM_KERNEL_NS kern_avx2
#include "p2p_kernels.inc"
