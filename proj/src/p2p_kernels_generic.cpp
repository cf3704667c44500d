#define FMM_KERNEL_NS kern_generic
#include "p2p_kernels.inc"
