#include "hyseq/common.hpp"

extern "C" void openblas_set_num_threads(int);

namespace hyseq {

void runtime_init(int threads) {
    if (threads < 1) threads = 1;
    openblas_set_num_threads(threads);
}

}  // namespace hyseq
