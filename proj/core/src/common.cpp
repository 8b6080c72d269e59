#include "ucil/common.hpp"

namespace ucil {

void set_num_threads(int threads) {
  if (threads < 1) throw ValidationError("thread count must be >= 1");
  Eigen::setNbThreads(threads);
}

int num_threads() { return Eigen::nbThreads(); }

}  // namespace ucil
