#include <map>

#include "doctest.h"
#include "mkfa/gradcheck.hpp"

using namespace mkfa;

#ifndef SEED
#define SEED 1
#endif

TEST_CASE("op-level gradient suite passes and covers every op") {
  const auto results = run_gradcheck_suite(SEED, 5, 1e-5);
  std::map<std::string, int> per_op;
  for (const auto& r : results) {
    INFO(r.name, " ", r.shape, " ", r.report.worst, " err=", r.report.max_rel_error, " ad=", r.report.worst_analytic, " fd=", r.report.worst_numeric);
    CHECK(r.report.passed);
    CHECK(r.report.coordinates > 0);
    ++per_op[r.name];
  }
  for (const char* op : {"conv2d", "conv2d_depthwise7", "silu", "gelu", "sigmoid", "relu", "norm_channels",
                         "split_concat", "spatial_mean", "linear", "cross_entropy_smoothed", "sum", "mf_scale",
                         "mf_scale_two_param", "se_forward", "stem_forward", "mka_forward.multi_dw7",
                         "mfa_forward.ffn_mf.literal_dc"}) {
    CHECK_MESSAGE(per_op[op] == 5, op);
  }
}
