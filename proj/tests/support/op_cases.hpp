#pragma once

// Every differentiable numcore op with input shapes and sampling ranges for
// the finite-difference checks.

#include <span>
#include <vector>

#include "opcrash/numcore/ops.hpp"
#include "support/gradcheck.hpp"

namespace opcrash::testing {

using namespace opcrash::numcore;

struct OpCase {
  const char* name;
  std::vector<numcore::Shape> shapes;
  opcrash::testing::GraphFn fn;
  double lo = -1.0, hi = 1.0;
};

inline std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {{3, 4}, {4, 2}}, [](const V& v) { return matmul(v[0], v[1]); }});
  cases.push_back({"matmul_tn", {{4, 3}, {4, 2}}, [](const V& v) { return matmul_tn(v[0], v[1]); }});
  cases.push_back({"matmul_nt", {{3, 4}, {2, 4}}, [](const V& v) { return matmul_nt(v[0], v[1]); }});
  cases.push_back({"transpose", {{3, 2}}, [](const V& v) { return transpose(v[0]); }});
  cases.push_back({"linear", {{3, 4}, {4, 5}, {1, 5}},
                   [](const V& v) { return linear(v[0], v[1], v[2]); }});
  cases.push_back({"add", {{2, 3}, {2, 3}}, [](const V& v) { return add(v[0], v[1]); }});
  cases.push_back({"sub", {{2, 3}, {2, 3}}, [](const V& v) { return sub(v[0], v[1]); }});
  cases.push_back({"mul", {{2, 3}, {2, 3}}, [](const V& v) { return mul(v[0], v[1]); }});
  cases.push_back({"affine", {{2, 3}}, [](const V& v) { return affine(v[0], -1.5, 0.25); }});
  cases.push_back({"scale_cols", {{3, 3}}, [](const V& v) {
                     const double f[3] = {2.0, -0.5, 3.0};
                     return scale_cols(v[0], std::span<const double>(f, 3));
                   }});
  cases.push_back({"mul_scalar", {{1, 1}, {3, 2}}, [](const V& v) { return mul_scalar(v[0], v[1]); }});
  cases.push_back({"sigmoid", {{2, 4}}, [](const V& v) { return sigmoid(v[0]); }, -3, 3});
  cases.push_back({"gelu", {{2, 4}}, [](const V& v) { return gelu(v[0]); }, -3, 3});
  cases.push_back({"softmax_rows", {{3, 5}}, [](const V& v) { return softmax(v[0], 1); }, -2, 2});
  cases.push_back({"softmax_cols", {{5, 3}}, [](const V& v) { return softmax(v[0], 0); }, -2, 2});
  cases.push_back({"column_normalize", {{4, 3}}, [](const V& v) { return column_normalize(v[0]); },
                   0.2, 2.0});
  cases.push_back({"layer_norm", {{3, 5}, {1, 5}, {1, 5}},
                   [](const V& v) { return layer_norm(v[0], v[1], v[2]); }, -2, 2});
  cases.push_back({"slice_cols", {{3, 5}}, [](const V& v) { return slice_cols(v[0], 1, 3); }});
  cases.push_back({"concat_cols", {{3, 2}, {3, 1}},
                   [](const V& v) { return concat_cols<double>({v[0], v[1], v[0]}); }});
  cases.push_back({"concat_rows", {{2, 3}, {1, 3}},
                   [](const V& v) { return concat_rows<double>({v[0], v[1]}); }});
  cases.push_back({"sum", {{3, 2}}, [](const V& v) { return sum(v[0]); }});
  cases.push_back({"sum_squares", {{3, 2}}, [](const V& v) { return sum_squares(v[0]); }});
  cases.push_back({"l2_norm", {{3, 2}}, [](const V& v) { return l2_norm(v[0]); }});
  cases.push_back({"attention", {{5, 4}, {7, 4}, {7, 6}},
                   [](const V& v) { return attention(v[0], v[1], v[2], 2); }, -1.5, 1.5});
  return cases;
}

}  // namespace opcrash::testing
