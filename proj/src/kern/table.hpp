#pragma once

#include <cstdint>

// Function-pointer table for the dispatched float32 kernels. scalar.cpp and
// avx2.cpp each export one instance; dispatch.cpp selects at startup.
namespace divot::kern::detail {

struct F32Table {
  void (*gemm)(const float*, const float*, float*, int, int, int, bool);
  void (*vexp)(const float*, float*, int64_t);
  void (*vtanh)(const float*, float*, int64_t);
  void (*vgelu)(const float*, float*, int64_t);
  void (*tanh_bwd)(const float*, const float*, float*, int64_t);
  void (*gelu_bwd)(const float*, const float*, float*, int64_t);
  void (*vadd)(const float*, const float*, float*, int64_t);
  void (*vmul)(const float*, const float*, float*, int64_t);
  void (*axpy)(float, const float*, float*, int64_t);
  void (*softmax_rows)(const float*, float*, int, int);
  void (*softmax_bwd_rows)(const float*, const float*, float*, int, int);
  void (*logsumexp_rows)(const float*, float*, int, int);
  void (*layernorm_rows)(const float*, const float*, const float*, float*, float*, float*, int, int, float);
  void (*layernorm_bwd_rows)(const float*, const float*, const float*, const float*, const float*, float*, float*, float*, int, int);
};

extern const F32Table kScalarTable;
extern const F32Table kAvx2Table;

}  // namespace divot::kern::detail
