#pragma once

// Plain serial implementations used as independent oracles for the OpenMP
// kernels. Deliberately written from the textbook definitions; nothing here
// calls into the parallel kernel code.

#include "patchsim/tensor.hpp"

#include <vector>

namespace patchsim::ref {

Tensor conv2d_serial(const Tensor& x, const Tensor& weight, const std::vector<float>& bias,
                     int stride, int pad);

// Token matrices as (n,1,tokens,features), same convention as the kernels.
Tensor matmul_serial(const Tensor& tokens, const Tensor& weight, const std::vector<float>& bias);

Tensor attention_serial(const Tensor& q, const Tensor& k, const Tensor& v, float scale);

// Direct per-(sample,group) sums.
GnStats group_stats_serial(const Tensor& x, int groups);

// Direct formula (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor group_norm_serial(const Tensor& x, const GnStats& stats, const std::vector<float>& gamma,
                         const std::vector<float>& beta, float eps);

double mse_serial(const Tensor& a, const Tensor& b);

}  // namespace patchsim::ref
