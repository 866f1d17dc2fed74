#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "avm/tensor.hpp"

namespace avm {

// Central-difference gradient check in 64-bit mode. Returns the maximum over
// checked coordinates of |analytic - numeric| / max(1e-8, |numeric|).
//
// `f` must return a scalar and read `x` through the graph. When `max_coords`
// is nonzero only an evenly strided subset of coordinates is probed.
double finite_diff_check(const std::function<Tensor64(const Tensor64&)>& f, Tensor64 x, double eps = 1e-5,
                         std::size_t max_coords = 0);

// Same check against a closure that captures its parameters; each tensor in
// `params` is perturbed in place and restored. Returns the worst error over
// all of them.
double finite_diff_check_params(const std::function<Tensor64()>& f, std::vector<Tensor64> params,
                                double eps = 1e-5, std::size_t max_coords_per_param = 0);

// Where the worst error of a check was found.
struct FiniteDiffReport {
  double error = 0.0;
  std::size_t param = 0;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

FiniteDiffReport finite_diff_report(const std::function<Tensor64()>& f, std::vector<Tensor64> params,
                                    double eps = 1e-5, std::size_t max_coords_per_param = 0);

using TensorExt = BasicTensor<long double>;

// Analytic gradients from `f` in 64-bit; difference quotients from `f_ext`,
// the same function built over `ext_params` in extended precision. The
// extended parameters are overwritten with the 64-bit values first. The
// quotient's roundoff drops by the width of the wider mantissa, so
// coordinates whose true gradient is exactly zero no longer read as a few
// ulp(f) / eps.
FiniteDiffReport finite_diff_report_extended(const std::function<Tensor64()>& f, std::vector<Tensor64> params,
                                             const std::function<TensorExt()>& f_ext,
                                             std::vector<TensorExt> ext_params, double eps = 1e-6,
                                             std::size_t max_coords_per_param = 0);

}  // namespace avm
