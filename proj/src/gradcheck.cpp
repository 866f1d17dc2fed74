#include "avm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace avm {

namespace {

void check_tensor(const std::function<Tensor64()>& f, Tensor64& x, const std::vector<double>& analytic, double eps,
                  std::size_t max_coords, std::size_t param, FiniteDiffReport& worst) {
  auto values = x.mutable_data();
  const std::size_t n = values.size();
  const std::size_t stride = (max_coords == 0 || max_coords >= n) ? 1 : n / max_coords;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; i += stride) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = f().item();
    values[i] = saved - eps;
    const double minus = f().item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    if (err > worst.error) worst = {err, param, i, analytic[i], numeric};
  }
}

Tensor64 scalar_or_throw(const Tensor64& out) {
  if (out.numel() != 1) {
    throw ShapeError("finite_diff_check: function must be scalar-valued, got shape " + shape_str(out.shape()));
  }
  return out;
}

}  // namespace

double finite_diff_check(const std::function<Tensor64(const Tensor64&)>& f, Tensor64 x, double eps,
                         std::size_t max_coords) {
  if (!(eps > 0)) throw ParameterError("finite_diff_check: eps must be positive");
  return finite_diff_check_params([&] { return f(x); }, {x}, eps, max_coords);
}

double finite_diff_check_params(const std::function<Tensor64()>& f, std::vector<Tensor64> params, double eps,
                                std::size_t max_coords_per_param) {
  return finite_diff_report(f, std::move(params), eps, max_coords_per_param).error;
}

FiniteDiffReport finite_diff_report(const std::function<Tensor64()>& f, std::vector<Tensor64> params, double eps,
                                    std::size_t max_coords_per_param) {
  if (!(eps > 0)) throw ParameterError("finite_diff_check: eps must be positive");
  std::vector<bool> restore(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    restore[i] = params[i].requires_grad();
    params[i].set_requires_grad(true);
    params[i].zero_grad();
  }
  scalar_or_throw(f()).backward();
  FiniteDiffReport worst;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> analytic(params[i].numel(), 0.0);
    if (params[i].has_grad()) std::copy(params[i].grad().begin(), params[i].grad().end(), analytic.begin());
    check_tensor(f, params[i], analytic, eps, max_coords_per_param, i, worst);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].zero_grad();
    params[i].set_requires_grad(restore[i]);
  }
  return worst;
}

FiniteDiffReport finite_diff_report_extended(const std::function<Tensor64()>& f, std::vector<Tensor64> params,
                                             const std::function<TensorExt()>& f_ext,
                                             std::vector<TensorExt> ext_params, double eps,
                                             std::size_t max_coords_per_param) {
  if (!(eps > 0)) throw ParameterError("finite_diff_check: eps must be positive");
  if (params.size() != ext_params.size()) {
    throw ShapeError("finite_diff_check: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(ext_params.size()) + " extended mirrors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != ext_params[i].shape()) {
      throw ShapeError("finite_diff_check: mirror " + std::to_string(i) + " has shape " +
                       shape_str(ext_params[i].shape()) + ", expected " + shape_str(params[i].shape()));
    }
    const auto src = params[i].data();
    std::copy(src.begin(), src.end(), ext_params[i].mutable_data().begin());
  }

  std::vector<bool> restore(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    restore[i] = params[i].requires_grad();
    params[i].set_requires_grad(true);
    params[i].zero_grad();
  }
  scalar_or_throw(f()).backward();

  FiniteDiffReport worst;
  NoGradGuard no_grad;
  const long double h = eps;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> analytic(params[p].numel(), 0.0);
    if (params[p].has_grad()) std::copy(params[p].grad().begin(), params[p].grad().end(), analytic.begin());
    auto values = ext_params[p].mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride =
        (max_coords_per_param == 0 || max_coords_per_param >= n) ? 1 : n / max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const long double saved = values[i];
      values[i] = saved + h;
      const long double plus = f_ext().item();
      values[i] = saved - h;
      const long double minus = f_ext().item();
      values[i] = saved;
      const double numeric = static_cast<double>((plus - minus) / (2 * h));
      const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
      if (err > worst.error) worst = {err, p, i, analytic[i], numeric};
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].zero_grad();
    params[i].set_requires_grad(restore[i]);
  }
  return worst;
}

}  // namespace avm
