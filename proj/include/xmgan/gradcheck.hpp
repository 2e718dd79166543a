#pragma once

#include <functional>
#include <vector>

#include "xmgan/tensor.hpp"

namespace xmgan {

// Central-difference check of reverse-mode gradients.
//
// Returns max_i |g_auto_i - g_fd_i| / max(1, |g_fd_i|). `f` must map its
// argument to a scalar and is evaluated once on a tape and 2 * numel(x) times
// without one. Throws NumericError if f(x) is not finite.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// Same check for a closure over a set of parameter tensors that are perturbed
// in place. At most `max_coords` coordinates per tensor are probed, spread
// evenly over the tensor; 0 probes all of them.
double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                         std::size_t max_coords = 0);

struct GradCheckReport {
  double max_rel_error = 0.0;  // over differentiable coordinates
  std::size_t probed = 0;
  // Coordinates whose interval [x-h, x+h] contains a kink (e.g. a ReLU switching
  // sign): the one-sided slopes (f(x+h)-f(x))/h and (f(x)-f(x-h))/h differ by
  // more than 1e-3 * max(1, |central difference|). Central differences are not
  // a derivative estimate there, so these are counted instead of compared.
  std::size_t kinks = 0;
};
GradCheckReport grad_check_report(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5,
                                  std::size_t max_coords = 0);

}  // namespace xmgan
