#include "xmgan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "xmgan/errors.hpp"

namespace xmgan {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  return grad_check_params([&] { return f(probe); }, {probe}, h, 0);
}

double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                         std::size_t max_coords) {
  return grad_check_report(f, std::move(params), h, max_coords).max_rel_error;
}

GradCheckReport grad_check_report(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                                  std::size_t max_coords) {
  std::vector<std::vector<double>> saved_grads;
  for (auto& p : params) {
    if (!p.requires_grad() || !p.is_leaf()) throw ContractError("grad_check: parameters must be leaves with gradients");
    saved_grads.push_back(p.grad());
    p.zero_grad();
  }

  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: function value is not finite");
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  const double f0 = evaluate(f);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    const std::size_t n = data.size();
    const std::size_t probes = (max_coords == 0 || max_coords >= n) ? n : max_coords;
    for (std::size_t j = 0; j < probes; ++j) {
      const std::size_t i = probes == n ? j : (j * n) / probes + (n / probes) / 2;
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = evaluate(f);
      data[i] = orig - h;
      const double fm = evaluate(f);
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double scale = std::max(1.0, std::abs(fd));
      ++report.probed;
      if (std::abs((fp - f0) / h - (f0 - fm) / h) > 1e-3 * scale) {
        ++report.kinks;
        continue;
      }
      report.max_rel_error = std::max(report.max_rel_error, std::abs(analytic[k][i] - fd) / scale);
    }
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = params[k].mutable_grad();
    std::copy(saved_grads[k].begin(), saved_grads[k].end(), g.begin());
  }
  return report;
}

}  // namespace xmgan
