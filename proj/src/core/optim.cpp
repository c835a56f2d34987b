#include "optim.hpp"

#include <cmath>

#include "log.hpp"

namespace xs {

AdamReport adam_update(ParameterSet& params, const AdamSettings& s) {
  AdamReport report;
  for (auto& p : params.parameters()) {
    if (!p.value.has_grad()) {
      report.skipped.push_back(p.name);
      continue;
    }
    auto& mom = p.moments;
    const std::size_t n = p.value.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0f);
      mom.v.assign(n, 0.0f);
    }
    ++mom.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(mom.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(mom.step));
    const float b1 = static_cast<float>(s.beta1), b2 = static_cast<float>(s.beta2);
    const float step = static_cast<float>(s.learning_rate / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(s.eps);
    auto w = p.value.mutable_data();
    auto g = p.value.grad();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = b1 * mom.m[i] + (1 - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (1 - b2) * g[i] * g[i];
      w[i] -= step * mom.m[i] / (std::sqrt(mom.v[i]) * inv_sqrt_bc2 + eps);
    }
    ++report.updated;
  }
  if (!report.skipped.empty() && report.updated > 0) {
    log_warning(params.name() + ": " + std::to_string(report.skipped.size()) +
                " parameter(s) without gradient skipped, first: " + report.skipped.front());
  }
  if (report.updated > 0) params.bump_update_counter();
  params.clear_grads();
  return report;
}

}  // namespace xs
