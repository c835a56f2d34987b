#pragma once

#include <string>
#include <vector>

#include "networks.hpp"

namespace xs {

struct AdamSettings {
  double learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamReport {
  std::size_t updated = 0;
  // Parameters left untouched because their gradient was absent.
  std::vector<std::string> skipped;
};

/// One bias-corrected Adam step over every parameter of the set that carries
/// a gradient, then clears all gradients of the set.
AdamReport adam_update(ParameterSet& params, const AdamSettings& settings);

}  // namespace xs
