#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace xs {

/// One gradient-check scenario: leaf inputs (requires_grad set) and the map
/// under test. `op` names the registry entry it covers.
template <typename T>
struct GradCase {
  std::string op;
  std::string label;
  std::vector<Tensor<T>> inputs;
  std::function<Tensor<T>(const std::vector<Tensor<T>>&)> fn;
};

/// Ops the gradient suite must cover: every tensor op plus the warp.
const std::vector<std::string>& gradient_registry();

/// Three or more cases per registry entry, inputs drawn away from kinks so
/// central differences are meaningful.
template <typename T>
std::vector<GradCase<T>> gradient_cases(std::uint64_t seed);

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
};

using CheckCallback = std::function<void(const CheckResult&)>;

/// subset: "grad", "invariants", "oracle" or "all". Results are reported in
/// order through the callback and returned.
std::vector<CheckResult> run_checks(const std::string& subset, const CheckCallback& callback = {},
                                    std::uint64_t seed = 1);

bool valid_check_subset(const std::string& subset);

}  // namespace xs
