#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace avm {

inline constexpr double kPrimitiveGradTolerance = 1e-4;
inline constexpr double kCompositeGradTolerance = 1e-3;

struct GradCheckResult {
  std::string name;
  bool composite = false;  // layers, losses, and whole presets
  double error = 0.0;      // worst relative error
  double tolerance = 0.0;
  std::string worst;       // "input 2 [17]: analytic ..., numeric ..."

  bool passed() const { return error < tolerance; }
};

// Finite-difference checks in 64-bit mode for every differentiable op, the
// layers and losses built from them, and each preset at micro widths.
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 7);

}  // namespace avm
