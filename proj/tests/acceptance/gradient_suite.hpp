#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsd/precision.hpp"

// Precision-neutral report types so one binary can run the float32 and the
// float64 builds of the suite side by side.
namespace tsd_acceptance {

struct OpCheck {
  std::string op;
  double max_relative_error = 0;
  int points = 0;
  std::size_t coords = 0;
  std::size_t skipped = 0;  // coordinates whose step crossed a kink
  std::string worst;
};

struct GradientSuiteReport {
  std::string precision;
  double tolerance = 0;
  double seconds = 0;
  std::vector<OpCheck> ops;

  bool passed() const {
    for (const auto& op : ops) {
      if (!(op.max_relative_error < tolerance)) return false;
    }
    return !ops.empty();
  }
};

}  // namespace tsd_acceptance

// One declaration per precision build; the build matching this translation
// unit is the inline namespace.
TSD_NAMESPACE_BEGIN
tsd_acceptance::GradientSuiteReport run_gradient_suite(int points, std::uint64_t seed);
TSD_NAMESPACE_END

#ifdef TSD_DOUBLE
namespace tsd::f32 {
#else
namespace tsd::f64 {
#endif
tsd_acceptance::GradientSuiteReport run_gradient_suite(int points, std::uint64_t seed);
}
