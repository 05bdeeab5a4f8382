#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "tsd/precision.hpp"

TSD_NAMESPACE_BEGIN

// While a KinkMonitor is alive on this thread, piecewise ops report each input
// as (distance to the nearest non-differentiable point, which piece it is on).
// The piece sequence is folded into a signature: two evaluations with equal
// signatures lie on the same smooth piece of the function.
class KinkMonitor {
 public:
  KinkMonitor() : previous_(active_) { active_ = this; }
  ~KinkMonitor() { active_ = previous_; }
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  double nearest() const { return nearest_; }
  std::uint64_t signature() const { return signature_; }

  static void note(double distance, std::int64_t piece) {
    if (!active_) return;
    active_->nearest_ = std::min(active_->nearest_, std::abs(distance));
    std::uint64_t h = active_->signature_ ^ static_cast<std::uint64_t>(piece);
    h *= 0x100000001b3ULL;
    active_->signature_ = h ^ (h >> 29);
  }
  static void note_lattice(double v) {
    if (active_) note(v - std::round(v), static_cast<std::int64_t>(std::floor(v)));
  }

 private:
  inline static thread_local KinkMonitor* active_ = nullptr;
  KinkMonitor* previous_;
  double nearest_ = std::numeric_limits<double>::infinity();
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

TSD_NAMESPACE_END
