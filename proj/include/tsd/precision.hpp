#pragma once

// The library is compiled once per floating-point precision. Each build lives
// in its own inline namespace so a float32 and a float64 build can be linked
// into the same executable (the gradient suites run both).

#ifdef TSD_DOUBLE
#define TSD_PRECISION_NS f64
#else
#define TSD_PRECISION_NS f32
#endif

#define TSD_NAMESPACE_BEGIN \
  namespace tsd {           \
  inline namespace TSD_PRECISION_NS {
#define TSD_NAMESPACE_END \
  }                       \
  }

TSD_NAMESPACE_BEGIN

#ifdef TSD_DOUBLE
using Real = double;
#else
using Real = float;
#endif

TSD_NAMESPACE_END
