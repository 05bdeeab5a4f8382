#include "tsd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tsd/kink.hpp"
#include "tsd/rng.hpp"

TSD_NAMESPACE_BEGIN

GradCheckResult finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  for (auto& p : params) {
    if (!p.requires_grad() || p.has_graph()) {
      throw std::invalid_argument("finite_difference_check: parameters must be gradient-bearing leaves");
    }
    p.zero_grad();
  }
  Tensor loss;
  std::uint64_t base_signature = 0;
  {
    KinkMonitor monitor;
    loss = f();
    base_signature = monitor.signature();
  }
  loss.backward();
  auto eval = [&](std::uint64_t& signature) {
    KinkMonitor monitor;
    const double v = f().item();
    signature = monitor.signature();
    return v;
  };

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t i : coords) {
      const Real saved = p.data()[i];
      // Divide by the step actually representable in Real, not the nominal 2·eps.
      const Real hi = saved + options.eps;
      const Real lo = saved - options.eps;
      std::uint64_t sig_plus = 0, sig_minus = 0;
      p.mutable_data()[i] = hi;
      const double plus = eval(sig_plus);
      p.mutable_data()[i] = lo;
      const double minus = eval(sig_minus);
      p.mutable_data()[i] = saved;
      if (options.skip_kink_crossings && (sig_plus != base_signature || sig_minus != base_signature)) {
        ++result.coords_skipped;
        continue;
      }
      const double numeric = (plus - minus) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double analytic = p.grad()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double err = std::abs(analytic - numeric) / denom;
      ++result.coords_checked;
      if (err >= result.max_relative_error) {
        result.max_relative_error = err;
        std::ostringstream os;
        os << "param" << pi << "[" << i << "]: analytic " << analytic << " vs numeric " << numeric;
        result.worst = os.str();
      }
    }
  }
  return result;
}

TSD_NAMESPACE_END
