#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tsd/ops.hpp"
#include "tsd/rng.hpp"

TSD_NAMESPACE_BEGIN

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Ordered registry of trainable tensors. Tensors are shared handles, so the
// registry aliases the layers that own them.
class ParamSet {
 public:
  void add(std::string name, Tensor tensor);
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam>& items() { return items_; }
  const Tensor* find(const std::string& name) const;
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<NamedParam> items_;
};

struct LinearLayer {
  Tensor weight;  // [out×in]
  Tensor bias;    // [out]

  // Weights uniform in [−bound, bound], bias zero.
  static LinearLayer uniform(int in, int out, double bound, Rng& rng);
  static LinearLayer zeros(int in, int out);

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  void register_params(ParamSet& params, const std::string& prefix) const;
};

struct Conv2dLayer {
  Tensor weight;  // [out×k×k×in]
  Tensor bias;
  int stride = 1;
  int padding = 1;

  static Conv2dLayer uniform(int in, int out, int kernel, int stride, double bound, Rng& rng);

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void register_params(ParamSet& params, const std::string& prefix) const;
};

// Fan-in bounds: relu_bound keeps activation variance through a ReLU layer.
inline double relu_bound(int fan_in) { return std::sqrt(6.0 / fan_in); }
inline double linear_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

TSD_NAMESPACE_END
