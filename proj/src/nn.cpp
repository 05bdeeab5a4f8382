#include "tsd/nn.hpp"

#include <stdexcept>

TSD_NAMESPACE_BEGIN

void ParamSet::add(std::string name, Tensor tensor) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name " + name);
  if (!tensor.requires_grad()) throw std::invalid_argument("parameter " + name + " does not require grad");
  items_.push_back({std::move(name), std::move(tensor)});
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

LinearLayer LinearLayer::uniform(int in, int out, double bound, Rng& rng) {
  return {uniform_tensor({out, in}, bound, rng), Tensor::zeros({out}, true)};
}

LinearLayer LinearLayer::zeros(int in, int out) { return {Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)}; }

void LinearLayer::register_params(ParamSet& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

Conv2dLayer Conv2dLayer::uniform(int in, int out, int kernel, int stride, double bound, Rng& rng) {
  return {uniform_tensor({out, kernel, kernel, in}, bound, rng), Tensor::zeros({out}, true), stride, kernel / 2};
}

void Conv2dLayer::register_params(ParamSet& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

TSD_NAMESPACE_END
