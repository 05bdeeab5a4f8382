#include "tsd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "tsd/bilinear.hpp"
#include "tsd/kink.hpp"

TSD_NAMESPACE_BEGIN

namespace {

using detail::make_result;
using detail::Node;
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;

using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

MatMap as_matrix(Buffer& v, int rows, int cols) { return {v.data(), rows, cols}; }
Eigen::Map<const RowVec> as_row(const Buffer& v) { return {v.data(), static_cast<Eigen::Index>(v.size())}; }
Eigen::Map<RowVec> as_row(Buffer& v) { return {v.data(), static_cast<Eigen::Index>(v.size())}; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Elementwise unary op whose derivative depends only on the input value.
template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D df) {
  const auto& in = x.data();
  Buffer out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), f);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * df(p.value[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Buffer out(static_cast<std::size_t>(m) * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.node()->value, m, k) * as_matrix(b.node()->value, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto g = as_matrix(self.grad, m, n);
    if (pa.requires_grad) as_matrix(pa.grad, m, k).noalias() += g * as_matrix(pb.value, k, n).transpose();
    if (pb.requires_grad) as_matrix(pb.grad, k, n).noalias() += as_matrix(pa.value, m, k).transpose() * g;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in || bias.numel() != static_cast<std::size_t>(out_dim)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                     ", bias " + shape_str(bias.shape()));
  }
  Buffer out(static_cast<std::size_t>(rows) * out_dim);
  auto y = as_matrix(out, rows, out_dim);
  y.noalias() = as_matrix(x.node()->value, rows, in) * as_matrix(weight.node()->value, out_dim, in).transpose();
  y.rowwise() += as_row(std::as_const(bias.node()->value));
  return make_result({rows, out_dim}, std::move(out), {x, weight, bias}, [rows, in, out_dim](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    auto g = as_matrix(self.grad, rows, out_dim);
    if (px.requires_grad) as_matrix(px.grad, rows, in).noalias() += g * as_matrix(pw.value, out_dim, in);
    if (pw.requires_grad) {
      as_matrix(pw.grad, out_dim, in).noalias() += g.transpose() * as_matrix(px.value, rows, in);
    }
    if (pb.requires_grad) as_row(pb.grad) += g.colwise().sum();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(a, [factor](Real v) { return v * factor; }, [factor](Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real value) {
  return unary(a, [value](Real v) { return v + value; }, [](Real) { return Real(1); });
}

Tensor mul_const(const Tensor& a, std::span<const Real> factors) {
  if (factors.size() != a.numel()) {
    throw ShapeError("mul_const: " + std::to_string(factors.size()) + " factors for tensor " +
                     shape_str(a.shape()));
  }
  Buffer f(factors.begin(), factors.end());
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * f[i];
  return make_result(a.shape(), std::move(out), {a}, [f = std::move(f)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * f[i];
  });
}

Tensor relu(const Tensor& x) {
  for (Real v : x.data()) KinkMonitor::note(v, v > 0);
  return unary(
      x, [](Real v) { return v > 0 ? v : Real(0); }, [](Real v) { return v > 0 ? Real(1) : Real(0); });
}

Tensor smooth_l1(const Tensor& x, Real beta) {
  if (!(beta > 0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  for (Real v : x.data()) KinkMonitor::note(std::abs(v) - beta, v <= -beta ? 0 : (v < beta ? 1 : 2));
  return unary(
      x,
      [beta](Real v) {
        const Real a = std::abs(v);
        return a < beta ? Real(0.5) * v * v / beta : a - Real(0.5) * beta;
      },
      [beta](Real v) {
        if (std::abs(v) < beta) return v / beta;
        return v > 0 ? Real(1) : Real(-1);
      });
}

Tensor sum(const Tensor& x) {
  const auto d = x.data();
  // Accumulate in double so float32 sums stay order-stable for large tensors.
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return make_result({1}, {static_cast<Real>(s)}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), Real(1) / static_cast<Real>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), x.node()->value, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: trailing dims differ: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
    total += p.numel();
  }
  Buffer out;
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(std::move(shape), std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  if (idx.empty()) throw ShapeError("gather: empty index list");
  Buffer out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel()) throw std::out_of_range("gather: index out of range");
    out[i] = x.at(idx[i]);
  }
  const int n = static_cast<int>(idx.size());
  return make_result({n}, std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) p.grad[idx[i]] += self.grad[i];
  });
}

Tensor softmax_rows(const Tensor& logits) {
  const int rows = logits.rank() == 1 ? 1 : logits.dim(0);
  const int cols = static_cast<int>(logits.numel()) / rows;
  if (logits.rank() > 2) throw ShapeError("softmax_rows: expected [C] or [N×C]");
  Buffer out(logits.numel());
  for (int r = 0; r < rows; ++r) {
    const Real* z = logits.data().data() + static_cast<std::size_t>(r) * cols;
    Real* p = out.data() + static_cast<std::size_t>(r) * cols;
    const Real m = *std::max_element(z, z + cols);
    Real total = 0;
    for (int c = 0; c < cols; ++c) total += (p[c] = std::exp(z[c] - m));
    for (int c = 0; c < cols; ++c) p[c] /= total;
  }
  return make_result(logits.shape(), std::move(out), {logits}, [rows, cols](Node& self) {
    Node& parent = *self.parents[0];
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * cols;
      Real dot = 0;
      for (int c = 0; c < cols; ++c) dot += self.grad[base + c] * self.value[base + c];
      for (int c = 0; c < cols; ++c) {
        parent.grad[base + c] += self.value[base + c] * (self.grad[base + c] - dot);
      }
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() > 2) throw ShapeError("softmax_cross_entropy: expected [C] or [N×C]");
  const int rows = logits.rank() == 1 ? 1 : logits.dim(0);
  const int cols = static_cast<int>(logits.numel()) / rows;
  if (cols < 2) throw ShapeError("softmax_cross_entropy: need at least two classes");
  if (labels.size() != static_cast<std::size_t>(rows)) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<int> y(labels.begin(), labels.end());
  Buffer probs(logits.numel());
  Buffer out(rows);
  for (int r = 0; r < rows; ++r) {
    if (y[r] < 0 || y[r] >= cols) throw std::out_of_range("softmax_cross_entropy: label out of range");
    const Real* z = logits.data().data() + static_cast<std::size_t>(r) * cols;
    Real* p = probs.data() + static_cast<std::size_t>(r) * cols;
    const Real m = *std::max_element(z, z + cols);
    Real total = 0;
    for (int c = 0; c < cols; ++c) total += (p[c] = std::exp(z[c] - m));
    for (int c = 0; c < cols; ++c) p[c] /= total;
    out[r] = m + std::log(total) - z[y[r]];
  }
  return make_result({rows}, std::move(out), {logits},
                     [rows, cols, y = std::move(y), probs = std::move(probs)](Node& self) {
                       Node& parent = *self.parents[0];
                       for (int r = 0; r < rows; ++r) {
                         const std::size_t base = static_cast<std::size_t>(r) * cols;
                         const Real g = self.grad[r];
                         for (int c = 0; c < cols; ++c) {
                           parent.grad[base + c] += g * (probs[base + c] - (c == y[r] ? Real(1) : Real(0)));
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, int label) {
  const int one[1] = {label};
  return softmax_cross_entropy(reshape(logits, {1, static_cast<int>(logits.numel())}), one);
}

Tensor bilinear_sample(const Tensor& map, const Tensor& x, const Tensor& y) {
  require_rank(map, 3, "bilinear_sample");
  if (x.numel() != 1 || y.numel() != 1) throw ShapeError("bilinear_sample: coordinates must be scalars");
  const int height = map.dim(0), width = map.dim(1), channels = map.dim(2);
  const BilinearTaps taps = bilinear_taps(height, width, x.item(), y.item());
  Buffer out(channels, 0);
  for (int k = 0; k < 4; ++k) {
    if (taps.index[k] < 0) continue;
    const Real* v = map.data().data() + taps.index[k] * channels;
    for (int c = 0; c < channels; ++c) out[c] += taps.weight[k] * v[c];
  }
  return make_result({channels}, std::move(out), {map, x, y}, [taps, channels](Node& self) {
    Node& pm = *self.parents[0];
    Node& px = *self.parents[1];
    Node& py = *self.parents[2];
    for (int k = 0; k < 4; ++k) {
      if (taps.index[k] < 0) continue;
      const std::size_t base = static_cast<std::size_t>(taps.index[k]) * channels;
      Real dot = 0;
      for (int c = 0; c < channels; ++c) {
        if (pm.requires_grad) pm.grad[base + c] += taps.weight[k] * self.grad[c];
        dot += self.grad[c] * pm.value[base + c];
      }
      if (px.requires_grad) px.grad[0] += taps.dweight_dx[k] * dot;
      if (py.requires_grad) py.grad[0] += taps.dweight_dy[k] * dot;
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(input, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int height = input.dim(0), width = input.dim(1), cin = input.dim(2);
  const int cout = weight.dim(0), kh = weight.dim(1), kw = weight.dim(2);
  if (weight.dim(3) != cin || bias.numel() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + ", weight " + shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  const int out_h = (height + 2 * padding - kh) / stride + 1;
  const int out_w = (width + 2 * padding - kw) / stride + 1;
  if (out_h < 1 || out_w < 1) throw ShapeError("conv2d: kernel larger than padded input");
  const int patch = kh * kw * cin;
  const int positions = out_h * out_w;

  // im2col: one row per output position, columns ordered (ky, kx, c).
  auto cols = std::make_shared<Buffer>(static_cast<std::size_t>(positions) * patch, Real(0));
  const Real* in = input.data().data();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      Real* row = cols->data() + (static_cast<std::size_t>(oy) * out_w + ox) * patch;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - padding + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - padding + kx;
          if (ix < 0 || ix >= width) continue;
          std::copy_n(in + (static_cast<std::size_t>(iy) * width + ix) * cin, cin, row + (ky * kw + kx) * cin);
        }
      }
    }
  }
  Buffer out(static_cast<std::size_t>(positions) * cout);
  auto y = as_matrix(out, positions, cout);
  y.noalias() = as_matrix(*cols, positions, patch) * as_matrix(weight.node()->value, cout, patch).transpose();
  y.rowwise() += as_row(std::as_const(bias.node()->value));

  return make_result(
      {out_h, out_w, cout}, std::move(out), {input, weight, bias},
      [=](Node& self) {
        Node& pin = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        auto g = as_matrix(self.grad, positions, cout);
        if (pw.requires_grad) as_matrix(pw.grad, cout, patch).noalias() += g.transpose() * as_matrix(*cols, positions, patch);
        if (pb.requires_grad) as_row(pb.grad) += g.colwise().sum();
        if (!pin.requires_grad) return;
        RowMat gcols = g * as_matrix(pw.value, cout, patch);
        for (int oy = 0; oy < out_h; ++oy) {
          for (int ox = 0; ox < out_w; ++ox) {
            const Real* row = gcols.data() + (static_cast<std::size_t>(oy) * out_w + ox) * patch;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= height) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= width) continue;
                Real* dst = pin.grad.data() + (static_cast<std::size_t>(iy) * width + ix) * cin;
                const Real* src = row + (ky * kw + kx) * cin;
                for (int c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
      });
}

TSD_NAMESPACE_END
