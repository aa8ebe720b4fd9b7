#include "climb/nn.hpp"

#include <cmath>

namespace climb {

Linear Linear::init(int64_t in, int64_t out, Rng& rng, double scale, bool with_bias) {
  Linear l;
  double s = scale > 0 ? scale : std::sqrt(2.0 / static_cast<double>(in));
  l.w = Tensor::randn({in, out}, rng, s, true);
  if (with_bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::zero(int64_t in, int64_t out, bool with_bias) {
  Linear l;
  l.w = Tensor::zeros({in, out}, true);
  if (with_bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, w);
  if (b.defined()) y = y + b;
  return y;
}

void Linear::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".w", w);
  if (b.defined()) out.add(prefix + ".b", b);
}

Conv2dLayer Conv2dLayer::init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng,
                              double scale) {
  Conv2dLayer c;
  double s = scale > 0 ? scale : std::sqrt(2.0 / static_cast<double>(cin * k * k));
  c.w = Tensor::randn({cout, cin, k, k}, rng, s, true);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

Conv2dLayer Conv2dLayer::zero(int64_t cin, int64_t cout, int k, int stride, int pad) {
  Conv2dLayer c;
  c.w = Tensor::zeros({cout, cin, k, k}, true);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

Tensor Conv2dLayer::forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

void Conv2dLayer::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

ConvT2dLayer ConvT2dLayer::init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng) {
  ConvT2dLayer c;
  double s = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  c.w = Tensor::randn({cin, cout, k, k}, rng, s, true);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

Tensor ConvT2dLayer::forward(const Tensor& x) const {
  return conv_transpose2d(x, w, b, stride, pad);
}

void ConvT2dLayer::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

RMSNorm RMSNorm::init(int64_t dim) {
  RMSNorm n;
  n.gamma = Tensor::ones({dim}, true);
  return n;
}

Tensor RMSNorm::forward(const Tensor& x) const {
  Tensor ms = mean_axis(square(x), -1, true);
  return x / climb::sqrt(add_scalar(ms, eps)) * gamma;
}

void RMSNorm::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".gamma", gamma);
}

LayerNorm LayerNorm::init(int64_t dim) {
  LayerNorm n;
  n.gamma = Tensor::ones({dim}, true);
  n.beta = Tensor::zeros({dim}, true);
  return n;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  Tensor mu = mean_axis(x, -1, true);
  Tensor xc = x - mu;
  Tensor var = mean_axis(square(xc), -1, true);
  return xc / climb::sqrt(add_scalar(var, eps)) * gamma + beta;
}

void LayerNorm::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

GroupNorm GroupNorm::init(int64_t channels, int groups_in) {
  GroupNorm n;
  n.gamma = Tensor::ones({channels, 1, 1}, true);
  n.beta = Tensor::zeros({channels, 1, 1}, true);
  n.groups = groups_in;
  return n;
}

Tensor GroupNorm::forward(const Tensor& x) const {
  const Shape& s = x.shape();
  int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  int64_t g = groups;
  if (C % g != 0) g = 1;  // width not divisible: fall back to layer-style stats
  Tensor xg = reshape(x, {B, g, (C / g) * H * W});
  Tensor mu = mean_axis(xg, -1, true);
  Tensor xc = xg - mu;
  Tensor var = mean_axis(square(xc), -1, true);
  Tensor norm = xc / climb::sqrt(add_scalar(var, eps));
  return reshape(norm, {B, C, H, W}) * gamma + beta;
}

void GroupNorm::params(const std::string& prefix, NamedTensors& out) {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim) {
  int64_t B = static_cast<int64_t>(t.size());
  int64_t half = dim / 2;
  std::vector<double> v(static_cast<size_t>(B * dim), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                             static_cast<double>(std::max<int64_t>(half - 1, 1)));
      double arg = static_cast<double>(t[static_cast<size_t>(b)]) * freq;
      v[static_cast<size_t>(b * dim + i)] = std::sin(arg);
      v[static_cast<size_t>(b * dim + half + i)] = std::cos(arg);
    }
  }
  return Tensor::from_values({B, dim}, std::move(v));
}

}  // namespace climb
