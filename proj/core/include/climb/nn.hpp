#pragma once

#include <string>
#include <vector>

#include "climb/optim.hpp"
#include "climb/rng.hpp"
#include "climb/tensor.hpp"

namespace climb {

// Small trainable building blocks shared by the autoencoder, the sequence
// backbone and the denoiser. Row-vector convention throughout: Linear maps
// [..., in] -> [..., out] via x*w + b with w stored [in, out].

struct Linear {
  Tensor w, b;

  static Linear init(int64_t in, int64_t out, Rng& rng, double scale = -1.0,
                     bool with_bias = true);
  static Linear zero(int64_t in, int64_t out, bool with_bias = true);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 0;

  static Conv2dLayer init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng,
                          double scale = -1.0);
  static Conv2dLayer zero(int64_t cin, int64_t cout, int k, int stride, int pad);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

struct ConvT2dLayer {
  Tensor w, b;
  int stride = 1, pad = 0;

  static ConvT2dLayer init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

// y = x / sqrt(mean(x^2, last) + eps) * gamma, over the last dim.
struct RMSNorm {
  Tensor gamma;
  double eps = 1e-6;

  static RMSNorm init(int64_t dim);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

// Standard layer norm over the last dim.
struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-6;

  static LayerNorm init(int64_t dim);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

// Group norm over [B,C,H,W].
struct GroupNorm {
  Tensor gamma, beta;
  int groups = 8;
  double eps = 1e-6;

  static GroupNorm init(int64_t channels, int groups);
  Tensor forward(const Tensor& x) const;
  void params(const std::string& prefix, NamedTensors& out);
};

// Sinusoidal position embedding of integer timesteps, [B, dim]. Half the
// channels are sines, half cosines, over log-spaced frequencies.
Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim);

}  // namespace climb
