#include "climb/ssm.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace climb {

std::pair<double, double> discretize(double a, double b, double delta) {
  if (!(delta > 0.0)) throw std::runtime_error("discretize: delta must be positive");
  double u = delta * a;
  double a_bar = std::exp(u);
  double b_bar;
  if (std::abs(u) < 1e-8) {
    // series limit; the u/2 term keeps the branch within 1e-10 of the exact
    // formula in both absolute and relative terms
    b_bar = delta * (1.0 + 0.5 * u) * b;
  } else {
    b_bar = std::expm1(u) / a * b;
  }
  return {a_bar, b_bar};
}

namespace {

double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void check_layer_shapes(const SsmLayer& layer) {
  if (layer.channels <= 0 || layer.state_size <= 0)
    throw std::runtime_error("ssm: layer has empty dimensions");
  if (layer.A_log.shape() != Shape{layer.channels, layer.state_size})
    throw std::runtime_error("ssm: A_log shape mismatch");
}

}  // namespace

SsmLayer make_ssm_layer(int channels, int state_size, Rng& rng) {
  SsmLayer layer;
  layer.channels = channels;
  layer.state_size = state_size;
  layer.selective = true;
  std::vector<double> alog(static_cast<size_t>(channels) * state_size);
  for (int m = 0; m < channels; ++m)
    for (int n = 0; n < state_size; ++n)
      alog[static_cast<size_t>(m) * state_size + n] = std::log(static_cast<double>(n + 1));
  layer.A_log = Tensor::from_values({channels, state_size}, std::move(alog), true);
  layer.D_skip = Tensor::ones({channels});
  layer.D_skip.set_requires_grad(true);
  layer.proj_b = Linear::init(channels, state_size, rng);
  layer.proj_c = Linear::init(channels, state_size, rng);
  layer.proj_dt = Linear::init(channels, channels, rng);
  // bias the step sizes toward softplus(bias) ~ log-uniform [1e-3, 1e-1]
  std::vector<double> dtb(static_cast<size_t>(channels));
  for (int m = 0; m < channels; ++m) {
    double dt = std::exp(std::log(1e-3) + rng.uniform() * std::log(100.0));
    dtb[static_cast<size_t>(m)] = std::log(std::expm1(dt));
  }
  layer.proj_dt.b = Tensor::from_values({channels}, std::move(dtb), true);
  return layer;
}

SsmLayer make_lti_ssm_layer(int channels, int state_size, Rng& rng) {
  SsmLayer layer;
  layer.channels = channels;
  layer.state_size = state_size;
  layer.selective = false;
  std::vector<double> alog(static_cast<size_t>(channels) * state_size);
  for (double& v : alog) v = std::log(0.25 + 4.0 * rng.uniform());
  layer.A_log = Tensor::from_values({channels, state_size}, std::move(alog));
  layer.D_skip = Tensor::randn({channels}, rng);
  double cscale = 1.0 / std::sqrt(static_cast<double>(state_size));
  layer.fixed_b = scale(Tensor::randn({state_size}, rng), cscale);
  layer.fixed_c = scale(Tensor::randn({state_size}, rng), cscale);
  std::vector<double> dts(static_cast<size_t>(channels));
  for (double& v : dts) v = 0.01 + 0.49 * rng.uniform();
  layer.fixed_dt = Tensor::from_values({channels}, std::move(dts));
  return layer;
}

void collect_params(SsmLayer& layer, NamedTensors& out, const std::string& prefix) {
  out.add(prefix + ".A_log", layer.A_log);
  out.add(prefix + ".D_skip", layer.D_skip);
  layer.proj_b.params(prefix + ".proj_b", out);
  layer.proj_c.params(prefix + ".proj_c", out);
  layer.proj_dt.params(prefix + ".proj_dt", out);
}

Tensor ssm_scan_recurrent(const Tensor& x, const SsmLayer& layer, bool selective,
                          double* max_abs_state) {
  check_layer_shapes(layer);
  if (x.dim() != 2 || x.size(1) != layer.channels)
    throw std::runtime_error("ssm_scan_recurrent: expected [L,channels] input");
  const int64_t L = x.size(0);
  const int M = layer.channels;
  const int N = layer.state_size;
  const std::vector<double>& xv = x.values();
  const std::vector<double>& alog = layer.A_log.values();
  const std::vector<double>& dv = layer.D_skip.values();

  const double* wB = nullptr;
  const double* bB = nullptr;
  const double* wC = nullptr;
  const double* bC = nullptr;
  const double* wDt = nullptr;
  const double* bDt = nullptr;
  if (selective) {
    if (layer.proj_b.w.numel() == 0)
      throw std::runtime_error("ssm_scan_recurrent: layer has no selective projections");
    wB = layer.proj_b.w.values().data();
    bB = layer.proj_b.b.values().data();
    wC = layer.proj_c.w.values().data();
    bC = layer.proj_c.b.values().data();
    wDt = layer.proj_dt.w.values().data();
    bDt = layer.proj_dt.b.values().data();
  } else if (layer.fixed_b.numel() != N || layer.fixed_c.numel() != N ||
             layer.fixed_dt.numel() != M) {
    throw std::runtime_error("ssm_scan_recurrent: layer has no fixed (LTI) parameters");
  }

  std::vector<double> h(static_cast<size_t>(M) * N, 0.0);
  std::vector<double> bt(static_cast<size_t>(N)), ct(static_cast<size_t>(N));
  std::vector<double> dtv(static_cast<size_t>(M));
  std::vector<double> out(static_cast<size_t>(L) * M);
  double hmax = 0.0;
  for (int64_t t = 0; t < L; ++t) {
    const double* xt = xv.data() + t * M;
    if (selective) {
      for (int n = 0; n < N; ++n) {
        double ab = bB[n], ac = bC[n];
        for (int m = 0; m < M; ++m) {
          ab += xt[m] * wB[static_cast<size_t>(m) * N + n];
          ac += xt[m] * wC[static_cast<size_t>(m) * N + n];
        }
        bt[static_cast<size_t>(n)] = ab;
        ct[static_cast<size_t>(n)] = ac;
      }
      for (int m = 0; m < M; ++m) {
        double acc = bDt[m];
        for (int k = 0; k < M; ++k) acc += xt[k] * wDt[static_cast<size_t>(k) * M + m];
        dtv[static_cast<size_t>(m)] = softplus_scalar(acc);
      }
    } else {
      bt = layer.fixed_b.values();
      ct = layer.fixed_c.values();
      dtv = layer.fixed_dt.values();
    }
    for (int m = 0; m < M; ++m) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        double a = -std::exp(alog[static_cast<size_t>(m) * N + n]);
        auto [a_bar, b_bar] = discretize(a, bt[static_cast<size_t>(n)],
                                         dtv[static_cast<size_t>(m)]);
        double& hv = h[static_cast<size_t>(m) * N + n];
        hv = a_bar * hv + b_bar * xt[m];
        if (!std::isfinite(hv))
          throw std::runtime_error("ssm_scan_recurrent: state diverged");
        hmax = std::max(hmax, std::abs(hv));
        acc += ct[static_cast<size_t>(n)] * hv;
      }
      out[static_cast<size_t>(t) * M + m] = acc + dv[static_cast<size_t>(m)] * xt[m];
    }
  }
  if (max_abs_state) *max_abs_state = hmax;
  return Tensor::from_values({L, static_cast<int64_t>(M)}, std::move(out));
}

Tensor ssm_kernel_conv(const Tensor& x, const SsmLayer& layer) {
  check_layer_shapes(layer);
  if (layer.selective)
    throw std::runtime_error(
        "ssm_kernel_conv: selective layers have no fixed kernel (LTI mode only)");
  if (x.dim() != 2 || x.size(1) != layer.channels)
    throw std::runtime_error("ssm_kernel_conv: expected [L,channels] input");
  const int64_t L = x.size(0);
  const int M = layer.channels;
  const int N = layer.state_size;
  const std::vector<double>& xv = x.values();
  const std::vector<double>& alog = layer.A_log.values();
  const std::vector<double>& bv = layer.fixed_b.values();
  const std::vector<double>& cv = layer.fixed_c.values();
  const std::vector<double>& dtv = layer.fixed_dt.values();
  const std::vector<double>& dv = layer.D_skip.values();

  std::vector<double> kernel(static_cast<size_t>(L));
  std::vector<double> out(static_cast<size_t>(L) * M, 0.0);
  for (int m = 0; m < M; ++m) {
    for (int64_t l = 0; l < L; ++l) {
      double k = 0.0;
      for (int n = 0; n < N; ++n) {
        double a = -std::exp(alog[static_cast<size_t>(m) * N + n]);
        auto [a_bar, b_bar] =
            discretize(a, bv[static_cast<size_t>(n)], dtv[static_cast<size_t>(m)]);
        k += cv[static_cast<size_t>(n)] * std::pow(a_bar, static_cast<double>(l)) * b_bar;
      }
      kernel[static_cast<size_t>(l)] = k;
    }
    for (int64_t t = 0; t < L; ++t) {
      double acc = dv[static_cast<size_t>(m)] * xv[static_cast<size_t>(t) * M + m];
      for (int64_t l = 0; l <= t; ++l)
        acc += kernel[static_cast<size_t>(l)] * xv[static_cast<size_t>(t - l) * M + m];
      out[static_cast<size_t>(t) * M + m] = acc;
    }
  }
  return Tensor::from_values({L, static_cast<int64_t>(M)}, std::move(out));
}

Tensor ssm_forward(const Tensor& x, const SsmLayer& layer) {
  check_layer_shapes(layer);
  if (!layer.selective)
    throw std::runtime_error("ssm_forward: tape path supports selective layers only");
  if (x.dim() != 3 || x.size(2) != layer.channels)
    throw std::runtime_error("ssm_forward: expected [B,L,channels] input");
  Tensor dt = softplus(layer.proj_dt.forward(x));
  Tensor b = layer.proj_b.forward(x);
  Tensor c = layer.proj_c.forward(x);
  Tensor a = neg(exp(layer.A_log));
  Tensor y = selective_scan(x, dt, b, c, a);
  return y + x * reshape(layer.D_skip, {1, 1, layer.channels});
}

MambaBlock make_mamba_block(const MambaBlockConfig& cfg, Rng& rng) {
  if (cfg.model_dim <= 0) throw std::runtime_error("mamba: model_dim must be positive");
  MambaBlock block;
  block.cfg = cfg;
  int inner = cfg.model_dim * cfg.expand;
  block.norm = RMSNorm::init(cfg.model_dim);
  block.in_proj = Linear::init(cfg.model_dim, 2 * inner, rng);
  block.conv_w = scale(Tensor::randn({inner, cfg.conv_width}, rng),
                       1.0 / std::sqrt(static_cast<double>(cfg.conv_width)));
  block.conv_w.set_requires_grad(true);
  block.conv_b = Tensor::zeros({inner});
  block.conv_b.set_requires_grad(true);
  block.ssm = make_ssm_layer(inner, cfg.state_size, rng);
  block.out_proj = cfg.zero_out_proj ? Linear::zero(inner, cfg.model_dim)
                                     : Linear::init(inner, cfg.model_dim, rng);
  return block;
}

void collect_params(MambaBlock& block, NamedTensors& out, const std::string& prefix) {
  block.norm.params(prefix + ".norm", out);
  block.in_proj.params(prefix + ".in_proj", out);
  out.add(prefix + ".conv_w", block.conv_w);
  out.add(prefix + ".conv_b", block.conv_b);
  collect_params(block.ssm, out, prefix + ".ssm");
  block.out_proj.params(prefix + ".out_proj", out);
}

Tensor mamba_block_forward(const Tensor& seq, const MambaBlock& block) {
  if (seq.dim() != 3 || seq.size(2) != block.cfg.model_dim)
    throw std::runtime_error("mamba_block_forward: expected [B,L,model_dim] input");
  int64_t inner = block.cfg.model_dim * block.cfg.expand;
  Tensor u = block.norm.forward(seq);
  Tensor uv = block.in_proj.forward(u);
  Tensor path = slice(uv, 2, 0, inner);
  Tensor gate = slice(uv, 2, inner, inner);
  path = depthwise_conv1d_causal(path, block.conv_w, block.conv_b);
  path = silu(path);
  Tensor y = ssm_forward(path, block.ssm);
  y = y * silu(gate);
  return seq + block.out_proj.forward(y);
}

Tensor mamba_block_bidirectional(const Tensor& seq, const MambaBlock& block) {
  Tensor fwd = mamba_block_forward(seq, block);
  Tensor bwd = flip(mamba_block_forward(flip(seq, 1), block), 1);
  return scale(fwd + bwd, 0.5);
}

SequenceLayout layout_of(const Tensor& x, bool reversed) {
  if (x.dim() != 4) throw std::runtime_error("layout_of: expected [B,C,H,W]");
  return SequenceLayout{x.size(1), x.size(2), x.size(3), reversed};
}

Tensor flatten_spatial(const Tensor& x, const SequenceLayout& layout) {
  if (x.dim() != 4 || x.size(1) != layout.channels || x.size(2) != layout.height ||
      x.size(3) != layout.width)
    throw std::runtime_error("flatten_spatial: tensor does not match layout");
  Tensor seq = transpose_last2(
      reshape(x, {x.size(0), layout.channels, layout.height * layout.width}));
  return layout.reversed ? flip(seq, 1) : seq;
}

Tensor unflatten_spatial(const Tensor& seq, const SequenceLayout& layout) {
  int64_t L = layout.height * layout.width;
  if (seq.dim() != 3 || seq.size(1) != L || seq.size(2) != layout.channels)
    throw std::runtime_error("unflatten_spatial: sequence does not match layout");
  Tensor s = layout.reversed ? flip(seq, 1) : seq;
  return reshape(transpose_last2(s),
                 {seq.size(0), layout.channels, layout.height, layout.width});
}

SelfAttention make_self_attention(int dim, Rng& rng) {
  SelfAttention attn;
  attn.dim = dim;
  double s = 1.0 / std::sqrt(static_cast<double>(dim));
  attn.q = Linear::init(dim, dim, rng, s);
  attn.k = Linear::init(dim, dim, rng, s);
  attn.v = Linear::init(dim, dim, rng, s);
  attn.o = Linear::init(dim, dim, rng, s);
  return attn;
}

void collect_params(SelfAttention& attn, NamedTensors& out, const std::string& prefix) {
  attn.q.params(prefix + ".q", out);
  attn.k.params(prefix + ".k", out);
  attn.v.params(prefix + ".v", out);
  attn.o.params(prefix + ".o", out);
}

Tensor naive_self_attention(const Tensor& seq, const SelfAttention& attn) {
  if (seq.dim() != 3 || seq.size(2) != attn.dim)
    throw std::runtime_error("naive_self_attention: expected [B,L,dim] input");
  Tensor q = attn.q.forward(seq);
  Tensor k = attn.k.forward(seq);
  Tensor v = attn.v.forward(seq);
  Tensor scores = scale(matmul(q, transpose_last2(k)),
                        1.0 / std::sqrt(static_cast<double>(attn.dim)));
  Tensor weights = softmax_lastdim(scores);
  return attn.o.forward(matmul(weights, v));
}

}  // namespace climb
