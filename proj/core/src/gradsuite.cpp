#include "climb/gradsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "climb/config.hpp"
#include "climb/gate.hpp"
#include "climb/gradcheck.hpp"
#include "climb/schedule.hpp"
#include "climb/ssm.hpp"
#include "climb/tensor.hpp"
#include "climb/unet.hpp"

namespace climb {
namespace {

Tensor rg(Rng& rng, const Shape& s, double stdev = 1.0) {
  return Tensor::randn(s, rng, stdev, true);
}

Tensor cst(Rng& rng, const Shape& s) { return Tensor::randn(s, rng); }

// Positive values bounded away from zero, so log/sqrt/divide stay smooth
// across the finite-difference step.
Tensor rg_pos(Rng& rng, const Shape& s, double lo = 0.3) {
  Tensor t = Tensor::zeros(s);
  for (double& v : t.values()) v = lo + rng.uniform();
  t.set_requires_grad(true);
  return t;
}

// Nonzero values of both signs with |v| >= margin, keeping kinked ops
// (leaky_relu, abs_pow, divide) away from their non-smooth points.
Tensor rg_away(Rng& rng, const Shape& s, double margin = 0.05) {
  Tensor t = Tensor::zeros(s);
  for (double& v : t.values()) {
    double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v = sign * (margin + rng.uniform());
  }
  t.set_requires_grad(true);
  return t;
}

// Weighted mean turns any output into a scalar loss with generic cotangents.
Tensor readout(const Tensor& out, const Tensor& w) { return mean_all(mul(out, w)); }

using InstanceFn = std::function<GradCheckResult(Rng&, int)>;

struct OpCheck {
  std::string name;
  InstanceFn instance;
};

GradCheckResult run_fn(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                       std::vector<Tensor> inputs, int64_t max_coords, uint64_t seed) {
  return grad_check_all(fn, std::move(inputs), 1e-5, max_coords, seed);
}

}  // namespace

GradSuiteReport run_grad_suite(uint64_t seed, int instances, double tolerance) {
  GradSuiteReport report;
  report.tolerance = tolerance;
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<OpCheck> checks;
  auto add_check = [&](const std::string& name, InstanceFn fn) {
    checks.push_back({name, std::move(fn)});
  };

  // ---- elementwise binary ----
  auto binary = [&](Tensor (*op)(const Tensor&, const Tensor&), bool safe_denom) {
    return [op, safe_denom](Rng& rng, int) {
      Tensor a = rg(rng, {2, 3});
      Tensor b = safe_denom ? rg_away(rng, {2, 3}, 0.5) : rg(rng, {2, 3});
      Tensor w = cst(rng, {2, 3});
      return run_fn([&](const std::vector<Tensor>& in) {
        return readout(op(in[0], in[1]), w);
      }, {a, b}, -1, rng.next_u64());
    };
  };
  add_check("add", binary(&add, false));
  add_check("sub", binary(&sub, false));
  add_check("mul", binary(&mul, false));
  add_check("divide", binary(&divide, true));

  // ---- elementwise unary ----
  enum class Dom { kAny, kPositive, kAwayFromZero };
  auto unary = [&](std::function<Tensor(const Tensor&)> op, Dom dom) {
    return [op, dom](Rng& rng, int) {
      Tensor a = dom == Dom::kPositive ? rg_pos(rng, {2, 4})
                 : dom == Dom::kAwayFromZero ? rg_away(rng, {2, 4})
                                             : rg(rng, {2, 4}, 0.8);
      Tensor w = cst(rng, {2, 4});
      return run_fn([&](const std::vector<Tensor>& in) {
        return readout(op(in[0]), w);
      }, {a}, -1, rng.next_u64());
    };
  };
  add_check("neg", unary([](const Tensor& a) { return neg(a); }, Dom::kAny));
  add_check("exp", unary([](const Tensor& a) { return climb::exp(a); }, Dom::kAny));
  add_check("log", unary([](const Tensor& a) { return climb::log(a); }, Dom::kPositive));
  add_check("sqrt", unary([](const Tensor& a) { return climb::sqrt(a); }, Dom::kPositive));
  add_check("tanh", unary([](const Tensor& a) { return climb::tanh(a); }, Dom::kAny));
  add_check("sigmoid", unary([](const Tensor& a) { return sigmoid(a); }, Dom::kAny));
  add_check("softplus", unary([](const Tensor& a) { return softplus(a); }, Dom::kAny));
  add_check("silu", unary([](const Tensor& a) { return silu(a); }, Dom::kAny));
  add_check("leaky_relu",
            unary([](const Tensor& a) { return leaky_relu(a, 0.2); }, Dom::kAwayFromZero));
  add_check("abs_pow",
            unary([](const Tensor& a) { return abs_pow(a, 1.7); }, Dom::kAwayFromZero));
  add_check("square", unary([](const Tensor& a) { return square(a); }, Dom::kAny));
  add_check("scale", unary([](const Tensor& a) { return scale(a, 1.7); }, Dom::kAny));
  add_check("add_scalar",
            unary([](const Tensor& a) { return add_scalar(a, 0.7); }, Dom::kAny));

  // ---- matmul / convolutions / pooling ----
  add_check("matmul", [](Rng& rng, int inst) {
    Tensor a = inst % 2 == 0 ? rg(rng, {2, 3, 4}) : rg(rng, {3, 4});
    Tensor b = rg(rng, {4, 2});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(matmul(in[0], in[1])));
    }, {a, b}, 6, rng.next_u64());
  });
  add_check("conv2d", [](Rng& rng, int inst) {
    int stride = inst % 2 == 0 ? 1 : 2;
    int pad = inst % 2;
    Tensor x = rg(rng, {1, 2, 5, 5});
    Tensor w = rg(rng, {3, 2, 3, 3}, 0.5);
    Tensor b = rg(rng, {3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(conv2d(in[0], in[1], in[2], stride, pad)));
    }, {x, w, b}, 4, rng.next_u64());
  });
  add_check("conv_transpose2d", [](Rng& rng, int inst) {
    int stride = inst % 2 == 0 ? 2 : 1;
    int pad = inst % 2 == 0 ? 1 : 0;
    Tensor x = rg(rng, {1, 2, 4, 4});
    Tensor w = rg(rng, {2, 3, 3, 3}, 0.5);
    Tensor b = rg(rng, {3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(conv_transpose2d(in[0], in[1], in[2], stride, pad)));
    }, {x, w, b}, 4, rng.next_u64());
  });
  add_check("depthwise_conv1d_causal", [](Rng& rng, int) {
    Tensor x = rg(rng, {2, 6, 3});
    Tensor w = rg(rng, {3, 4}, 0.5);
    Tensor b = rg(rng, {3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(depthwise_conv1d_causal(in[0], in[1], in[2])));
    }, {x, w, b}, 5, rng.next_u64());
  });
  add_check("avg_pool2d", [](Rng& rng, int inst) {
    int k = inst % 2 == 0 ? 2 : 3;
    Tensor x = rg(rng, {1, 2, 6, 6});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(avg_pool2d(in[0], k)));
    }, {x}, 6, rng.next_u64());
  });

  // ---- reductions ----
  add_check("sum_all", [](Rng& rng, int) {
    Tensor a = rg(rng, {3, 4});
    return run_fn([&](const std::vector<Tensor>& in) {
      return sum_all(square(in[0]));
    }, {a}, -1, rng.next_u64());
  });
  add_check("mean_all", [](Rng& rng, int) {
    Tensor a = rg(rng, {3, 4});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(in[0]));
    }, {a}, -1, rng.next_u64());
  });
  add_check("sum_axis", [](Rng& rng, int inst) {
    int axis = inst % 3;
    bool keep = inst % 2 == 0;
    Tensor a = rg(rng, {2, 3, 4});
    Shape out_shape = keep ? Shape{axis == 0 ? 1 : 2, axis == 1 ? 1 : 3, axis == 2 ? 1 : 4}
                           : Shape{};
    if (!keep) {
      for (int d = 0; d < 3; ++d)
        if (d != axis) out_shape.push_back(Shape{2, 3, 4}[static_cast<size_t>(d)]);
    }
    Tensor w = cst(rng, out_shape);
    return run_fn([&](const std::vector<Tensor>& in) {
      return readout(sum_axis(in[0], axis, keep), w);
    }, {a}, -1, rng.next_u64());
  });
  add_check("mean_axis", [](Rng& rng, int inst) {
    int axis = inst % 3;
    Tensor a = rg(rng, {2, 3, 4});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(mean_axis(in[0], axis, true)));
    }, {a}, -1, rng.next_u64());
  });

  // ---- structural ----
  add_check("reshape", [](Rng& rng, int) {
    Tensor a = rg(rng, {2, 6});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(reshape(in[0], {3, 4})));
    }, {a}, -1, rng.next_u64());
  });
  add_check("transpose_last2", [](Rng& rng, int) {
    Tensor a = rg(rng, {2, 3, 4});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(transpose_last2(in[0])));
    }, {a}, 8, rng.next_u64());
  });
  add_check("slice", [](Rng& rng, int) {
    Tensor a = rg(rng, {2, 5, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(slice(in[0], 1, 1, 3)));
    }, {a}, -1, rng.next_u64());
  });
  add_check("concat", [](Rng& rng, int inst) {
    int axis = inst % 2;
    Tensor a = rg(rng, {2, 3});
    Tensor b = rg(rng, {2, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(concat({in[0], in[1]}, axis)));
    }, {a, b}, -1, rng.next_u64());
  });
  add_check("flip", [](Rng& rng, int inst) {
    int axis = inst % 3;
    Tensor a = rg(rng, {2, 4, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(flip(in[0], axis)));
    }, {a}, 8, rng.next_u64());
  });

  // ---- softmax and sort ----
  add_check("softmax_lastdim", [](Rng& rng, int) {
    Tensor a = rg(rng, {2, 5});
    Tensor w = cst(rng, {2, 5});
    return run_fn([&](const std::vector<Tensor>& in) {
      return readout(softmax_lastdim(in[0]), w);
    }, {a}, -1, rng.next_u64());
  });
  add_check("sort_with_backward", [](Rng& rng, int) {
    // Adjacent gaps stay far above the FD step so the permutation is stable.
    std::vector<double> vals(12);
    for (size_t i = 0; i < vals.size(); ++i)
      vals[i] = 0.15 * static_cast<double>(i) + 0.1 * rng.uniform();
    for (size_t i = vals.size(); i > 1; --i)
      std::swap(vals[i - 1], vals[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    Tensor a = Tensor::from_values({12}, vals);
    a.set_requires_grad(true);
    Tensor w = cst(rng, {12});
    return run_fn([&](const std::vector<Tensor>& in) {
      return readout(sort_with_backward(in[0]).first, w);
    }, {a}, -1, rng.next_u64());
  });

  // ---- selective scan ----
  add_check("selective_scan", [](Rng& rng, int) {
    Tensor x = rg(rng, {1, 4, 3});
    Tensor dt = rg_pos(rng, {1, 4, 3}, 0.05);
    Tensor b = rg(rng, {1, 4, 2});
    Tensor c = rg(rng, {1, 4, 2});
    Tensor a = Tensor::zeros({3, 2});
    for (double& v : a.values()) v = -(0.2 + rng.uniform());
    a.set_requires_grad(true);
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(selective_scan(in[0], in[1], in[2], in[3], in[4])));
    }, {x, dt, b, c, a}, 3, rng.next_u64());
  });

  // ---- nn layers ----
  add_check("linear", [](Rng& rng, int) {
    Linear lin = Linear::init(3, 4, rng);
    Tensor x = rg(rng, {2, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      Linear l2;
      l2.w = in[1];
      l2.b = in[2];
      return mean_all(square(l2.forward(in[0])));
    }, {x, lin.w, lin.b}, -1, rng.next_u64());
  });
  add_check("group_norm", [](Rng& rng, int) {
    GroupNorm gn = GroupNorm::init(4, 2);
    for (double& v : gn.gamma.values()) v = 0.5 + rng.uniform();
    for (double& v : gn.beta.values()) v = rng.normal();
    gn.gamma.set_requires_grad(true);
    gn.beta.set_requires_grad(true);
    Tensor x = rg(rng, {2, 4, 3, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(gn.forward(in[0])));
    }, {x, gn.gamma, gn.beta}, 5, rng.next_u64());
  });
  add_check("rms_norm", [](Rng& rng, int) {
    RMSNorm nrm = RMSNorm::init(4);
    for (double& v : nrm.gamma.values()) v = 0.5 + rng.uniform();
    nrm.gamma.set_requires_grad(true);
    Tensor x = rg(rng, {2, 3, 4});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(nrm.forward(in[0])));
    }, {x, nrm.gamma}, 6, rng.next_u64());
  });

  // ---- sequence blocks ----
  add_check("mamba_block", [](Rng& rng, int) {
    MambaBlockConfig mcfg;
    mcfg.model_dim = 4;
    mcfg.expand = 2;
    mcfg.conv_width = 3;
    mcfg.state_size = 3;
    mcfg.zero_out_proj = false;
    MambaBlock block = make_mamba_block(mcfg, rng);
    NamedTensors params;
    collect_params(block, params, "m");
    Tensor x = rg(rng, {1, 5, 4});
    std::vector<Tensor> inputs = {x};
    for (auto& [name, t] : params.items) inputs.push_back(t);
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(mamba_block_forward(in[0], block)));
    }, inputs, 2, rng.next_u64());
  });
  add_check("mamba_bidirectional", [](Rng& rng, int) {
    MambaBlockConfig mcfg;
    mcfg.model_dim = 4;
    mcfg.expand = 2;
    mcfg.conv_width = 3;
    mcfg.state_size = 3;
    mcfg.zero_out_proj = false;
    MambaBlock block = make_mamba_block(mcfg, rng);
    NamedTensors params;
    collect_params(block, params, "m");
    Tensor x = rg(rng, {1, 4, 4});
    std::vector<Tensor> inputs = {x};
    for (auto& [name, t] : params.items) inputs.push_back(t);
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(mamba_block_bidirectional(in[0], block)));
    }, inputs, 2, rng.next_u64());
  });
  add_check("self_attention", [](Rng& rng, int) {
    SelfAttention attn = make_self_attention(4, rng);
    NamedTensors params;
    collect_params(attn, params, "sa");
    Tensor x = rg(rng, {1, 5, 4});
    std::vector<Tensor> inputs = {x};
    for (auto& [name, t] : params.items) inputs.push_back(t);
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(naive_self_attention(in[0], attn)));
    }, inputs, 3, rng.next_u64());
  });
  add_check("cross_attention", [](Rng& rng, int) {
    CrossAttention ca = make_cross_attention(4, 6, rng, /*zero_v=*/false);
    Tensor seq = rg(rng, {1, 4, 4});
    Tensor tokens = rg(rng, {1, 3, 6});
    std::vector<Tensor> inputs = {seq,    tokens, ca.q.w, ca.q.b, ca.k.w,
                                  ca.k.b, ca.v.w, ca.v.b, ca.o.w, ca.o.b};
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(cross_attention_forward(in[0], in[1], ca)));
    }, inputs, 3, rng.next_u64());
  });
  add_check("unet_res_block", [](Rng& rng, int) {
    UNetResBlock block = make_unet_res_block(4, 4, 2, 6, rng);
    Tensor x = rg(rng, {1, 4, 4, 4});
    Tensor temb = rg(rng, {1, 6});
    std::vector<Tensor> inputs = {x, temb, block.c1.w, block.c2.w, block.temb.w,
                                  block.n1.gamma, block.n2.beta};
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(unet_res_block_forward(in[0], in[1], block)));
    }, inputs, 3, rng.next_u64());
  });

  // ---- diffusion pieces ----
  add_check("q_sample", [](Rng& rng, int inst) {
    NoiseSchedule sched = make_schedule(10, 1e-4, 0.02);
    int t = inst % 10;
    Tensor z0 = rg(rng, {1, 2, 3, 3});
    Tensor eps = rg(rng, {1, 2, 3, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return mean_all(square(q_sample(in[0], t, in[1], sched)));
    }, {z0, eps}, 6, rng.next_u64());
  });
  add_check("eps_loss", [](Rng& rng, int) {
    Tensor a = rg(rng, {2, 3});
    Tensor b = rg(rng, {2, 3});
    return run_fn([&](const std::vector<Tensor>& in) {
      return eps_loss(in[0], in[1]);
    }, {a, b}, -1, rng.next_u64());
  });

  // ---- the four autoencoder losses ----
  add_check("gate_recon_loss", [](Rng& rng, int) {
    Tensor x = cst(rng, {1, 1, 6, 6});
    Tensor xh = rg(rng, {1, 1, 6, 6});
    return run_fn([&](const std::vector<Tensor>& in) {
      return recon_loss(x, in[0]);
    }, {xh}, 8, rng.next_u64());
  });
  add_check("gate_sliced_cdf_loss", [](Rng& rng, int) {
    Tensor zs = rg(rng, {16, 3});
    Tensor prior = rg(rng, {16, 3});
    Tensor dirs = sample_directions(6, 3, rng);
    return run_fn([&](const std::vector<Tensor>& in) {
      return sliced_cdf_loss(in[0], in[1], dirs, 2.0);
    }, {zs, prior}, 4, rng.next_u64());
  });
  add_check("gate_perceptual_loss", [](Rng& rng, int) {
    RandomFeatureExtractor phi = make_random_features(rng.next_u64());
    Tensor x = cst(rng, {1, 1, 8, 8});
    Tensor xh = rg(rng, {1, 1, 8, 8});
    return run_fn([&](const std::vector<Tensor>& in) {
      return perceptual_loss(x, in[0], phi);
    }, {xh}, 6, rng.next_u64());
  });
  add_check("gate_adversarial_gen", [](Rng& rng, int) {
    PatchDiscriminator disc = make_patch_discriminator(4, rng);
    Tensor x = cst(rng, {1, 1, 8, 8});
    Tensor xh = rg(rng, {1, 1, 8, 8});
    return run_fn([&](const std::vector<Tensor>& in) {
      return adversarial_losses(x, in[0], disc).loss_gen;
    }, {xh}, 6, rng.next_u64());
  });
  add_check("gate_adversarial_disc", [](Rng& rng, int) {
    PatchDiscriminator disc = make_patch_discriminator(4, rng);
    NamedTensors params;
    collect_params(disc, params, "d");
    Tensor x = cst(rng, {1, 1, 8, 8});
    Tensor xh = cst(rng, {1, 1, 8, 8});
    std::vector<Tensor> inputs;
    for (auto& [name, t] : params.items) inputs.push_back(t);
    // inputs alias the discriminator's own tensors, so the probe sees every
    // perturbation without rebinding.
    return run_fn([&](const std::vector<Tensor>&) {
      return adversarial_losses(x, xh, disc).loss_disc;
    }, inputs, 2, rng.next_u64());
  });

  for (const OpCheck& check : checks) {
    GradSuiteRow row;
    row.op = check.name;
    row.instances = instances;
    Rng rng(seed ^ fnv1a64(check.name));
    for (int inst = 0; inst < instances; ++inst) {
      try {
        GradCheckResult r = check.instance(rng, inst);
        row.coords += r.coords_checked;
        row.max_rel_err = std::max(row.max_rel_err, r.max_rel_err);
      } catch (const std::exception& e) {
        // A throwing instance is a failure of the check, not of the suite.
        if (row.error.empty()) row.error = e.what();
      }
    }
    row.pass = row.error.empty() && row.max_rel_err < tolerance;
    report.rows.push_back(row);
  }

  const auto t1 = std::chrono::steady_clock::now();
  report.seconds = std::chrono::duration<double>(t1 - t0).count();
  report.all_pass = true;
  for (const GradSuiteRow& row : report.rows)
    if (!row.pass) report.all_pass = false;
  return report;
}

std::string grad_suite_text(const GradSuiteReport& report) {
  std::ostringstream os;
  char buf[160];
  for (const GradSuiteRow& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "[%s] %-24s instances=%-3d coords=%-5lld max_rel_err=%.3e\n",
                  row.pass ? "PASS" : "FAIL", row.op.c_str(), row.instances,
                  static_cast<long long>(row.coords), row.max_rel_err);
    os << buf;
    if (!row.error.empty()) os << "       error: " << row.error << "\n";
  }
  std::snprintf(buf, sizeof(buf), "gradient suite: %zu ops, tolerance %.1e, %.2f s — %s\n",
                report.rows.size(), report.tolerance, report.seconds,
                report.all_pass ? "ALL PASS" : "FAILURES PRESENT");
  os << buf;
  return os.str();
}

}  // namespace climb
