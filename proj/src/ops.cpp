#include "deltascope/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deltascope/errors.hpp"

namespace deltascope {

namespace detail {

BranchTrace& branch_trace() {
    thread_local BranchTrace trace;
    return trace;
}

}  // namespace detail

namespace {

struct Image4 {
    std::size_t batch, height, width, channels;
};

Image4 require_image(const Tensor& x, const char* op, const char* name = "input") {
    if (x.rank() != 4) {
        throw DimensionError(std::string(op) + ": " + name + " must be B x H x W x C, got " +
                             shape_to_string(x.shape()));
    }
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

void require_length(const Tensor& t, std::size_t n, const char* op, const char* name) {
    if (t.rank() != 1 || t.dim(0) != n) {
        throw DimensionError(std::string(op) + ": " + name + " must have length " +
                             std::to_string(n) + ", got " + shape_to_string(t.shape()));
    }
}

// Accumulates `src` into the gradient of `input` if it takes part in the graph.
inline double* grad_target(const std::shared_ptr<TensorImpl>& input) {
    return input->requires_grad ? input->grad_buffer().data() : nullptr;
}

std::size_t same_padding_before(std::size_t in, std::size_t out, std::size_t kernel,
                                std::size_t stride) {
    const long total = static_cast<long>((out - 1) * stride + kernel) - static_cast<long>(in);
    return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

}  // namespace

BatchNormState BatchNormState::identity(std::size_t channels) {
    BatchNormState state;
    state.running_mean.assign(channels, 0.0);
    state.running_var.assign(channels, 1.0);
    return state;
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, Conv2dOptions options) {
    const Image4 in = require_image(x, "conv2d");
    if (kernels.rank() != 4) {
        throw DimensionError("conv2d: kernels must be Kh x Kw x Cin x Cout, got " +
                             shape_to_string(kernels.shape()));
    }
    const std::size_t kh = kernels.dim(0), kw = kernels.dim(1), cin = kernels.dim(2),
                      cout = kernels.dim(3);
    if (cin != in.channels) {
        throw DimensionError("conv2d: input channel axis (3) has " + std::to_string(in.channels) +
                             " but kernel Cin axis (2) has " + std::to_string(cin));
    }
    require_length(bias, cout, "conv2d", "bias");
    if (options.stride < 1) {
        throw ConfigError("conv2d: stride must be >= 1");
    }
    const std::size_t s = options.stride;
    std::size_t out_h, out_w, pad_top = 0, pad_left = 0;
    if (options.padding == Padding::same) {
        out_h = (in.height + s - 1) / s;
        out_w = (in.width + s - 1) / s;
        pad_top = same_padding_before(in.height, out_h, kh, s);
        pad_left = same_padding_before(in.width, out_w, kw, s);
    } else {
        if (in.height < kh || in.width < kw) {
            throw DimensionError("conv2d: valid padding needs spatial axes (1,2) >= kernel axes (0,1)");
        }
        out_h = (in.height - kh) / s + 1;
        out_w = (in.width - kw) / s + 1;
    }

    const std::span<const double> xs = x.data();
    const std::span<const double> ws = kernels.data();
    const std::span<const double> bs = bias.data();
    std::vector<double> out(in.batch * out_h * out_w * cout);

    for (std::size_t b = 0; b < in.batch; ++b) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double* o = &out[((b * out_h + oy) * out_w + ox) * cout];
                std::copy(bs.begin(), bs.end(), o);
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pad_top);
                    if (iy < 0 || iy >= static_cast<long>(in.height)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(pad_left);
                        if (ix < 0 || ix >= static_cast<long>(in.width)) continue;
                        const double* xp = &xs[((b * in.height + iy) * in.width + ix) * cin];
                        const double* wp = &ws[(ky * kw + kx) * cin * cout];
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double xv = xp[ci];
                            if (xv == 0.0) continue;
                            const double* wrow = wp + ci * cout;
                            for (std::size_t co = 0; co < cout; ++co) {
                                o[co] += xv * wrow[co];
                            }
                        }
                    }
                }
            }
        }
    }

    return make_result(
        OpKind::conv2d, {in.batch, out_h, out_w, cout}, std::move(out), {x, kernels, bias},
        [in, kh, kw, cin, cout, s, out_h, out_w, pad_top, pad_left](const TensorImpl& self) {
            const auto& inputs = self.node->inputs;
            const std::vector<double>& xs = inputs[0]->data;
            const std::vector<double>& ws = inputs[1]->data;
            double* gx = grad_target(inputs[0]);
            double* gw = grad_target(inputs[1]);
            double* gb = grad_target(inputs[2]);
            const std::vector<double>& g = self.grad;
            for (std::size_t b = 0; b < in.batch; ++b) {
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const double* go = &g[((b * out_h + oy) * out_w + ox) * cout];
                        if (gb) {
                            for (std::size_t co = 0; co < cout; ++co) gb[co] += go[co];
                        }
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pad_top);
                            if (iy < 0 || iy >= static_cast<long>(in.height)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long ix =
                                    static_cast<long>(ox * s + kx) - static_cast<long>(pad_left);
                                if (ix < 0 || ix >= static_cast<long>(in.width)) continue;
                                const std::size_t xoff = ((b * in.height + iy) * in.width + ix) * cin;
                                const std::size_t woff = (ky * kw + kx) * cin * cout;
                                for (std::size_t ci = 0; ci < cin; ++ci) {
                                    const double xv = xs[xoff + ci];
                                    const double* wrow = &ws[woff + ci * cout];
                                    double acc = 0.0;
                                    if (gw) {
                                        double* gwrow = gw + woff + ci * cout;
                                        for (std::size_t co = 0; co < cout; ++co) {
                                            gwrow[co] += xv * go[co];
                                            acc += wrow[co] * go[co];
                                        }
                                    } else {
                                        for (std::size_t co = 0; co < cout; ++co) {
                                            acc += wrow[co] * go[co];
                                        }
                                    }
                                    if (gx) gx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor transpose_conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
                        std::size_t stride) {
    if (stride != 2) {
        throw ConfigError("transpose_conv2d: only stride 2 is supported, got " +
                          std::to_string(stride));
    }
    const Image4 in = require_image(x, "transpose_conv2d");
    if (kernels.rank() != 4) {
        throw DimensionError("transpose_conv2d: kernels must be Kh x Kw x Cin x Cout, got " +
                             shape_to_string(kernels.shape()));
    }
    const std::size_t kh = kernels.dim(0), kw = kernels.dim(1), cin = kernels.dim(2),
                      cout = kernels.dim(3);
    if (cin != in.channels) {
        throw DimensionError("transpose_conv2d: input channel axis (3) has " +
                             std::to_string(in.channels) + " but kernel Cin axis (2) has " +
                             std::to_string(cin));
    }
    if (kh < stride || kw < stride) {
        throw ConfigError("transpose_conv2d: kernel must be at least 2x2 for exact doubling");
    }
    require_length(bias, cout, "transpose_conv2d", "bias");
    const std::size_t out_h = in.height * stride, out_w = in.width * stride;
    const std::size_t crop_top = (kh - stride) / 2, crop_left = (kw - stride) / 2;

    const std::span<const double> xs = x.data();
    const std::span<const double> ws = kernels.data();
    const std::span<const double> bs = bias.data();
    std::vector<double> out(in.batch * out_h * out_w * cout);
    for (std::size_t i = 0; i < out.size(); i += cout) {
        std::copy(bs.begin(), bs.end(), out.begin() + static_cast<long>(i));
    }

    for (std::size_t b = 0; b < in.batch; ++b) {
        for (std::size_t iy = 0; iy < in.height; ++iy) {
            for (std::size_t ix = 0; ix < in.width; ++ix) {
                const double* xp = &xs[((b * in.height + iy) * in.width + ix) * cin];
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long oy = static_cast<long>(iy * stride + ky) - static_cast<long>(crop_top);
                    if (oy < 0 || oy >= static_cast<long>(out_h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ox =
                            static_cast<long>(ix * stride + kx) - static_cast<long>(crop_left);
                        if (ox < 0 || ox >= static_cast<long>(out_w)) continue;
                        double* o = &out[((b * out_h + oy) * out_w + ox) * cout];
                        const double* wp = &ws[(ky * kw + kx) * cin * cout];
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double xv = xp[ci];
                            if (xv == 0.0) continue;
                            const double* wrow = wp + ci * cout;
                            for (std::size_t co = 0; co < cout; ++co) {
                                o[co] += xv * wrow[co];
                            }
                        }
                    }
                }
            }
        }
    }

    return make_result(
        OpKind::transpose_conv2d, {in.batch, out_h, out_w, cout}, std::move(out),
        {x, kernels, bias},
        [in, kh, kw, cin, cout, stride, out_h, out_w, crop_top, crop_left](const TensorImpl& self) {
            const auto& inputs = self.node->inputs;
            const std::vector<double>& xs = inputs[0]->data;
            const std::vector<double>& ws = inputs[1]->data;
            double* gx = grad_target(inputs[0]);
            double* gw = grad_target(inputs[1]);
            double* gb = grad_target(inputs[2]);
            const std::vector<double>& g = self.grad;
            if (gb) {
                for (std::size_t i = 0; i < g.size(); i += cout) {
                    for (std::size_t co = 0; co < cout; ++co) gb[co] += g[i + co];
                }
            }
            for (std::size_t b = 0; b < in.batch; ++b) {
                for (std::size_t iy = 0; iy < in.height; ++iy) {
                    for (std::size_t ix = 0; ix < in.width; ++ix) {
                        const std::size_t xoff = ((b * in.height + iy) * in.width + ix) * cin;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const long oy =
                                static_cast<long>(iy * stride + ky) - static_cast<long>(crop_top);
                            if (oy < 0 || oy >= static_cast<long>(out_h)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long ox =
                                    static_cast<long>(ix * stride + kx) - static_cast<long>(crop_left);
                                if (ox < 0 || ox >= static_cast<long>(out_w)) continue;
                                const double* go = &g[((b * out_h + oy) * out_w + ox) * cout];
                                const std::size_t woff = (ky * kw + kx) * cin * cout;
                                for (std::size_t ci = 0; ci < cin; ++ci) {
                                    const double xv = xs[xoff + ci];
                                    const double* wrow = &ws[woff + ci * cout];
                                    double acc = 0.0;
                                    for (std::size_t co = 0; co < cout; ++co) {
                                        acc += wrow[co] * go[co];
                                    }
                                    if (gw) {
                                        double* gwrow = gw + woff + ci * cout;
                                        for (std::size_t co = 0; co < cout; ++co) {
                                            gwrow[co] += xv * go[co];
                                        }
                                    }
                                    if (gx) gx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

Tensor max_pool2d(const Tensor& x, std::size_t window) {
    const Image4 in = require_image(x, "max_pool2d");
    if (window < 1) {
        throw ConfigError("max_pool2d: window must be >= 1");
    }
    if (in.height % window != 0 || in.width % window != 0) {
        throw DimensionError("max_pool2d: spatial axes (1,2) = " + std::to_string(in.height) + "x" +
                             std::to_string(in.width) + " not divisible by window " +
                             std::to_string(window));
    }
    const std::size_t out_h = in.height / window, out_w = in.width / window, c = in.channels;
    const std::span<const double> xs = x.data();
    std::vector<double> out(in.batch * out_h * out_w * c);
    std::vector<std::size_t> argmax(out.size());

    for (std::size_t b = 0; b < in.batch; ++b) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const std::size_t obase = ((b * out_h + oy) * out_w + ox) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((b * in.height + oy * window) * in.width + ox * window) * c + ch;
                    double best_value = xs[best];
                    for (std::size_t dy = 0; dy < window; ++dy) {
                        for (std::size_t dx = 0; dx < window; ++dx) {
                            const std::size_t idx =
                                ((b * in.height + oy * window + dy) * in.width + ox * window + dx) * c + ch;
                            if (xs[idx] > best_value) {
                                best_value = xs[idx];
                                best = idx;
                            }
                        }
                    }
                    out[obase + ch] = best_value;
                    argmax[obase + ch] = best;
                }
            }
        }
    }
    if (detail::tracing_branches()) {
        std::uint64_t h = 0;
        for (std::size_t idx : argmax) h = mix64(h ^ idx);
        detail::note_branch(h);
    }

    return make_result(OpKind::max_pool2d, {in.batch, out_h, out_w, c}, std::move(out), {x},
                       [argmax = std::move(argmax)](const TensorImpl& self) {
                           double* gx = grad_target(self.node->inputs[0]);
                           if (!gx) return;
                           for (std::size_t i = 0; i < argmax.size(); ++i) {
                               gx[argmax[i]] += self.grad[i];
                           }
                       });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    const Image4 in = require_image(x, "upsample_nearest");
    if (factor < 1) {
        throw ConfigError("upsample_nearest: factor must be >= 1");
    }
    const std::size_t out_h = in.height * factor, out_w = in.width * factor, c = in.channels;
    const std::span<const double> xs = x.data();
    std::vector<double> out(in.batch * out_h * out_w * c);
    for (std::size_t b = 0; b < in.batch; ++b) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const double* src = &xs[((b * in.height + oy / factor) * in.width + ox / factor) * c];
                std::copy(src, src + c, &out[((b * out_h + oy) * out_w + ox) * c]);
            }
        }
    }
    return make_result(OpKind::upsample, {in.batch, out_h, out_w, c}, std::move(out), {x},
                       [in, factor, out_h, out_w](const TensorImpl& self) {
                           double* gx = grad_target(self.node->inputs[0]);
                           if (!gx) return;
                           const std::size_t c = in.channels;
                           for (std::size_t b = 0; b < in.batch; ++b) {
                               for (std::size_t oy = 0; oy < out_h; ++oy) {
                                   for (std::size_t ox = 0; ox < out_w; ++ox) {
                                       const double* go = &self.grad[((b * out_h + oy) * out_w + ox) * c];
                                       double* dst = gx + ((b * in.height + oy / factor) * in.width +
                                                           ox / factor) * c;
                                       for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += go[ch];
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode) {
    if (x.rank() < 2) {
        throw DimensionError("batch_norm: input needs a batch and a channel axis, got " +
                             shape_to_string(x.shape()));
    }
    const std::size_t c = x.shape().back();
    const std::size_t m = x.numel() / c;
    require_length(gamma, c, "batch_norm", "gamma");
    require_length(beta, c, "batch_norm", "beta");
    if (state.has_statistics() && state.running_mean.size() != c) {
        throw DimensionError("batch_norm: state tracks " + std::to_string(state.running_mean.size()) +
                             " channels, input has " + std::to_string(c));
    }
    const double eps = state.epsilon;
    const std::span<const double> xs = x.data();
    const std::span<const double> gs = gamma.data();
    const std::span<const double> bs = beta.data();

    std::vector<double> mean_c(c, 0.0), inv_std(c, 0.0);
    if (mode == Mode::train) {
        std::vector<double> var_c(c, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) mean_c[ch] += xs[i * c + ch];
        }
        for (double& v : mean_c) v /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double d = xs[i * c + ch] - mean_c[ch];
                var_c[ch] += d * d;
            }
        }
        for (double& v : var_c) v /= static_cast<double>(m);
        for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var_c[ch] + eps);

        const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
        if (!state.has_statistics()) {
            state.running_mean = mean_c;
            state.running_var.resize(c);
            for (std::size_t ch = 0; ch < c; ++ch) {
                state.running_var[ch] = std::max(var_c[ch] * unbias, eps > 0 ? eps : 1e-12);
            }
        } else {
            const double keep = state.momentum;
            for (std::size_t ch = 0; ch < c; ++ch) {
                state.running_mean[ch] = keep * state.running_mean[ch] + (1.0 - keep) * mean_c[ch];
                state.running_var[ch] =
                    keep * state.running_var[ch] + (1.0 - keep) * var_c[ch] * unbias;
            }
        }
        ++state.updates;
    } else {
        if (!state.has_statistics()) {
            throw StateError("batch_norm: inference requested before any running statistics exist");
        }
        mean_c = state.running_mean;
        for (std::size_t ch = 0; ch < c; ++ch) {
            inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + eps);
        }
    }

    std::vector<double> xhat(xs.size());
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t k = i * c + ch;
            xhat[k] = (xs[k] - mean_c[ch]) * inv_std[ch];
            out[k] = gs[ch] * xhat[k] + bs[ch];
        }
    }

    const bool batch_stats = mode == Mode::train;
    return make_result(
        OpKind::batch_norm, x.shape(), std::move(out), {x, gamma, beta},
        [c, m, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl& self) {
            const auto& inputs = self.node->inputs;
            const std::vector<double>& gamma_v = inputs[1]->data;
            double* gx = grad_target(inputs[0]);
            double* gg = grad_target(inputs[1]);
            double* gb = grad_target(inputs[2]);
            const std::vector<double>& g = self.grad;
            std::vector<double> sum_g(c, 0.0), sum_g_xhat(c, 0.0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    sum_g[ch] += g[i * c + ch];
                    sum_g_xhat[ch] += g[i * c + ch] * xhat[i * c + ch];
                }
            }
            if (gg) for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_g_xhat[ch];
            if (gb) for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
            if (!gx) return;
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t k = i * c + ch;
                    const double scale = gamma_v[ch] * inv_std[ch];
                    if (batch_stats) {
                        gx[k] += scale * (g[k] - inv_m * sum_g[ch] - xhat[k] * inv_m * sum_g_xhat[ch]);
                    } else {
                        gx[k] += scale * g[k];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Dense

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    if (x.rank() != 2) {
        throw DimensionError("dense: input must be B x F, got " + shape_to_string(x.shape()));
    }
    if (weights.rank() != 2 || weights.dim(0) != x.dim(1)) {
        throw DimensionError("dense: input feature axis (1) = " + std::to_string(x.dim(1)) +
                             " does not match weight axis (0) of " +
                             shape_to_string(weights.shape()));
    }
    const std::size_t batch = x.dim(0), f = x.dim(1), g_out = weights.dim(1);
    require_length(bias, g_out, "dense", "bias");
    const std::span<const double> xs = x.data();
    const std::span<const double> ws = weights.data();
    const std::span<const double> bs = bias.data();
    std::vector<double> out(batch * g_out);
    for (std::size_t b = 0; b < batch; ++b) {
        double* o = &out[b * g_out];
        std::copy(bs.begin(), bs.end(), o);
        for (std::size_t i = 0; i < f; ++i) {
            const double xv = xs[b * f + i];
            const double* wrow = &ws[i * g_out];
            for (std::size_t j = 0; j < g_out; ++j) o[j] += xv * wrow[j];
        }
    }
    return make_result(OpKind::dense, {batch, g_out}, std::move(out), {x, weights, bias},
                       [batch, f, g_out](const TensorImpl& self) {
                           const auto& inputs = self.node->inputs;
                           const std::vector<double>& xs = inputs[0]->data;
                           const std::vector<double>& ws = inputs[1]->data;
                           double* gx = grad_target(inputs[0]);
                           double* gw = grad_target(inputs[1]);
                           double* gb = grad_target(inputs[2]);
                           const std::vector<double>& g = self.grad;
                           for (std::size_t b = 0; b < batch; ++b) {
                               const double* go = &g[b * g_out];
                               if (gb) for (std::size_t j = 0; j < g_out; ++j) gb[j] += go[j];
                               for (std::size_t i = 0; i < f; ++i) {
                                   const double xv = xs[b * f + i];
                                   const double* wrow = &ws[i * g_out];
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < g_out; ++j) {
                                       acc += wrow[j] * go[j];
                                       if (gw) gw[i * g_out + j] += xv * go[j];
                                   }
                                   if (gx) gx[b * f + i] += acc;
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Activations

Tensor relu(const Tensor& x) {
    const std::span<const double> xs = x.data();
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] > 0.0 ? xs[i] : 0.0;
    if (detail::tracing_branches()) {
        std::uint64_t h = 0;
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            word = (word << 1) | (xs[i] > 0.0 ? 1u : 0u);
            if (i % 64 == 63) {
                h = mix64(h ^ word);
                word = 0;
            }
        }
        detail::note_branch(mix64(h ^ word ^ xs.size()));
    }
    return make_result(OpKind::relu, x.shape(), std::move(out), {x}, [](const TensorImpl& self) {
        const auto& input = self.node->inputs[0];
        double* gx = grad_target(input);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (input->data[i] > 0.0) gx[i] += self.grad[i];
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    const std::span<const double> xs = x.data();
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double v = xs[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return make_result(OpKind::sigmoid, x.shape(), std::move(out), {x}, [](const TensorImpl& self) {
        double* gx = grad_target(self.node->inputs[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.data[i];
            gx[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor softmax_channels(const Tensor& x) {
    if (x.rank() < 1 || x.shape().back() < 2) {
        throw DimensionError("softmax_channels: channel axis must have extent >= 2, got " +
                             shape_to_string(x.shape()));
    }
    const std::size_t c = x.shape().back();
    const std::span<const double> xs = x.data();
    std::vector<double> out(xs.size());
    for (std::size_t p = 0; p < xs.size(); p += c) {
        const double peak = *std::max_element(xs.begin() + static_cast<long>(p),
                                              xs.begin() + static_cast<long>(p + c));
        double total = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            out[p + ch] = std::exp(xs[p + ch] - peak);
            total += out[p + ch];
        }
        for (std::size_t ch = 0; ch < c; ++ch) out[p + ch] /= total;
    }
    return make_result(OpKind::softmax, x.shape(), std::move(out), {x}, [c](const TensorImpl& self) {
        double* gx = grad_target(self.node->inputs[0]);
        if (!gx) return;
        const std::vector<double>& y = self.data;
        const std::vector<double>& g = self.grad;
        for (std::size_t p = 0; p < y.size(); p += c) {
            double dot = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) dot += g[p + ch] * y[p + ch];
            for (std::size_t ch = 0; ch < c; ++ch) gx[p + ch] += y[p + ch] * (g[p + ch] - dot);
        }
    });
}

Tensor activate(const Tensor& x, Activation kind) {
    switch (kind) {
        case Activation::relu: return relu(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::softmax_channels: return softmax_channels(x);
    }
    throw ConfigError("activate: unknown activation");
}

// ---------------------------------------------------------------------------
// Dropout

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::infer || rate == 0.0) {
        return x;
    }
    const double scale = 1.0 / (1.0 - rate);
    const std::span<const double> xs = x.data();
    std::vector<double> mask(xs.size());
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0.0 : scale;
        out[i] = xs[i] * mask[i];
    }
    return make_result(OpKind::dropout, x.shape(), std::move(out), {x},
                       [mask = std::move(mask)](const TensorImpl& self) {
                           double* gx = grad_target(self.node->inputs[0]);
                           if (!gx) return;
                           for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
                       });
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1) {
        throw DimensionError("concat_channels: rank mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    for (std::size_t axis = 0; axis + 1 < a.rank(); ++axis) {
        if (a.dim(axis) != b.dim(axis)) {
            throw DimensionError("concat_channels: axis " + std::to_string(axis) + " differs (" +
                                 std::to_string(a.dim(axis)) + " vs " + std::to_string(b.dim(axis)) +
                                 ")");
        }
    }
    const std::size_t ca = a.shape().back(), cb = b.shape().back(), c = ca + cb;
    const std::size_t pixels = ca ? a.numel() / ca : (cb ? b.numel() / cb : 0);
    Shape shape = a.shape();
    shape.back() = c;
    const std::span<const double> as = a.data();
    const std::span<const double> bs = b.data();
    std::vector<double> out(pixels * c);
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(as.begin() + static_cast<long>(p * ca), ca, out.begin() + static_cast<long>(p * c));
        std::copy_n(bs.begin() + static_cast<long>(p * cb), cb,
                    out.begin() + static_cast<long>(p * c + ca));
    }
    return make_result(OpKind::concat, std::move(shape), std::move(out), {a, b},
                       [pixels, ca, cb, c](const TensorImpl& self) {
                           double* ga = grad_target(self.node->inputs[0]);
                           double* gb = grad_target(self.node->inputs[1]);
                           for (std::size_t p = 0; p < pixels; ++p) {
                               const double* g = &self.grad[p * c];
                               if (ga) for (std::size_t ch = 0; ch < ca; ++ch) ga[p * ca + ch] += g[ch];
                               if (gb) for (std::size_t ch = 0; ch < cb; ++ch) gb[p * cb + ch] += g[ca + ch];
                           }
                       });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
    if (x.rank() < 1 || begin + count > x.shape().back()) {
        throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") outside channel axis of " +
                             shape_to_string(x.shape()));
    }
    const std::size_t c = x.shape().back();
    const std::size_t pixels = c ? x.numel() / c : 0;
    Shape shape = x.shape();
    shape.back() = count;
    const std::span<const double> xs = x.data();
    std::vector<double> out(pixels * count);
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(xs.begin() + static_cast<long>(p * c + begin), count,
                    out.begin() + static_cast<long>(p * count));
    }
    return make_result(OpKind::slice, std::move(shape), std::move(out), {x},
                       [pixels, c, begin, count](const TensorImpl& self) {
                           double* gx = grad_target(self.node->inputs[0]);
                           if (!gx) return;
                           for (std::size_t p = 0; p < pixels; ++p) {
                               for (std::size_t ch = 0; ch < count; ++ch) {
                                   gx[p * c + begin + ch] += self.grad[p * count + ch];
                               }
                           }
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result(OpKind::add, a.shape(), std::move(out), {a, b}, [](const TensorImpl& self) {
        for (const auto& input : self.node->inputs) {
            double* g = grad_target(input);
            if (!g) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result(OpKind::mul, a.shape(), std::move(out), {a, b}, [](const TensorImpl& self) {
        const auto& lhs = self.node->inputs[0];
        const auto& rhs = self.node->inputs[1];
        double* ga = grad_target(lhs);
        double* gb = grad_target(rhs);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga) ga[i] += self.grad[i] * rhs->data[i];
            if (gb) gb[i] += self.grad[i] * lhs->data[i];
        }
    });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return make_result(OpKind::reduce, {1}, {total}, {x}, [](const TensorImpl& self) {
        double* gx = grad_target(self.node->inputs[0]);
        if (!gx) return;
        const double g = self.grad[0];
        const std::size_t n = self.node->inputs[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) {
        throw DimensionError("mean: empty tensor");
    }
    double total = 0.0;
    for (double v : x.data()) total += v;
    const double n = static_cast<double>(x.numel());
    return make_result(OpKind::reduce, {1}, {total / n}, {x}, [n](const TensorImpl& self) {
        double* gx = grad_target(self.node->inputs[0]);
        if (!gx) return;
        const double g = self.grad[0] / n;
        const std::size_t count = self.node->inputs[0]->data.size();
        for (std::size_t i = 0; i < count; ++i) gx[i] += g;
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                             shape_to_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_result(OpKind::reshape, std::move(shape), std::move(out), {x},
                       [](const TensorImpl& self) {
                           double* gx = grad_target(self.node->inputs[0]);
                           if (!gx) return;
                           for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                       });
}

Tensor flatten(const Tensor& x) {
    if (x.rank() < 1) {
        throw DimensionError("flatten: rank-0 tensor");
    }
    const std::size_t batch = x.dim(0);
    return reshape(x, {batch, batch ? x.numel() / batch : 0});
}

}  // namespace deltascope
