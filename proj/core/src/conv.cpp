// Spatial ops: convolutions, pooling, batch-norm, image priors and warps.
#include "autograd_internal.hpp"
#include "unlearn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace unlearn::ag {

using detail::grad_of;
using detail::make_result;

namespace {

struct ConvDims {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
    int patch() const { return channels * kernel * kernel; }
    int positions() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ow * stride - pad + kj is inside [0, width).
std::pair<int, int> valid_range(const ConvDims& d, int kj) {
    const int off = kj - d.pad;
    const int lo = off >= 0 ? 0 : (-off + d.stride - 1) / d.stride;
    const int hi = std::min(d.out_w, d.width - off <= 0 ? 0 : (d.width - off + d.stride - 1) / d.stride);
    return {lo, std::max(lo, hi)};
}

// img [C, H, W] -> cols block [C*k*k, OH*OW] written with row stride `ld`.
void im2col(const real* img, const ConvDims& d, real* cols, int ld) {
    for (int c = 0; c < d.channels; ++c)
        for (int ki = 0; ki < d.kernel; ++ki)
            for (int kj = 0; kj < d.kernel; ++kj) {
                real* row = cols + static_cast<std::ptrdiff_t>((c * d.kernel + ki) * d.kernel + kj) * ld;
                const auto [lo, hi] = valid_range(d, kj);
                for (int oh = 0; oh < d.out_h; ++oh) {
                    real* dst = row + oh * d.out_w;
                    const int ih = oh * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.height) {
                        std::fill_n(dst, d.out_w, 0.0);
                        continue;
                    }
                    const real* src = img + (c * d.height + ih) * d.width + kj - d.pad;
                    std::fill_n(dst, lo, 0.0);
                    if (d.stride == 1) {
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * d.stride];
                    }
                    std::fill(dst + hi, dst + d.out_w, 0.0);
                }
            }
}

// Adjoint of im2col: accumulates a cols block back into img [C, H, W].
void col2im(const real* cols, const ConvDims& d, real* img, int ld) {
    for (int c = 0; c < d.channels; ++c)
        for (int ki = 0; ki < d.kernel; ++ki)
            for (int kj = 0; kj < d.kernel; ++kj) {
                const real* row = cols + static_cast<std::ptrdiff_t>((c * d.kernel + ki) * d.kernel + kj) * ld;
                const auto [lo, hi] = valid_range(d, kj);
                for (int oh = 0; oh < d.out_h; ++oh) {
                    const int ih = oh * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.height) continue;
                    const real* src = row + oh * d.out_w;
                    real* dst = img + (c * d.height + ih) * d.width + kj - d.pad;
                    for (int ow = lo; ow < hi; ++ow) dst[ow * d.stride] += src[ow];
                }
            }
}

void require_rank4(const Var& x, const char* op) {
    if (x.value().rank() != 4) throw ArgumentError(std::string(op) + " expects [N, C, H, W], got " +
                                                   shape_to_string(x.shape()));
}

// Reads channel-major blocks out of NCHW: dst [C, N*P] from src [N, C, P].
void nchw_to_cn(const real* src, real* dst, int n, int c, int p) {
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            std::copy_n(src + (static_cast<std::ptrdiff_t>(i) * c + ch) * p, p,
                        dst + static_cast<std::ptrdiff_t>(ch) * n * p + static_cast<std::ptrdiff_t>(i) * p);
}

void cn_to_nchw(const real* src, real* dst, int n, int c, int p) {
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            std::copy_n(src + static_cast<std::ptrdiff_t>(ch) * n * p + static_cast<std::ptrdiff_t>(i) * p, p,
                        dst + (static_cast<std::ptrdiff_t>(i) * c + ch) * p);
}

} // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dGeometry geom) {
    require_rank4(x, "conv2d");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (weight.value().rank() != 4 || weight.dim(1) != c || weight.dim(2) != weight.dim(3))
        throw ArgumentError("conv2d: weight shape " + shape_to_string(weight.shape()) + " incompatible with input " +
                            shape_to_string(x.shape()));
    const int o = weight.dim(0), k = weight.dim(2);
    ConvDims d{c, h, w, k, geom.stride, geom.pad, (h + 2 * geom.pad - k) / geom.stride + 1,
               (w + 2 * geom.pad - k) / geom.stride + 1};
    if (d.out_h <= 0 || d.out_w <= 0) throw ArgumentError("conv2d: kernel larger than padded input");
    const int p = d.positions(), cols_ld = n * p;

    RowMat cols(d.patch(), cols_ld);
    for (int i = 0; i < n; ++i)
        im2col(x.value().data() + static_cast<std::ptrdiff_t>(i) * c * h * w, d, cols.data() + i * p, cols_ld);
    ConstMat W(weight.value().data(), o, d.patch());
    RowMat out_cn = W * cols;
    for (int ch = 0; ch < o; ++ch) out_cn.row(ch).array() += bias.value()[ch];

    Tensor out(Shape{n, o, d.out_h, d.out_w});
    cn_to_nchw(out_cn.data(), out.data(), n, o, p);

    return make_result(std::move(out), {&x, &weight, &bias},
                       [cols = std::move(cols), d, n, o, p, cols_ld](Node& self) {
                           RowMat dout(o, cols_ld);
                           nchw_to_cn(self.grad.data(), dout.data(), n, o, p);
                           if (Tensor* gw = grad_of(self, 1))
                               MapMat(gw->data(), o, d.patch()).noalias() += dout * cols.transpose();
                           if (Tensor* gb = grad_of(self, 2))
                               for (int ch = 0; ch < o; ++ch) (*gb)[ch] += dout.row(ch).sum();
                           if (Tensor* gx = grad_of(self, 0)) {
                               ConstMat W(self.parents[1]->value.data(), o, d.patch());
                               RowMat dcols = W.transpose() * dout;
                               const std::ptrdiff_t img = static_cast<std::ptrdiff_t>(d.channels) * d.height * d.width;
                               for (int i = 0; i < n; ++i) col2im(dcols.data() + i * p, d, gx->data() + i * img, cols_ld);
                           }
                       });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, Conv2dGeometry geom) {
    require_rank4(x, "conv_transpose2d");
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (weight.value().rank() != 4 || weight.dim(0) != ci || weight.dim(2) != weight.dim(3))
        throw ArgumentError("conv_transpose2d: weight shape " + shape_to_string(weight.shape()) +
                            " incompatible with input " + shape_to_string(x.shape()));
    const int co = weight.dim(1), k = weight.dim(2);
    const int oh = (h - 1) * geom.stride - 2 * geom.pad + k;
    const int ow = (w - 1) * geom.stride - 2 * geom.pad + k;
    if (oh <= 0 || ow <= 0) throw ArgumentError("conv_transpose2d: empty output");
    // The output plays the role of a convolution input whose im2col has h*w positions.
    ConvDims d{co, oh, ow, k, geom.stride, geom.pad, h, w};
    const int p = h * w, ld = n * p;

    RowMat xin(ci, ld);
    nchw_to_cn(x.value().data(), xin.data(), n, ci, p);
    ConstMat W(weight.value().data(), ci, d.patch());
    RowMat cols = W.transpose() * xin;

    Tensor out(Shape{n, co, oh, ow});
    const std::ptrdiff_t img = static_cast<std::ptrdiff_t>(co) * oh * ow;
    for (int i = 0; i < n; ++i) col2im(cols.data() + i * p, d, out.data() + i * img, ld);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < co; ++ch) {
            real* plane = out.data() + i * img + static_cast<std::ptrdiff_t>(ch) * oh * ow;
            for (int t = 0; t < oh * ow; ++t) plane[t] += bias.value()[ch];
        }

    return make_result(std::move(out), {&x, &weight, &bias}, [xin = std::move(xin), d, n, ci, p, ld, img](Node& self) {
        RowMat dcols(d.patch(), ld);
        for (int i = 0; i < n; ++i) im2col(self.grad.data() + i * img, d, dcols.data() + i * p, ld);
        if (Tensor* gw = grad_of(self, 1)) MapMat(gw->data(), ci, d.patch()).noalias() += xin * dcols.transpose();
        if (Tensor* gb = grad_of(self, 2)) {
            const int plane = d.height * d.width;
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < d.channels; ++ch) {
                    const real* g = self.grad.data() + i * img + static_cast<std::ptrdiff_t>(ch) * plane;
                    real s = 0.0;
                    for (int t = 0; t < plane; ++t) s += g[t];
                    (*gb)[ch] += s;
                }
        }
        if (Tensor* gx = grad_of(self, 0)) {
            ConstMat W(self.parents[1]->value.data(), ci, d.patch());
            RowMat dx = W * dcols;
            RowMat dx_nchw(1, static_cast<std::ptrdiff_t>(n) * ci * p);
            cn_to_nchw(dx.data(), dx_nchw.data(), n, ci, p);
            for (std::size_t t = 0; t < gx->size(); ++t) (*gx)[t] += dx_nchw.data()[t];
        }
    });
}

Var max_pool2d(const Var& x, int window) {
    require_rank4(x, "max_pool2d");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h / window, ow = w / window;
    if (oh == 0 || ow == 0) throw ArgumentError("max_pool2d: window exceeds input");
    Tensor out(Shape{n, c, oh, ow});
    std::vector<std::size_t> arg(out.size());
    const real* in = x.value().data();
    std::size_t o = 0;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * h * w;
            for (int r = 0; r < oh; ++r)
                for (int s = 0; s < ow; ++s, ++o) {
                    std::size_t best = base + static_cast<std::size_t>(r * window) * w + s * window;
                    for (int a = 0; a < window; ++a)
                        for (int b = 0; b < window; ++b) {
                            const std::size_t idx = base + static_cast<std::size_t>(r * window + a) * w + s * window + b;
                            if (in[idx] > in[best]) best = idx;
                        }
                    out[o] = in[best];
                    arg[o] = best;
                }
        }
    return make_result(std::move(out), {&x}, [arg = std::move(arg)](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t t = 0; t < arg.size(); ++t) (*g)[arg[t]] += self.grad[t];
    });
}

// ---------------------------------------------------------------------------
// Channel statistics and batch-norm
// ---------------------------------------------------------------------------
namespace {

struct ChannelLayout {
    int n, c, plane;
    std::size_t count() const { return static_cast<std::size_t>(n) * plane; }
    std::size_t index(int i, int ch, int t) const {
        return (static_cast<std::size_t>(i) * c + ch) * plane + t;
    }
};

ChannelLayout channel_layout(const Tensor& x) {
    if (x.rank() < 2) throw ArgumentError("channel statistics need [N, C, ...] input");
    int plane = 1;
    for (int i = 2; i < x.rank(); ++i) plane *= x.dim(i);
    return {x.dim(0), x.dim(1), plane};
}

void channel_moments(const Tensor& x, const ChannelLayout& l, Tensor& mean, Tensor& var) {
    mean = Tensor(Shape{l.c}, 0.0);
    var = Tensor(Shape{l.c}, 0.0);
    const real m = static_cast<real>(l.count());
    for (int ch = 0; ch < l.c; ++ch) {
        real s = 0.0;
        for (int i = 0; i < l.n; ++i)
            for (int t = 0; t < l.plane; ++t) s += x[l.index(i, ch, t)];
        const real mu = s / m;
        real v = 0.0;
        for (int i = 0; i < l.n; ++i)
            for (int t = 0; t < l.plane; ++t) {
                const real diff = x[l.index(i, ch, t)] - mu;
                v += diff * diff;
            }
        mean[ch] = mu;
        var[ch] = v / m;
    }
}

} // namespace

Var channel_mean(const Var& x) {
    const ChannelLayout l = channel_layout(x.value());
    if (l.count() == 0) throw ArgumentError("channel_mean of empty batch");
    Tensor mean, var;
    channel_moments(x.value(), l, mean, var);
    return make_result(std::move(mean), {&x}, [l](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        const real inv_m = 1.0 / static_cast<real>(l.count());
        for (int i = 0; i < l.n; ++i)
            for (int ch = 0; ch < l.c; ++ch)
                for (int t = 0; t < l.plane; ++t) (*g)[l.index(i, ch, t)] += self.grad[ch] * inv_m;
    });
}

Var channel_var(const Var& x) {
    const ChannelLayout l = channel_layout(x.value());
    if (l.count() == 0) throw ArgumentError("channel_var of empty batch");
    Tensor mean, var;
    channel_moments(x.value(), l, mean, var);
    return make_result(std::move(var), {&x}, [l, mean = std::move(mean)](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        const Tensor& xv = self.parents[0]->value;
        const real two_over_m = 2.0 / static_cast<real>(l.count());
        for (int i = 0; i < l.n; ++i)
            for (int ch = 0; ch < l.c; ++ch)
                for (int t = 0; t < l.plane; ++t) {
                    const std::size_t idx = l.index(i, ch, t);
                    (*g)[idx] += self.grad[ch] * two_over_m * (xv[idx] - mean[ch]);
                }
    });
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, real eps, BatchStats* stats) {
    const ChannelLayout l = channel_layout(x.value());
    if (gamma.value().size() != static_cast<std::size_t>(l.c)) throw ArgumentError("batch_norm: channel mismatch");
    Tensor mean, var;
    channel_moments(x.value(), l, mean, var);
    Tensor inv_std(Shape{l.c});
    for (int ch = 0; ch < l.c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    Tensor xhat(x.shape());
    Tensor out(x.shape());
    for (int i = 0; i < l.n; ++i)
        for (int ch = 0; ch < l.c; ++ch)
            for (int t = 0; t < l.plane; ++t) {
                const std::size_t idx = l.index(i, ch, t);
                xhat[idx] = (x.value()[idx] - mean[ch]) * inv_std[ch];
                out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
            }
    if (stats) *stats = BatchStats{mean, var};
    return make_result(std::move(out), {&x, &gamma, &beta},
                       [l, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           const Tensor& gam = self.parents[1]->value;
                           Tensor sum_dy(Shape{l.c}, 0.0), sum_dy_xhat(Shape{l.c}, 0.0);
                           for (int i = 0; i < l.n; ++i)
                               for (int ch = 0; ch < l.c; ++ch)
                                   for (int t = 0; t < l.plane; ++t) {
                                       const std::size_t idx = l.index(i, ch, t);
                                       sum_dy[ch] += self.grad[idx];
                                       sum_dy_xhat[ch] += self.grad[idx] * xhat[idx];
                                   }
                           if (Tensor* gg = grad_of(self, 1))
                               for (int ch = 0; ch < l.c; ++ch) (*gg)[ch] += sum_dy_xhat[ch];
                           if (Tensor* gb = grad_of(self, 2))
                               for (int ch = 0; ch < l.c; ++ch) (*gb)[ch] += sum_dy[ch];
                           if (Tensor* gx = grad_of(self, 0)) {
                               const real m = static_cast<real>(l.count());
                               for (int i = 0; i < l.n; ++i)
                                   for (int ch = 0; ch < l.c; ++ch) {
                                       const real k = gam[ch] * inv_std[ch] / m;
                                       for (int t = 0; t < l.plane; ++t) {
                                           const std::size_t idx = l.index(i, ch, t);
                                           (*gx)[idx] += k * (m * self.grad[idx] - sum_dy[ch] -
                                                              xhat[idx] * sum_dy_xhat[ch]);
                                       }
                                   }
                           }
                       });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean, const Tensor& var,
                    real eps) {
    const ChannelLayout l = channel_layout(x.value());
    if (mean.size() != static_cast<std::size_t>(l.c) || var.size() != static_cast<std::size_t>(l.c))
        throw ArgumentError("batch_norm: running statistics width mismatch");
    Tensor inv_std(Shape{l.c});
    for (int ch = 0; ch < l.c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    Tensor out(x.shape());
    for (int i = 0; i < l.n; ++i)
        for (int ch = 0; ch < l.c; ++ch)
            for (int t = 0; t < l.plane; ++t) {
                const std::size_t idx = l.index(i, ch, t);
                out[idx] = gamma.value()[ch] * (x.value()[idx] - mean[ch]) * inv_std[ch] + beta.value()[ch];
            }
    return make_result(std::move(out), {&x, &gamma, &beta}, [l, mean, inv_std = std::move(inv_std)](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& gam = self.parents[1]->value;
        Tensor* gx = grad_of(self, 0);
        Tensor* gg = grad_of(self, 1);
        Tensor* gb = grad_of(self, 2);
        for (int i = 0; i < l.n; ++i)
            for (int ch = 0; ch < l.c; ++ch)
                for (int t = 0; t < l.plane; ++t) {
                    const std::size_t idx = l.index(i, ch, t);
                    const real dy = self.grad[idx];
                    if (gx) (*gx)[idx] += dy * gam[ch] * inv_std[ch];
                    if (gg) (*gg)[ch] += dy * (xv[idx] - mean[ch]) * inv_std[ch];
                    if (gb) (*gb)[ch] += dy;
                }
    });
}

// ---------------------------------------------------------------------------
// Image priors and warps
// ---------------------------------------------------------------------------
Var total_variation(const Var& x) {
    if (x.value().rank() < 4) return constant(Tensor(Shape{1}, 0.0));
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const real* v = x.value().data();
    real total = 0.0;
    for (int plane = 0; plane < n * c; ++plane) {
        const real* p = v + static_cast<std::ptrdiff_t>(plane) * h * w;
        for (int r = 0; r < h; ++r)
            for (int s = 0; s < w; ++s) {
                if (s + 1 < w) {
                    const real d = p[r * w + s] - p[r * w + s + 1];
                    total += d * d;
                }
                if (r + 1 < h) {
                    const real d = p[r * w + s] - p[(r + 1) * w + s];
                    total += d * d;
                }
            }
    }
    return make_result(Tensor(Shape{1}, total), {&x}, [n, c, h, w](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        const real dy = self.grad[0];
        const real* v = self.parents[0]->value.data();
        for (int plane = 0; plane < n * c; ++plane) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(plane) * h * w;
            for (int r = 0; r < h; ++r)
                for (int s = 0; s < w; ++s) {
                    const std::ptrdiff_t a = base + r * w + s;
                    if (s + 1 < w) {
                        const real d = 2.0 * dy * (v[a] - v[a + 1]);
                        (*g)[a] += d;
                        (*g)[a + 1] -= d;
                    }
                    if (r + 1 < h) {
                        const real d = 2.0 * dy * (v[a] - v[a + w]);
                        (*g)[a] += d;
                        (*g)[a + w] -= d;
                    }
                }
        }
    });
}

namespace {

struct Tap {
    int out;
    int in;
    real weight;
};

std::vector<Tap> bilinear_taps(const AffineMap& m, int h, int w) {
    std::vector<Tap> taps;
    taps.reserve(static_cast<std::size_t>(h) * w * 4);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const real sx = m[0] * c + m[1] * r + m[2];
            const real sy = m[3] * c + m[4] * r + m[5];
            const real fx0 = std::floor(sx), fy0 = std::floor(sy);
            const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
            const real ax = sx - fx0, ay = sy - fy0;
            const int out = r * w + c;
            const real wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
            const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
            for (int t = 0; t < 4; ++t)
                if (wts[t] != 0.0 && xs[t] >= 0 && xs[t] < w && ys[t] >= 0 && ys[t] < h)
                    taps.push_back({out, ys[t] * w + xs[t], wts[t]});
        }
    return taps;
}

} // namespace

Var warp_affine(const Var& x, std::span<const AffineMap> maps) {
    require_rank4(x, "warp_affine");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (static_cast<int>(maps.size()) != n) throw ArgumentError("warp_affine: one map per sample required");
    std::vector<std::vector<Tap>> taps;
    taps.reserve(maps.size());
    for (const AffineMap& m : maps) taps.push_back(bilinear_taps(m, h, w));
    Tensor out(x.shape(), 0.0);
    const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(h) * w;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(i) * c + ch) * plane;
            for (const Tap& t : taps[i]) out[base + t.out] += t.weight * x.value()[base + t.in];
        }
    return make_result(std::move(out), {&x}, [taps = std::move(taps), c, plane](Node& self) {
        Tensor* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < taps.size(); ++i)
            for (int ch = 0; ch < c; ++ch) {
                const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(i) * c + ch) * plane;
                for (const Tap& t : taps[i]) (*g)[base + t.in] += t.weight * self.grad[base + t.out];
            }
    });
}

} // namespace unlearn::ag
