#include "evalnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "evalnet/parallel.hpp"

namespace evalnet {

namespace {

bool wants_grad(const TensorImpl& t) { return t.requires_grad || t.tracked; }

void ensure_grad_buf(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
}

// Rounds a freshly accumulated buffer to the active precision.
void round_span(std::vector<double>& v) {
    if (precision() != Precision::Float32) return;
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void record_op(Tensor& out, std::function<void()> fn) {
    out.impl->tracked = true;
    active_tape()->record(out.impl, std::move(fn));
}

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output value");
}
#define EVALNET_FINITE(t, op) debug_check_finite(t, op)
#else
#define EVALNET_FINITE(t, op) ((void)0)
#endif

int div_floor(int a, int b) {
    int q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int div_ceil(int a, int b) { return -div_floor(-a, b); }

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
    int n, ci, h, w;       // input
    int co, k;             // kernel
    int stride, pad, dil;
    int ho, wo;            // output
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                   int padding, int dilation) {
    require(input.rank() == 4, "conv2d: input must be N,C,H,W, got " + shape_str(input.shape()));
    require(kernel.rank() == 4, "conv2d: kernel must be O,I,K,K, got " + shape_str(kernel.shape()));
    require(kernel.dim(2) == kernel.dim(3), "conv2d: kernel must be square");
    require(kernel.dim(2) % 2 == 1, "conv2d: kernel extent must be odd");
    require(stride >= 1 && dilation >= 1 && padding >= 0, "conv2d: bad stride/padding/dilation");
    require(bias.rank() == 1 && bias.dim(0) == kernel.dim(0),
            "conv2d: bias extent must match kernel output channels");
    ConvDims d;
    d.n = input.dim(0);
    d.ci = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.co = kernel.dim(0);
    d.k = kernel.dim(2);
    d.stride = stride;
    d.pad = padding;
    d.dil = dilation;
    require(kernel.dim(1) == d.ci, "conv2d: channel mismatch, input has " + std::to_string(d.ci) +
                                       " kernel expects " + std::to_string(kernel.dim(1)));
    d.ho = (d.h + 2 * padding - dilation * (d.k - 1) - 1) / stride + 1;
    d.wo = (d.w + 2 * padding - dilation * (d.k - 1) - 1) / stride + 1;
    require(d.h + 2 * padding >= dilation * (d.k - 1) + 1 && d.ho > 0 && d.wo > 0,
            "conv2d: non-positive output size");
    return d;
}

// Valid output-column range [lo, hi] such that the sampled input column
// ox*stride - pad + kx*dil stays inside [0, w).
inline void ox_range(const ConvDims& d, int kx, int& lo, int& hi) {
    const int off = kx * d.dil - d.pad;
    lo = std::max(0, div_ceil(-off, d.stride));
    hi = std::min(d.wo - 1, div_floor(d.w - 1 - off, d.stride));
}

void conv2d_forward_kernel(const ConvDims& d, const double* in, const double* wt, const double* bs,
                           double* out) {
    const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
    parallel_for(static_cast<std::size_t>(d.n) * d.co, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t job = lo; job < hi; ++job) {
            const int n = static_cast<int>(job) / d.co;
            const int oc = static_cast<int>(job) % d.co;
            double* op = out + job * out_plane;
            std::fill(op, op + out_plane, bs[oc]);
            for (int ic = 0; ic < d.ci; ++ic) {
                const double* ip = in + (static_cast<std::size_t>(n) * d.ci + ic) * in_plane;
                const double* wr =
                    wt + (static_cast<std::size_t>(oc) * d.ci + ic) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    for (int kx = 0; kx < d.k; ++kx) {
                        const double wv = wr[ky * d.k + kx];
                        int xlo, xhi;
                        ox_range(d, kx, xlo, xhi);
                        if (xlo > xhi) continue;
                        const int off = kx * d.dil - d.pad;
                        for (int oy = 0; oy < d.ho; ++oy) {
                            const int iy = oy * d.stride - d.pad + ky * d.dil;
                            if (iy < 0 || iy >= d.h) continue;
                            double* orow = op + static_cast<std::size_t>(oy) * d.wo;
                            const double* irow = ip + static_cast<std::size_t>(iy) * d.w + off;
                            if (d.stride == 1) {
                                for (int ox = xlo; ox <= xhi; ++ox) orow[ox] += wv * irow[ox];
                            } else {
                                for (int ox = xlo; ox <= xhi; ++ox)
                                    orow[ox] += wv * irow[ox * d.stride];
                            }
                        }
                    }
                }
            }
            if (precision() == Precision::Float32)
                for (std::size_t i = 0; i < out_plane; ++i)
                    op[i] = static_cast<double>(static_cast<float>(op[i]));
        }
    });
}

void conv2d_backward_input(const ConvDims& d, const double* wt, const double* gout, double* gin) {
    const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
    // Each task owns one input plane, so per-element accumulation stays in
    // (oc, ky, kx) order regardless of worker count.
    parallel_for(static_cast<std::size_t>(d.n) * d.ci, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t job = lo; job < hi; ++job) {
            const int n = static_cast<int>(job) / d.ci;
            const int ic = static_cast<int>(job) % d.ci;
            double* gp = gin + job * in_plane;
            for (int oc = 0; oc < d.co; ++oc) {
                const double* go = gout + (static_cast<std::size_t>(n) * d.co + oc) * out_plane;
                const double* wr =
                    wt + (static_cast<std::size_t>(oc) * d.ci + ic) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    for (int kx = 0; kx < d.k; ++kx) {
                        const double wv = wr[ky * d.k + kx];
                        int xlo, xhi;
                        ox_range(d, kx, xlo, xhi);
                        if (xlo > xhi) continue;
                        const int off = kx * d.dil - d.pad;
                        for (int oy = 0; oy < d.ho; ++oy) {
                            const int iy = oy * d.stride - d.pad + ky * d.dil;
                            if (iy < 0 || iy >= d.h) continue;
                            const double* grow = go + static_cast<std::size_t>(oy) * d.wo;
                            double* irow = gp + static_cast<std::size_t>(iy) * d.w + off;
                            if (d.stride == 1) {
                                for (int ox = xlo; ox <= xhi; ++ox) irow[ox] += wv * grow[ox];
                            } else {
                                for (int ox = xlo; ox <= xhi; ++ox)
                                    irow[ox * d.stride] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

void conv2d_backward_weight(const ConvDims& d, const double* in, const double* gout, double* gw) {
    const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
    parallel_for(static_cast<std::size_t>(d.co), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t oc = lo; oc < hi; ++oc) {
            for (int ic = 0; ic < d.ci; ++ic) {
                double* wr = gw + (oc * d.ci + ic) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    for (int kx = 0; kx < d.k; ++kx) {
                        int xlo, xhi;
                        ox_range(d, kx, xlo, xhi);
                        double acc = 0.0;
                        if (xlo <= xhi) {
                            const int off = kx * d.dil - d.pad;
                            for (int n = 0; n < d.n; ++n) {
                                const double* go =
                                    gout + (static_cast<std::size_t>(n) * d.co + oc) * out_plane;
                                const double* ip =
                                    in + (static_cast<std::size_t>(n) * d.ci + ic) * in_plane;
                                for (int oy = 0; oy < d.ho; ++oy) {
                                    const int iy = oy * d.stride - d.pad + ky * d.dil;
                                    if (iy < 0 || iy >= d.h) continue;
                                    const double* grow = go + static_cast<std::size_t>(oy) * d.wo;
                                    const double* irow =
                                        ip + static_cast<std::size_t>(iy) * d.w + off;
                                    if (d.stride == 1) {
                                        for (int ox = xlo; ox <= xhi; ++ox)
                                            acc += grow[ox] * irow[ox];
                                    } else {
                                        for (int ox = xlo; ox <= xhi; ++ox)
                                            acc += grow[ox] * irow[ox * d.stride];
                                    }
                                }
                            }
                        }
                        wr[ky * d.k + kx] += acc;
                    }
                }
            }
        }
    });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding, int dilation) {
    const ConvDims d = conv_dims(input, kernel, bias, stride, padding, dilation);
    Tensor out({d.n, d.co, d.ho, d.wo});
    conv2d_forward_kernel(d, input.data().data(), kernel.data().data(), bias.data().data(),
                          out.mutable_data().data());
    EVALNET_FINITE(out, "conv2d");
    if (grad_enabled({&input, &kernel, &bias})) {
        auto in_i = input.impl, k_i = kernel.impl, b_i = bias.impl, out_i = out.impl;
        record_op(out, [in_i, k_i, b_i, out_i, d]() {
            const double* gout = out_i->grad.data();
            if (wants_grad(*in_i)) {
                ensure_grad_buf(*in_i);
                conv2d_backward_input(d, k_i->data.data(), gout, in_i->grad.data());
                round_span(in_i->grad);
            }
            if (wants_grad(*k_i)) {
                ensure_grad_buf(*k_i);
                conv2d_backward_weight(d, in_i->data.data(), gout, k_i->grad.data());
                round_span(k_i->grad);
            }
            if (wants_grad(*b_i)) {
                ensure_grad_buf(*b_i);
                const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
                for (int oc = 0; oc < d.co; ++oc) {
                    double acc = 0.0;
                    for (int n = 0; n < d.n; ++n) {
                        const double* go =
                            gout + (static_cast<std::size_t>(n) * d.co + oc) * out_plane;
                        for (std::size_t i = 0; i < out_plane; ++i) acc += go[i];
                    }
                    b_i->grad[oc] += acc;
                }
                round_span(b_i->grad);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pixel_shuffle / pooling

Tensor pixel_shuffle(const Tensor& input, int r) {
    require(input.rank() == 4, "pixel_shuffle: input must be N,C,H,W");
    require(r >= 1, "pixel_shuffle: r must be >= 1");
    const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(c_in % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(c_in) +
                                     " not divisible by r^2 = " + std::to_string(r * r));
    const int c_out = c_in / (r * r);
    Tensor out({n, c_out, h * r, w * r});
    const double* in = input.data().data();
    double* op = out.mutable_data().data();
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = in_plane * r * r;
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < c_out; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    const double* ip =
                        in + (static_cast<std::size_t>(ni) * c_in + c * r * r + dy * r + dx) *
                                 in_plane;
                    for (int y = 0; y < h; ++y) {
                        double* orow = op + (static_cast<std::size_t>(ni) * c_out + c) * out_plane +
                                       static_cast<std::size_t>(y * r + dy) * (w * r) + dx;
                        const double* irow = ip + static_cast<std::size_t>(y) * w;
                        for (int x = 0; x < w; ++x) orow[static_cast<std::size_t>(x) * r] = irow[x];
                    }
                }
    if (grad_enabled({&input})) {
        auto in_i = input.impl, out_i = out.impl;
        record_op(out, [in_i, out_i, n, c_in, c_out, h, w, r]() {
            if (!wants_grad(*in_i)) return;
            ensure_grad_buf(*in_i);
            const std::size_t in_plane = static_cast<std::size_t>(h) * w;
            const std::size_t out_plane = in_plane * r * r;
            const double* go = out_i->grad.data();
            for (int ni = 0; ni < n; ++ni)
                for (int c = 0; c < c_out; ++c)
                    for (int dy = 0; dy < r; ++dy)
                        for (int dx = 0; dx < r; ++dx) {
                            double* gp = in_i->grad.data() +
                                         (static_cast<std::size_t>(ni) * c_in + c * r * r + dy * r +
                                          dx) *
                                             in_plane;
                            for (int y = 0; y < h; ++y) {
                                const double* grow =
                                    go + (static_cast<std::size_t>(ni) * c_out + c) * out_plane +
                                    static_cast<std::size_t>(y * r + dy) * (w * r) + dx;
                                double* girow = gp + static_cast<std::size_t>(y) * w;
                                for (int x = 0; x < w; ++x)
                                    girow[x] += grow[static_cast<std::size_t>(x) * r];
                            }
                        }
            round_span(in_i->grad);
        });
    }
    return out;
}

Tensor avg_pool(const Tensor& input, int factor) {
    require(input.rank() == 4, "avg_pool: input must be N,C,H,W");
    require(factor >= 1, "avg_pool: factor must be >= 1");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(h % factor == 0 && w % factor == 0,
            "avg_pool: spatial extent not divisible by factor " + std::to_string(factor));
    const int ho = h / factor, wo = w / factor;
    Tensor out({n, c, ho, wo});
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    const double* in = input.data().data();
    double* op = out.mutable_data().data();
    std::size_t oi = 0;
    for (int p = 0; p < n * c; ++p) {
        const double* ip = in + static_cast<std::size_t>(p) * h * w;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy) {
                    const double* row = ip + static_cast<std::size_t>(oy * factor + dy) * w +
                                        static_cast<std::size_t>(ox) * factor;
                    for (int dx = 0; dx < factor; ++dx) acc += row[dx];
                }
                op[oi++] = store_round(acc * inv);
            }
    }
    if (grad_enabled({&input})) {
        auto in_i = input.impl, out_i = out.impl;
        record_op(out, [in_i, out_i, n, c, h, w, ho, wo, factor, inv]() {
            if (!wants_grad(*in_i)) return;
            ensure_grad_buf(*in_i);
            const double* go = out_i->grad.data();
            std::size_t oi = 0;
            for (int p = 0; p < n * c; ++p) {
                double* gp = in_i->grad.data() + static_cast<std::size_t>(p) * h * w;
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        const double g = go[oi++] * inv;
                        for (int dy = 0; dy < factor; ++dy) {
                            double* row = gp + static_cast<std::size_t>(oy * factor + dy) * w +
                                          static_cast<std::size_t>(ox) * factor;
                            for (int dx = 0; dx < factor; ++dx) row[dx] += g;
                        }
                    }
            }
            round_span(in_i->grad);
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& input) {
    require(input.rank() == 4, "global_avg_pool: input must be N,C,H,W");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    Tensor out({n, c, 1, 1});
    const double inv = 1.0 / (static_cast<double>(h) * w);
    const double* in = input.data().data();
    double* op = out.mutable_data().data();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int p = 0; p < n * c; ++p) {
        double acc = 0.0;
        const double* ip = in + static_cast<std::size_t>(p) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += ip[i];
        op[p] = store_round(acc * inv);
    }
    if (grad_enabled({&input})) {
        auto in_i = input.impl, out_i = out.impl;
        record_op(out, [in_i, out_i, n, c, plane, inv]() {
            if (!wants_grad(*in_i)) return;
            ensure_grad_buf(*in_i);
            for (int p = 0; p < n * c; ++p) {
                const double g = out_i->grad[p] * inv;
                double* gp = in_i->grad.data() + static_cast<std::size_t>(p) * plane;
                for (std::size_t i = 0; i < plane; ++i) gp[i] += g;
            }
            round_span(in_i->grad);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pointwise family

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    Tensor out(a.shape());
    const std::size_t n = a.size();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) op[i] = store_round(pa[i] + pb[i]);
    if (grad_enabled({&a, &b})) {
        auto a_i = a.impl, b_i = b.impl, out_i = out.impl;
        record_op(out, [a_i, b_i, out_i, n]() {
            for (auto* t : {a_i.get(), b_i.get()}) {
                if (!wants_grad(*t)) continue;
                ensure_grad_buf(*t);
                for (std::size_t i = 0; i < n; ++i) t->grad[i] += out_i->grad[i];
                round_span(t->grad);
            }
        });
    }
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "hadamard: shape mismatch " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    Tensor out(a.shape());
    const std::size_t n = a.size();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) op[i] = store_round(pa[i] * pb[i]);
    if (grad_enabled({&a, &b})) {
        auto a_i = a.impl, b_i = b.impl, out_i = out.impl;
        record_op(out, [a_i, b_i, out_i, n]() {
            if (wants_grad(*a_i)) {
                ensure_grad_buf(*a_i);
                for (std::size_t i = 0; i < n; ++i) a_i->grad[i] += out_i->grad[i] * b_i->data[i];
                round_span(a_i->grad);
            }
            if (wants_grad(*b_i)) {
                ensure_grad_buf(*b_i);
                for (std::size_t i = 0; i < n; ++i) b_i->grad[i] += out_i->grad[i] * a_i->data[i];
                round_span(b_i->grad);
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    const double* px = x.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) op[i] = px[i] > 0.0 ? px[i] : 0.0;
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i, n]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            // subgradient 0 at exactly 0
            for (std::size_t i = 0; i < n; ++i)
                if (x_i->data[i] > 0.0) x_i->grad[i] += out_i->grad[i];
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    const double* px = x.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) op[i] = store_round(1.0 / (1.0 + std::exp(-px[i])));
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i, n]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = out_i->data[i];
                x_i->grad[i] += out_i->grad[i] * s * (1.0 - s);
            }
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor scalar_multiply(const Tensor& x, double s) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    const double* px = x.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t i = 0; i < n; ++i) op[i] = store_round(px[i] * s);
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i, n, s]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            for (std::size_t i = 0; i < n; ++i) x_i->grad[i] += out_i->grad[i] * s;
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const Tensor& first = parts.front();
    require(first.rank() == 4, "concat_channels: inputs must be N,C,H,W");
    const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
    int c_total = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 4 && p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
                "concat_channels: N,H,W mismatch");
        c_total += p.dim(1);
    }
    Tensor out({n, c_total, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    double* op = out.mutable_data().data();
    for (int ni = 0; ni < n; ++ni) {
        std::size_t c_off = 0;
        for (const Tensor& p : parts) {
            const std::size_t pc = static_cast<std::size_t>(p.dim(1));
            std::memcpy(op + (static_cast<std::size_t>(ni) * c_total + c_off) * plane,
                        p.data().data() + static_cast<std::size_t>(ni) * pc * plane,
                        pc * plane * sizeof(double));
            c_off += pc;
        }
    }
    bool any = false;
    for (const Tensor& p : parts)
        if (grad_enabled({&p})) any = true;
    if (any) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl);
        auto out_i = out.impl;
        record_op(out, [impls, out_i, n, c_total, plane]() {
            for (int ni = 0; ni < n; ++ni) {
                std::size_t c_off = 0;
                for (const auto& p : impls) {
                    const std::size_t pc = static_cast<std::size_t>(p->shape[1]);
                    if (wants_grad(*p)) {
                        ensure_grad_buf(*p);
                        const double* go =
                            out_i->grad.data() +
                            (static_cast<std::size_t>(ni) * c_total + c_off) * plane;
                        double* gp = p->grad.data() + static_cast<std::size_t>(ni) * pc * plane;
                        for (std::size_t i = 0; i < pc * plane; ++i) gp[i] += go[i];
                    }
                    c_off += pc;
                }
            }
            for (const auto& p : impls)
                if (wants_grad(*p)) round_span(p->grad);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / reshaping

Tensor softmax_last(const Tensor& x) {
    require(x.rank() >= 1, "softmax_last: rank must be >= 1");
    const int l = x.shape().back();
    const std::size_t rows = x.size() / static_cast<std::size_t>(l);
    Tensor out(x.shape());
    const double* px = x.data().data();
    double* op = out.mutable_data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * l;
        double* orow = op + r * l;
        double m = row[0];
        for (int i = 1; i < l; ++i) m = std::max(m, row[i]);
        double sum = 0.0;
        for (int i = 0; i < l; ++i) {
            orow[i] = std::exp(row[i] - m);
            sum += orow[i];
        }
        const double inv = 1.0 / sum;
        for (int i = 0; i < l; ++i) orow[i] = store_round(orow[i] * inv);
    }
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i, rows, l]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = out_i->data.data() + r * l;
                const double* g = out_i->grad.data() + r * l;
                double dot = 0.0;
                for (int i = 0; i < l; ++i) dot += p[i] * g[i];
                double* gx = x_i->grad.data() + r * l;
                for (int i = 0; i < l; ++i) gx[i] += p[i] * (g[i] - dot);
            }
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    require(shape_size(shape) == x.size(), "reshape: element count mismatch for " +
                                               shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), {x.data().begin(), x.data().end()});
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        const std::size_t n = x.size();
        record_op(out, [x_i, out_i, n]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            for (std::size_t i = 0; i < n; ++i) x_i->grad[i] += out_i->grad[i];
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor slice_last(const Tensor& x, int index) {
    require(x.rank() >= 2, "slice_last: rank must be >= 2");
    const int l = x.shape().back();
    require(index >= 0 && index < l, "slice_last: index out of range");
    std::vector<int> shape(x.shape().begin(), x.shape().end() - 1);
    const std::size_t rows = x.size() / static_cast<std::size_t>(l);
    std::vector<double> data(rows);
    const double* px = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) data[r] = px[r * l + index];
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i, rows, l, index]() {
            if (!wants_grad(*x_i)) return;
            ensure_grad_buf(*x_i);
            for (std::size_t r = 0; r < rows; ++r) x_i->grad[r * l + index] += out_i->grad[r];
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
    require(x.rank() == 4, "scale_channels: x must be N,C,H,W");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const bool ok = (s.rank() == 2 && s.dim(0) == n && s.dim(1) == c) ||
                    (s.rank() == 4 && s.dim(0) == n && s.dim(1) == c && s.dim(2) == 1 &&
                     s.dim(3) == 1);
    require(ok, "scale_channels: scale must be N,C or N,C,1,1");
    Tensor out({n, c, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double* px = x.data().data();
    const double* ps = s.data().data();
    double* op = out.mutable_data().data();
    for (int p = 0; p < n * c; ++p) {
        const double sv = ps[p];
        const double* ip = px + static_cast<std::size_t>(p) * plane;
        double* orow = op + static_cast<std::size_t>(p) * plane;
        for (std::size_t i = 0; i < plane; ++i) orow[i] = store_round(ip[i] * sv);
    }
    if (grad_enabled({&x, &s})) {
        auto x_i = x.impl, s_i = s.impl, out_i = out.impl;
        record_op(out, [x_i, s_i, out_i, n, c, plane]() {
            if (wants_grad(*x_i)) {
                ensure_grad_buf(*x_i);
                for (int p = 0; p < n * c; ++p) {
                    const double sv = s_i->data[p];
                    const double* go = out_i->grad.data() + static_cast<std::size_t>(p) * plane;
                    double* gx = x_i->grad.data() + static_cast<std::size_t>(p) * plane;
                    for (std::size_t i = 0; i < plane; ++i) gx[i] += go[i] * sv;
                }
                round_span(x_i->grad);
            }
            if (wants_grad(*s_i)) {
                ensure_grad_buf(*s_i);
                for (int p = 0; p < n * c; ++p) {
                    const double* go = out_i->grad.data() + static_cast<std::size_t>(p) * plane;
                    const double* ip = x_i->data.data() + static_cast<std::size_t>(p) * plane;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += go[i] * ip[i];
                    s_i->grad[p] += acc;
                }
                round_span(s_i->grad);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// local attention

Tensor gather_windows(const Tensor& high, int low_h, int low_w, int scale, int window) {
    require(high.rank() == 4, "gather_windows: input must be N,C,H,W");
    require(scale >= 1 && window >= 1 && window % 2 == 1,
            "gather_windows: scale >= 1 and odd window required");
    const int n = high.dim(0), c = high.dim(1), hh = high.dim(2), hw = high.dim(3);
    const int slots = window * window, half = window / 2;
    Tensor out({n, c, low_h, low_w, slots});
    const double* ph = high.data().data();
    double* op = out.mutable_data().data();
    const std::size_t plane = static_cast<std::size_t>(hh) * hw;
    std::size_t oi = 0;
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const double* ip = ph + (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (int i = 0; i < low_h; ++i)
                for (int j = 0; j < low_w; ++j) {
                    const int cy = i * scale + scale / 2;
                    const int cx = j * scale + scale / 2;
                    for (int dy = -half; dy <= half; ++dy)
                        for (int dx = -half; dx <= half; ++dx) {
                            const int y = cy + dy, x = cx + dx;
                            op[oi++] = (y >= 0 && y < hh && x >= 0 && x < hw)
                                           ? ip[static_cast<std::size_t>(y) * hw + x]
                                           : 0.0;
                        }
                }
        }
    if (grad_enabled({&high})) {
        auto h_i = high.impl, out_i = out.impl;
        record_op(out, [h_i, out_i, n, c, hh, hw, low_h, low_w, scale, half]() {
            if (!wants_grad(*h_i)) return;
            ensure_grad_buf(*h_i);
            const std::size_t plane = static_cast<std::size_t>(hh) * hw;
            const double* go = out_i->grad.data();
            std::size_t oi = 0;
            for (int ni = 0; ni < n; ++ni)
                for (int ci = 0; ci < c; ++ci) {
                    double* gp = h_i->grad.data() + (static_cast<std::size_t>(ni) * c + ci) * plane;
                    for (int i = 0; i < low_h; ++i)
                        for (int j = 0; j < low_w; ++j) {
                            const int cy = i * scale + scale / 2;
                            const int cx = j * scale + scale / 2;
                            for (int dy = -half; dy <= half; ++dy)
                                for (int dx = -half; dx <= half; ++dx) {
                                    const int y = cy + dy, x = cx + dx;
                                    const double g = go[oi++];
                                    if (y >= 0 && y < hh && x >= 0 && x < hw)
                                        gp[static_cast<std::size_t>(y) * hw + x] += g;
                                }
                        }
                }
            round_span(h_i->grad);
        });
    }
    return out;
}

Tensor window_mask(int high_h, int high_w, int low_h, int low_w, int scale, int window) {
    require(scale >= 1 && window >= 1 && window % 2 == 1,
            "window_mask: scale >= 1 and odd window required");
    const int slots = window * window, half = window / 2;
    Tensor mask({low_h, low_w, slots});
    double* mp = mask.mutable_data().data();
    std::size_t oi = 0;
    for (int i = 0; i < low_h; ++i)
        for (int j = 0; j < low_w; ++j) {
            const int cy = i * scale + scale / 2;
            const int cx = j * scale + scale / 2;
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx) {
                    const int y = cy + dy, x = cx + dx;
                    mp[oi++] = (y >= 0 && y < high_h && x >= 0 && x < high_w) ? 1.0 : 0.0;
                }
        }
    return mask;
}

namespace {

// Softmax over the valid slots of one window; returns probabilities (0 on
// masked slots).
void window_softmax(const double* logits, const double* mask, int slots, double* prob) {
    double m = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < slots; ++s)
        if (mask[s] != 0.0) m = std::max(m, logits[s]);
    if (m == -std::numeric_limits<double>::infinity())
        throw DataError("local_dot_attention: window fully masked");
    double sum = 0.0;
    for (int s = 0; s < slots; ++s) {
        if (mask[s] != 0.0) {
            prob[s] = std::exp(logits[s] - m);
            sum += prob[s];
        } else {
            prob[s] = 0.0;
        }
    }
    const double inv = 1.0 / sum;
    for (int s = 0; s < slots; ++s) prob[s] *= inv;
}

}  // namespace

Tensor local_dot_attention(const Tensor& query, const Tensor& keys, const Tensor& values,
                           const Tensor& mask) {
    require(query.rank() == 4, "local_dot_attention: query must be N,C,H,W");
    const int n = query.dim(0), c = query.dim(1), h = query.dim(2), w = query.dim(3);
    require(keys.rank() == 5 && values.rank() == 5, "local_dot_attention: keys/values must be 5-D");
    require(keys.same_shape(values), "local_dot_attention: keys/values shape mismatch");
    require(keys.dim(0) == n && keys.dim(1) == c && keys.dim(2) == h && keys.dim(3) == w,
            "local_dot_attention: keys do not match query");
    const int slots = keys.dim(4);
    require(mask.rank() == 3 && mask.dim(0) == h && mask.dim(1) == w && mask.dim(2) == slots,
            "local_dot_attention: mask must be H,W,slots");
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));

    Tensor out({n, c, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t kstride_c = plane * slots;  // per-channel stride in keys/values
    const double* pq = query.data().data();
    const double* pk = keys.data().data();
    const double* pv = values.data().data();
    const double* pm = mask.data().data();
    double* po = out.mutable_data().data();

    // probabilities retained for the backward rule
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * plane * slots);
    std::vector<double> logits(static_cast<std::size_t>(slots));
    for (int ni = 0; ni < n; ++ni) {
        const std::size_t nq = static_cast<std::size_t>(ni) * c * plane;
        const std::size_t nk = static_cast<std::size_t>(ni) * c * kstride_c;
        for (std::size_t pos = 0; pos < plane; ++pos) {
            const double* mrow = pm + pos * slots;
            for (int s = 0; s < slots; ++s) {
                if (mrow[s] == 0.0) {
                    logits[s] = 0.0;
                    continue;
                }
                double acc = 0.0;
                for (int ci = 0; ci < c; ++ci)
                    acc += pq[nq + ci * plane + pos] * pk[nk + ci * kstride_c + pos * slots + s];
                logits[s] = acc * scale;
            }
            double* prow = probs->data() + (static_cast<std::size_t>(ni) * plane + pos) * slots;
            window_softmax(logits.data(), mrow, slots, prow);
            for (int ci = 0; ci < c; ++ci) {
                double acc = 0.0;
                const double* vrow = pv + nk + ci * kstride_c + pos * slots;
                for (int s = 0; s < slots; ++s) acc += prow[s] * vrow[s];
                po[nq + ci * plane + pos] = store_round(acc);
            }
        }
    }
    EVALNET_FINITE(out, "local_dot_attention");
    if (grad_enabled({&query, &keys, &values})) {
        auto q_i = query.impl, k_i = keys.impl, v_i = values.impl, out_i = out.impl;
        record_op(out, [q_i, k_i, v_i, out_i, probs, n, c, plane, kstride_c, slots, scale]() {
            const bool gq = wants_grad(*q_i), gk = wants_grad(*k_i), gv = wants_grad(*v_i);
            if (gq) ensure_grad_buf(*q_i);
            if (gk) ensure_grad_buf(*k_i);
            if (gv) ensure_grad_buf(*v_i);
            std::vector<double> gp(slots), gl(slots);
            for (int ni = 0; ni < n; ++ni) {
                const std::size_t nq = static_cast<std::size_t>(ni) * c * plane;
                const std::size_t nk = static_cast<std::size_t>(ni) * c * kstride_c;
                for (std::size_t pos = 0; pos < plane; ++pos) {
                    const double* prow =
                        probs->data() + (static_cast<std::size_t>(ni) * plane + pos) * slots;
                    // d(out)/d(prob_s) summed over channels
                    for (int s = 0; s < slots; ++s) {
                        double acc = 0.0;
                        for (int ci = 0; ci < c; ++ci)
                            acc += out_i->grad[nq + ci * plane + pos] *
                                   v_i->data[nk + ci * kstride_c + pos * slots + s];
                        gp[s] = acc;
                    }
                    double dot = 0.0;
                    for (int s = 0; s < slots; ++s) dot += prow[s] * gp[s];
                    for (int s = 0; s < slots; ++s) gl[s] = prow[s] * (gp[s] - dot);
                    for (int ci = 0; ci < c; ++ci) {
                        const std::size_t qi = nq + ci * plane + pos;
                        const std::size_t ki = nk + ci * kstride_c + pos * slots;
                        const double go = out_i->grad[qi];
                        if (gq) {
                            double acc = 0.0;
                            for (int s = 0; s < slots; ++s) acc += gl[s] * k_i->data[ki + s];
                            q_i->grad[qi] += acc * scale;
                        }
                        if (gk) {
                            const double qv = q_i->data[qi] * scale;
                            for (int s = 0; s < slots; ++s) k_i->grad[ki + s] += gl[s] * qv;
                        }
                        if (gv) {
                            for (int s = 0; s < slots; ++s) v_i->grad[ki + s] += prow[s] * go;
                        }
                    }
                }
            }
            if (gq) round_span(q_i->grad);
            if (gk) round_span(k_i->grad);
            if (gv) round_span(v_i->grad);
        });
    }
    return out;
}

std::vector<double> local_attention_weights(const Tensor& query, const Tensor& keys,
                                            const Tensor& mask, int n, int y, int x) {
    const int c = query.dim(1), h = query.dim(2), w = query.dim(3);
    const int slots = keys.dim(4);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t kstride_c = plane * slots;
    const std::size_t pos = static_cast<std::size_t>(y) * w + x;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<double> logits(slots), prob(slots);
    const double* mrow = mask.data().data() + pos * slots;
    for (int s = 0; s < slots; ++s) {
        if (mrow[s] == 0.0) {
            logits[s] = 0.0;
            continue;
        }
        double acc = 0.0;
        for (int ci = 0; ci < c; ++ci)
            acc += query.at(static_cast<std::size_t>(n) * c * plane + ci * plane + pos) *
                   keys.at(static_cast<std::size_t>(n) * c * kstride_c + ci * kstride_c +
                           pos * slots + s);
        logits[s] = acc * scale;
    }
    window_softmax(logits.data(), mrow, slots, prob.data());
    return prob;
}

// ---------------------------------------------------------------------------
// loss

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (const double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    EVALNET_FINITE(out, "sum");
    if (grad_enabled({&x})) {
        auto x_i = x.impl, out_i = out.impl;
        record_op(out, [x_i, out_i]() {
            const double g0 = out_i->grad[0];
            ensure_grad_buf(*x_i);
            for (double& g : x_i->grad) g += g0;
            round_span(x_i->grad);
        });
    }
    return out;
}

Tensor loss(const Tensor& pred, const Tensor& target, LossKind kind) {
    require(pred.same_shape(target), "loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                         shape_str(target.shape()));
    const std::size_t n = pred.size();
    require(n >= 1, "loss: empty tensors");
    const double* pp = pred.data().data();
    const double* pt = target.data().data();
    double acc = 0.0;
    if (kind == LossKind::Mse) {
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pp[i] - pt[i];
            acc += d * d;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) acc += std::fabs(pp[i] - pt[i]);
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    EVALNET_FINITE(out, "loss");
    if (grad_enabled({&pred, &target})) {
        auto p_i = pred.impl, t_i = target.impl, out_i = out.impl;
        record_op(out, [p_i, t_i, out_i, n, kind]() {
            const double g0 = out_i->grad[0] / static_cast<double>(n);
            const bool gp = wants_grad(*p_i), gt = wants_grad(*t_i);
            if (gp) ensure_grad_buf(*p_i);
            if (gt) ensure_grad_buf(*t_i);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = p_i->data[i] - t_i->data[i];
                double dd;
                if (kind == LossKind::Mse)
                    dd = 2.0 * d * g0;
                else
                    dd = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * g0;
                if (gp) p_i->grad[i] += dd;
                if (gt) t_i->grad[i] -= dd;
            }
            if (gp) round_span(p_i->grad);
            if (gt) round_span(t_i->grad);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward / grad_check

void backward(const Tensor& root) {
    Tape* tape = active_tape();
    if (!tape) throw DataError("backward: no active tape");
    if (root.size() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.impl->tracked) throw DataError("backward: root was not recorded on the active tape");
    root.impl->grad.assign(1, 1.0);
    const auto& entries = tape->entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (!it->output->grad.empty()) it->backward();
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps,
                  std::size_t max_coords, std::uint64_t subsample_seed) {
    PrecisionGuard mode(Precision::Float64);
    std::vector<double> analytic;
    {
        Tensor x = point.clone();
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
        backward(y);
        if (x.has_grad())
            analytic.assign(x.grad().begin(), x.grad().end());
        else
            analytic.assign(point.size(), 0.0);
    }
    std::vector<std::size_t> coords(point.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && max_coords < coords.size()) {
        Rng rng(subsample_seed);
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j =
                i + static_cast<std::size_t>(rng.uniform_int(coords.size() - i));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }
    double max_rel = 0.0;
    NoGradScope ng;
    for (std::size_t ci : coords) {
        Tensor xp = point.clone();
        xp.set_requires_grad(false);
        xp.mutable_data()[ci] += eps;
        const double fp = f(xp).item();
        Tensor xm = point.clone();
        xm.set_requires_grad(false);
        xm.mutable_data()[ci] -= eps;
        const double fm = f(xm).item();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[ci];
        const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace evalnet
