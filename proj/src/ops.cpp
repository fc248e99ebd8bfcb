#include "imaml/ops.hpp"

#include <cmath>
#include <initializer_list>

#include "conv_kernels.hpp"
#include "imaml/error.hpp"

namespace imaml::ad {

namespace {

Tensor record(Tensor result, std::initializer_list<Tensor> inputs, BackwardFn fn) {
    return Tape::record(std::move(result), std::span<const Tensor>(inputs.begin(), inputs.size()),
                        std::move(fn));
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined()) throw Error(std::string(op) + ": undefined operand");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    require_defined(op, a);
    require_defined(op, b);
    if (a.shape() != b.shape()) {
        throw Error(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                    to_string(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    require_defined(op, t);
    if (t.shape().size() != rank) {
        throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                    to_string(t.shape()));
    }
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return Tensor(x.shape(), std::move(out));
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
    return Tensor(a.shape(), std::move(out));
}

Tensor mask_where(const Tensor& x, double lo, double hi) {
    return map_unary(x, [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

IndexMap make_index(std::vector<std::uint32_t> index) {
    return std::make_shared<const std::vector<std::uint32_t>>(std::move(index));
}

kernels::ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w,
                                    std::size_t stride, std::size_t pad) {
    if (x.size() != 4 || w.size() != 4) {
        throw Error(std::string(op) + ": expected 4-D input and weight, got " + to_string(x) +
                    " and " + to_string(w));
    }
    if (x[1] != w[1]) {
        throw Error(std::string(op) + ": channel mismatch, input " + to_string(x) + " vs weight " +
                    to_string(w));
    }
    if (stride == 0) throw Error(std::string(op) + ": stride must be positive");
    if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
        throw Error(std::string(op) + ": kernel " + to_string(w) + " larger than padded input " +
                    to_string(x));
    }
    kernels::ConvGeometry g;
    g.batch = x[0];
    g.in_channels = x[1];
    g.height = x[2];
    g.width = x[3];
    g.out_channels = w[0];
    g.kernel_h = w[2];
    g.kernel_w = w[3];
    g.stride = stride;
    g.pad = pad;
    g.out_h = (x[2] + 2 * pad - w[2]) / stride + 1;
    g.out_w = (x[3] + 2 * pad - w[3]) / stride + 1;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    return record(map_binary(a, b, [](double x, double y) { return x + y; }), {a, b},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{g, g};
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    return record(map_binary(a, b, [](double x, double y) { return x - y; }), {a, b},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{g, needs[1] ? neg(g) : Tensor()};
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    return record(map_binary(a, b, [](double x, double y) { return x * y; }), {a, b},
                  [a, b](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{needs[0] ? mul(g, b) : Tensor(),
                                                 needs[1] ? mul(g, a) : Tensor()};
                  });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    return record(map_binary(a, b, [](double x, double y) { return x / y; }), {a, b},
                  [a, b](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{
                          needs[0] ? div(g, b) : Tensor(),
                          needs[1] ? neg(div(mul(g, a), mul(b, b))) : Tensor()};
                  });
}

Tensor neg(const Tensor& a) {
    require_defined("neg", a);
    return record(map_unary(a, [](double x) { return -x; }), {a},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{neg(g)};
                  });
}

Tensor add_scalar(const Tensor& a, double c) {
    require_defined("add_scalar", a);
    return record(map_unary(a, [c](double x) { return x + c; }), {a},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{g};
                  });
}

Tensor mul_scalar(const Tensor& a, double c) {
    require_defined("mul_scalar", a);
    return record(map_unary(a, [c](double x) { return x * c; }), {a},
                  [c](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul_scalar(g, c)};
                  });
}

Tensor relu(const Tensor& x) {
    require_defined("relu", x);
    return record(map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, mask_where(x, 0.0, INFINITY))};
                  });
}

Tensor sigmoid(const Tensor& x) {
    require_defined("sigmoid", x);
    return record(map_unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, mul(out, add_scalar(neg(out), 1.0)))};
                  });
}

Tensor log(const Tensor& x) {
    require_defined("log", x);
    return record(map_unary(x, [](double v) { return std::log(v); }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{div(g, x)};
                  });
}

Tensor exp(const Tensor& x) {
    require_defined("exp", x);
    return record(map_unary(x, [](double v) { return std::exp(v); }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, out)};
                  });
}

Tensor cosh(const Tensor& x) {
    require_defined("cosh", x);
    return record(map_unary(x, [](double v) { return std::cosh(v); }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, sinh(x))};
                  });
}

Tensor sinh(const Tensor& x) {
    require_defined("sinh", x);
    return record(map_unary(x, [](double v) { return std::sinh(v); }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, cosh(x))};
                  });
}

Tensor sqrt(const Tensor& x) {
    require_defined("sqrt", x);
    return record(map_unary(x, [](double v) { return std::sqrt(v); }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{div(g, mul_scalar(out, 2.0))};
                  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    require_defined("clamp", x);
    if (!(lo <= hi)) throw Error("clamp: empty interval");
    return record(map_unary(x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); }), {x},
                  [x, lo, hi](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, mask_where(x, lo, hi))};
                  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
    require_defined("sum", x);
    double s = 0.0;
    for (double v : x.data()) s += v;
    const Shape shape = x.shape();
    return record(Tensor::scalar(s), {x},
                  [shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{expand(g, shape)};
                  });
}

Tensor mean(const Tensor& x) {
    require_defined("mean", x);
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor expand(const Tensor& scalar, const Shape& shape) {
    require_defined("expand", scalar);
    if (scalar.numel() != 1) {
        throw Error("expand: source must have one element, got " + to_string(scalar.shape()));
    }
    const Shape src_shape = scalar.shape();
    return record(Tensor::full(shape, scalar.item()), {scalar},
                  [src_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{reshape(sum(g), src_shape)};
                  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    require_defined("reshape", x);
    if (x.shape() == shape) return x;
    const Shape src_shape = x.shape();
    return record(Tensor::view(x, shape), {x},
                  [src_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{reshape(g, src_shape)};
                  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.shape()[1] != b.shape()[0]) {
        throw Error("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n);
    kernels::matmul(a.data(), b.data(), m, k, n, out);
    return record(Tensor({m, n}, std::move(out)), {a, b},
                  [a, b](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{needs[0] ? matmul(g, transpose(b)) : Tensor(),
                                                 needs[1] ? matmul(transpose(a), g) : Tensor()};
                  });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    const auto in = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    return record(Tensor({c, r}, std::move(out)), {a},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{transpose(g)};
                  });
}

// ---------------------------------------------------------------------------
// Convolution family. conv2d, its input adjoint and its weight adjoint are
// closed under differentiation: each one's backward uses only the other two.

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    require_defined("conv2d", x);
    require_defined("conv2d", w);
    const auto g = conv_geometry("conv2d", x.shape(), w.shape(), stride, pad);
    std::vector<double> out(g.batch * g.out_channels * g.out_pixels());
    kernels::conv_forward(x.data(), w.data(), g, out);
    return record(Tensor({g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out)), {x, w},
                  [x, w, stride, pad](const Tensor& gy, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{
                          needs[0] ? conv2d_input_grad(gy, w, x.shape(), stride, pad) : Tensor(),
                          needs[1] ? conv2d_weight_grad(x, gy, w.shape(), stride, pad) : Tensor()};
                  });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         std::size_t stride, std::size_t pad) {
    require_defined("conv2d_input_grad", grad_out);
    require_defined("conv2d_input_grad", w);
    const auto g = conv_geometry("conv2d_input_grad", input_shape, w.shape(), stride, pad);
    const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
    if (grad_out.shape() != expected) {
        throw Error("conv2d_input_grad: shape mismatch " + to_string(grad_out.shape()) + " vs " +
                    to_string(expected));
    }
    std::vector<double> out(numel(input_shape));
    kernels::conv_input_grad(grad_out.data(), w.data(), g, out);
    return record(Tensor(input_shape, std::move(out)), {grad_out, w},
                  [grad_out, w, stride, pad](const Tensor& gz, const Tensor&,
                                             const std::vector<bool>& needs) {
                      return std::vector<Tensor>{
                          needs[0] ? conv2d(gz, w, stride, pad) : Tensor(),
                          needs[1] ? conv2d_weight_grad(gz, grad_out, w.shape(), stride, pad)
                                   : Tensor()};
                  });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                          std::size_t stride, std::size_t pad) {
    require_defined("conv2d_weight_grad", x);
    require_defined("conv2d_weight_grad", grad_out);
    const auto g = conv_geometry("conv2d_weight_grad", x.shape(), weight_shape, stride, pad);
    const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
    if (grad_out.shape() != expected) {
        throw Error("conv2d_weight_grad: shape mismatch " + to_string(grad_out.shape()) + " vs " +
                    to_string(expected));
    }
    std::vector<double> out(numel(weight_shape));
    kernels::conv_weight_grad(x.data(), grad_out.data(), g, out);
    return record(Tensor(weight_shape, std::move(out)), {x, grad_out},
                  [x, grad_out, stride, pad](const Tensor& gz, const Tensor&,
                                             const std::vector<bool>& needs) {
                      return std::vector<Tensor>{
                          needs[0] ? conv2d_input_grad(grad_out, gz, x.shape(), stride, pad) : Tensor(),
                          needs[1] ? conv2d(x, gz, stride, pad) : Tensor()};
                  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    require_rank("conv_transpose2d", x, 4);
    require_rank("conv_transpose2d", w, 4);
    if (x.shape()[1] != w.shape()[0]) {
        throw Error("conv_transpose2d: channel mismatch, input " + to_string(x.shape()) +
                    " vs weight " + to_string(w.shape()));
    }
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if ((xs[2] - 1) * stride + ws[2] <= 2 * pad || (xs[3] - 1) * stride + ws[3] <= 2 * pad) {
        throw Error("conv_transpose2d: padding too large for input " + to_string(xs));
    }
    const Shape out_shape{xs[0], ws[1], (xs[2] - 1) * stride + ws[2] - 2 * pad,
                          (xs[3] - 1) * stride + ws[3] - 2 * pad};
    return conv2d_input_grad(x, w, out_shape, stride, pad);
}

// ---------------------------------------------------------------------------
// Index maps

Tensor gather(const Tensor& x, IndexMap index, const Shape& out_shape) {
    require_defined("gather", x);
    if (!index || index->size() != numel(out_shape)) throw Error("gather: index size mismatch");
    const auto in = x.data();
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*index)[i]];
    const Shape in_shape = x.shape();
    return record(Tensor(out_shape, std::move(out)), {x},
                  [index, in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{scatter_add(g, index, in_shape)};
                  });
}

Tensor scatter_add(const Tensor& g, IndexMap index, const Shape& out_shape) {
    require_defined("scatter_add", g);
    if (!index || index->size() != g.numel()) throw Error("scatter_add: index size mismatch");
    const auto in = g.data();
    std::vector<double> out(numel(out_shape), 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) out[(*index)[i]] += in[i];
    const Shape in_shape = g.shape();
    return record(Tensor(out_shape, std::move(out)), {g},
                  [index, in_shape](const Tensor& gz, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{gather(gz, index, in_shape)};
                  });
}

Tensor max_pool2(const Tensor& x) {
    require_rank("max_pool2", x, 4);
    const auto& s = x.shape();
    if (s[2] % 2 || s[3] % 2) throw Error("max_pool2: spatial size must be even, got " + to_string(s));
    const std::size_t oh = s[2] / 2, ow = s[3] / 2;
    const auto in = x.data();
    std::vector<std::uint32_t> idx(s[0] * s[1] * oh * ow);
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < s[0] * s[1]; ++bc) {
        const std::size_t base = bc * s[2] * s[3];
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = base + 2 * i * s[3] + 2 * j;
                for (std::size_t di = 0; di < 2; ++di) {
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t k = base + (2 * i + di) * s[3] + 2 * j + dj;
                        if (in[k] > in[best]) best = k;
                    }
                }
                idx[o++] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return gather(x, make_index(std::move(idx)), {s[0], s[1], oh, ow});
}

Tensor upsample2(const Tensor& x) {
    require_rank("upsample2", x, 4);
    const auto& s = x.shape();
    const std::size_t oh = s[2] * 2, ow = s[3] * 2;
    std::vector<std::uint32_t> idx(s[0] * s[1] * oh * ow);
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < s[0] * s[1]; ++bc) {
        const std::size_t base = bc * s[2] * s[3];
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                idx[o++] = static_cast<std::uint32_t>(base + (i / 2) * s[3] + j / 2);
    }
    return gather(x, make_index(std::move(idx)), {s[0], s[1], oh, ow});
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
    require_rank("slice_channels", x, 4);
    const auto& s = x.shape();
    if (count == 0 || begin + count > s[1]) {
        throw Error("slice_channels: range [" + std::to_string(begin) + ", " +
                    std::to_string(begin + count) + ") outside " + to_string(s));
    }
    const std::size_t hw = s[2] * s[3];
    std::vector<std::uint32_t> idx(s[0] * count * hw);
    std::size_t o = 0;
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t c = 0; c < count; ++c)
            for (std::size_t p = 0; p < hw; ++p)
                idx[o++] = static_cast<std::uint32_t>((b * s[1] + begin + c) * hw + p);
    return gather(x, make_index(std::move(idx)), {s[0], count, s[2], s[3]});
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank("concat_channels", a, 4);
    require_rank("concat_channels", b, 4);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
        throw Error("concat_channels: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
    }
    const std::size_t hw = sa[2] * sa[3];
    const std::size_t c = sa[1] + sb[1];
    std::vector<double> out(sa[0] * c * hw);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t n = 0; n < sa[0]; ++n) {
        std::copy_n(da.data() + n * sa[1] * hw, sa[1] * hw, out.data() + n * c * hw);
        std::copy_n(db.data() + n * sb[1] * hw, sb[1] * hw, out.data() + (n * c + sa[1]) * hw);
    }
    const std::size_t ca = sa[1], cb = sb[1];
    return record(Tensor({sa[0], c, sa[2], sa[3]}, std::move(out)), {a, b},
                  [ca, cb](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      return std::vector<Tensor>{needs[0] ? slice_channels(g, 0, ca) : Tensor(),
                                                 needs[1] ? slice_channels(g, ca, cb) : Tensor()};
                  });
}

namespace {

// index[i] = channel of element i in a [B, C, H, W] tensor
IndexMap channel_index(const Shape& s) {
    const std::size_t hw = s[2] * s[3];
    std::vector<std::uint32_t> idx(numel(s));
    std::size_t o = 0;
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t c = 0; c < s[1]; ++c)
            for (std::size_t p = 0; p < hw; ++p) idx[o++] = static_cast<std::uint32_t>(c);
    return make_index(std::move(idx));
}

// index[i] = (b, 0, h, w) offset for element i of [B, C, H, W]
IndexMap single_channel_index(const Shape& s) {
    const std::size_t hw = s[2] * s[3];
    std::vector<std::uint32_t> idx(numel(s));
    std::size_t o = 0;
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t c = 0; c < s[1]; ++c)
            for (std::size_t p = 0; p < hw; ++p) idx[o++] = static_cast<std::uint32_t>(b * hw + p);
    return make_index(std::move(idx));
}

IndexMap sample_index(const Shape& s) {
    const std::size_t per = numel(s) / s[0];
    std::vector<std::uint32_t> idx(numel(s));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i / per);
    return make_index(std::move(idx));
}

}  // namespace

Tensor channel_broadcast(const Tensor& v, const Shape& shape) {
    require_rank("channel_broadcast", v, 1);
    if (shape.size() != 4 || shape[1] != v.shape()[0]) {
        throw Error("channel_broadcast: shape mismatch " + to_string(v.shape()) + " vs " +
                    to_string(shape));
    }
    return gather(v, channel_index(shape), shape);
}

Tensor channel_sum(const Tensor& x) {
    require_rank("channel_sum", x, 4);
    return scatter_add(x, channel_index(x.shape()), {x.shape()[1]});
}

Tensor repeat_channels(const Tensor& x, std::size_t channels) {
    require_rank("repeat_channels", x, 4);
    if (x.shape()[1] != 1) throw Error("repeat_channels: expected one channel, got " + to_string(x.shape()));
    const Shape out{x.shape()[0], channels, x.shape()[2], x.shape()[3]};
    return gather(x, single_channel_index(out), out);
}

Tensor sum_channels(const Tensor& x) {
    require_rank("sum_channels", x, 4);
    const auto& s = x.shape();
    return scatter_add(x, single_channel_index(s), {s[0], 1, s[2], s[3]});
}

Tensor sample_broadcast(const Tensor& v, const Shape& shape) {
    require_rank("sample_broadcast", v, 1);
    if (shape.empty() || shape[0] != v.shape()[0]) {
        throw Error("sample_broadcast: shape mismatch " + to_string(v.shape()) + " vs " +
                    to_string(shape));
    }
    return gather(v, sample_index(shape), shape);
}

Tensor sample_sum(const Tensor& x) {
    require_defined("sample_sum", x);
    return scatter_add(x, sample_index(x.shape()), {x.shape()[0]});
}

}  // namespace imaml::ad
