#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

namespace imaml::ad::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

// cols [C*KH*KW, OH*OW]
void im2col(const double* x, const ConvGeometry& g, double* cols) {
    const std::size_t ohw = g.out_pixels();
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* xc = x + c * g.in_pixels();
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                double* row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * ohw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                    double* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= static_cast<long>(g.height)) {
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) dst[ow] = 0.0;
                        continue;
                    }
                    const double* src = xc + static_cast<std::size_t>(ih) * g.width;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

// Accumulates cols back into x.
void col2im(const double* cols, const ConvGeometry& g, double* x) {
    const std::size_t ohw = g.out_pixels();
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        double* xc = x + c * g.in_pixels();
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const double* row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * ohw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                    if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                    double* dst = xc + static_cast<std::size_t>(ih) * g.width;
                    const double* src = row + oh * g.out_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
                        if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

void conv_forward(std::span<const double> x, std::span<const double> w, const ConvGeometry& g,
                  std::span<double> y) {
    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto ohw = static_cast<Eigen::Index>(g.out_pixels());
    const auto oc = static_cast<Eigen::Index>(g.out_channels);
    ConstMap wm(w.data(), oc, patch);
    std::vector<double> cols;
    if (!is_pointwise(g)) cols.resize(g.patch() * g.out_pixels());
    for (std::size_t b = 0; b < g.batch; ++b) {
        const double* xb = x.data() + b * g.in_channels * g.in_pixels();
        const double* colp = xb;
        if (!is_pointwise(g)) {
            im2col(xb, g, cols.data());
            colp = cols.data();
        }
        Map yb(y.data() + b * g.out_channels * g.out_pixels(), oc, ohw);
        yb.noalias() = wm * ConstMap(colp, patch, ohw);
    }
}

void conv_input_grad(std::span<const double> dy, std::span<const double> w, const ConvGeometry& g,
                     std::span<double> dx) {
    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto ohw = static_cast<Eigen::Index>(g.out_pixels());
    const auto oc = static_cast<Eigen::Index>(g.out_channels);
    ConstMap wm(w.data(), oc, patch);
    std::fill(dx.begin(), dx.end(), 0.0);
    std::vector<double> cols(g.patch() * g.out_pixels());
    for (std::size_t b = 0; b < g.batch; ++b) {
        ConstMap dyb(dy.data() + b * g.out_channels * g.out_pixels(), oc, ohw);
        double* dxb = dx.data() + b * g.in_channels * g.in_pixels();
        if (is_pointwise(g)) {
            Map(dxb, patch, ohw).noalias() = wm.transpose() * dyb;
            continue;
        }
        Map(cols.data(), patch, ohw).noalias() = wm.transpose() * dyb;
        col2im(cols.data(), g, dxb);
    }
}

void conv_weight_grad(std::span<const double> x, std::span<const double> dy, const ConvGeometry& g,
                      std::span<double> dw) {
    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto ohw = static_cast<Eigen::Index>(g.out_pixels());
    const auto oc = static_cast<Eigen::Index>(g.out_channels);
    Map dwm(dw.data(), oc, patch);
    dwm.setZero();
    std::vector<double> cols;
    if (!is_pointwise(g)) cols.resize(g.patch() * g.out_pixels());
    for (std::size_t b = 0; b < g.batch; ++b) {
        const double* xb = x.data() + b * g.in_channels * g.in_pixels();
        const double* colp = xb;
        if (!is_pointwise(g)) {
            im2col(xb, g, cols.data());
            colp = cols.data();
        }
        ConstMap dyb(dy.data() + b * g.out_channels * g.out_pixels(), oc, ohw);
        dwm.noalias() += dyb * ConstMap(colp, patch, ohw).transpose();
    }
}

void matmul(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
            std::size_t n, std::span<double> c) {
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    Map(c.data(), mi, ni).noalias() = ConstMap(a.data(), mi, ki) * ConstMap(b.data(), ki, ni);
}

}  // namespace imaml::ad::kernels
