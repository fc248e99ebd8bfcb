#pragma once

#include <cstddef>
#include <span>

namespace imaml::ad::kernels {

struct ConvGeometry {
    std::size_t batch = 0, in_channels = 0, height = 0, width = 0;
    std::size_t out_channels = 0, kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1, pad = 0;
    std::size_t out_h = 0, out_w = 0;

    [[nodiscard]] std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
    [[nodiscard]] std::size_t out_pixels() const { return out_h * out_w; }
    [[nodiscard]] std::size_t in_pixels() const { return height * width; }
};

// x [B, C, H, W], w [OC, C, KH, KW] -> y [B, OC, OH, OW]
void conv_forward(std::span<const double> x, std::span<const double> w, const ConvGeometry& g,
                  std::span<double> y);
// dy [B, OC, OH, OW], w -> dx [B, C, H, W]
void conv_input_grad(std::span<const double> dy, std::span<const double> w, const ConvGeometry& g,
                     std::span<double> dx);
// x, dy -> dw [OC, C, KH, KW]
void conv_weight_grad(std::span<const double> x, std::span<const double> dy, const ConvGeometry& g,
                      std::span<double> dw);

// Row-major [m, k] x [k, n] -> [m, n]
void matmul(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
            std::size_t n, std::span<double> c);

}  // namespace imaml::ad::kernels
