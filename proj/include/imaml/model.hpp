#pragma once

// Attention-gated encoder-decoder for binary segmentation. All weights live in
// one ParamVector; forward() takes them as (possibly tape-attached) tensors so
// the same code serves inference, the inner loop and both meta-gradients.

#include <cstdint>
#include <string>
#include <vector>

#include "imaml/kv_text.hpp"
#include "imaml/params.hpp"

namespace imaml {

struct AttnUNetConfig {
    std::size_t input_size = 32;
    std::size_t base_channels = 8;
    std::size_t depth = 3;
    std::size_t in_channels = 1;
    bool attention_gates = true;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const AttnUNetConfig&) const = default;
};

/// Parameter layout as a pure function of the config.
LayoutPtr build_layout(const AttnUNetConfig& cfg);

struct GateWeights {
    ad::Tensor wx;    // [F, Cx, 2, 2], stride 2 on the skip
    ad::Tensor wg;    // [F, Cg, 1, 1] on the gating signal
    ad::Tensor bias;  // [F]
    ad::Tensor psi;   // [1, F, 1, 1]
    ad::Tensor psi_bias;  // [1]
};

struct GateOutput {
    ad::Tensor gated;  // skip * alpha
    ad::Tensor alpha;  // [B, 1, H, W], in (0, 1)
};

/// Scales `skip` [B, Cx, H, W] by attention coefficients computed from the
/// skip itself and `gating` [B, Cg, H/2, W/2].
GateOutput attention_gate(const GateWeights& w, const ad::Tensor& skip, const ad::Tensor& gating);

/// skip * alpha with alpha [B, 1, H, W] repeated over channels.
ad::Tensor gate_skip(const ad::Tensor& skip, const ad::Tensor& alpha);

/// Per-sample normalization over (C, H, W) followed by a per-channel affine map.
ad::Tensor group_norm(const ad::Tensor& x, const ad::Tensor& gamma, const ad::Tensor& beta);

class SegModel {
public:
    /// He-uniform conv weights, zero biases, unit norm gains; deterministic per seed.
    static SegModel init(const AttnUNetConfig& cfg);
    /// Wraps existing parameters, e.g. from a checkpoint.
    SegModel(AttnUNetConfig cfg, ParamVector params);

    [[nodiscard]] const AttnUNetConfig& config() const { return cfg_; }
    [[nodiscard]] const ParamVector& params() const { return params_; }
    [[nodiscard]] const LayoutPtr& layout() const { return params_.layout_ptr(); }

    /// Per-pixel foreground probabilities [B, 1, H, W]. When `gates` is given it
    /// receives the attention coefficients of every decoder level.
    ad::Tensor forward(const ParamTensors& params, const ad::Tensor& images,
                       std::vector<ad::Tensor>* gates = nullptr) const;
    /// Detached inference with the given parameter values.
    ad::Tensor predict(const ParamVector& params, const ad::Tensor& images) const;

private:
    AttnUNetConfig cfg_;
    ParamVector params_;
};

void save_model(const std::string& path, const SegModel& model);
SegModel load_model(const std::string& path);

}  // namespace imaml
