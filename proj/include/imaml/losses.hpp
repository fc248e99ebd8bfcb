#pragma once

// Segmentation objective (cross-entropy plus a dice term plus an L2 term) and
// the overlap metrics used for reporting.

#include <string_view>

#include "imaml/kv_text.hpp"
#include "imaml/params.hpp"

namespace imaml {

struct LossConfig {
    /// Used by compound_loss only; not part of the serialized fields, the
    /// training code takes its lambdas from the inner/fine-tune configs.
    double lambda_reg = 100.0;
    double dice_smooth = 1.0;
    bool use_logcosh = true;
    double epsilon = 1e-7;

    void validate() const;
    [[nodiscard]] kv::Fields fields() const;
    void set(std::string_view key, std::string_view value);
    bool operator==(const LossConfig&) const = default;
};

/// Mean binary cross-entropy; predictions are clamped into [eps, 1 - eps].
ad::Tensor bce(const ad::Tensor& pred, const ad::Tensor& target, double epsilon = 1e-7);
/// 1 - (2 sum(t p) + s) / (sum(t) + sum(p) + s) over the whole batch.
ad::Tensor dice_loss(const ad::Tensor& pred, const ad::Tensor& target, double smooth = 1.0);
ad::Tensor logcosh_dice(const ad::Tensor& pred, const ad::Tensor& target, double smooth = 1.0);

/// bce + (logcosh_dice or dice_loss), no parameter term.
ad::Tensor data_loss(const ad::Tensor& pred, const ad::Tensor& target, const LossConfig& cfg);

/// With an anchor: lambda/2 * |params - anchor|^2. Without: lambda * |params|^2.
/// Returns an undefined tensor when lambda is zero.
ad::Tensor regularizer(const ParamTensors& params, const ParamTensors* anchor, double lambda);

ad::Tensor compound_loss(const ad::Tensor& pred, const ad::Tensor& target, const ParamTensors& params,
                         const ParamTensors* anchor, const LossConfig& cfg);
ad::Tensor compound_loss(const ad::Tensor& pred, const ad::Tensor& target, const ParamTensors& params,
                         const ParamVector* anchor, const LossConfig& cfg);

/// 1 where pred > threshold, else 0.
ad::Tensor binarize(const ad::Tensor& pred, double threshold = 0.5);

/// Overlap of two binary masks (values > 0.5 count as foreground). Both empty
/// counts as a perfect match.
double dsc(const ad::Tensor& pred_binary, const ad::Tensor& target);
double iou(const ad::Tensor& pred_binary, const ad::Tensor& target);

}  // namespace imaml
