#include "imaml/losses.hpp"

#include <cmath>

#include "imaml/error.hpp"
#include "imaml/ops.hpp"

namespace imaml {

using ad::Tensor;

namespace {

void require_same_shape(const char* op, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw Error(std::string(op) + ": shape mismatch " + ad::to_string(pred.shape()) + " vs " +
                    ad::to_string(target.shape()));
    }
}

struct Overlap {
    double pred = 0, target = 0, both = 0;
};

Overlap count(const char* op, const Tensor& pred, const Tensor& target) {
    require_same_shape(op, pred, target);
    Overlap o;
    const auto p = pred.data();
    const auto t = target.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pi = p[i] > 0.5;
        const bool ti = t[i] > 0.5;
        o.pred += pi;
        o.target += ti;
        o.both += pi && ti;
    }
    return o;
}

}  // namespace

void LossConfig::validate() const {
    if (!(lambda_reg >= 0.0)) throw Error("loss config: lambda_reg must be >= 0");
    if (!(dice_smooth > 0.0)) throw Error("loss config: dice_smooth must be > 0");
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw Error("loss config: epsilon must lie in (0, 0.5)");
}

kv::Fields LossConfig::fields() const {
    return {{"dice_smooth", kv::from_double(dice_smooth)},
            {"use_logcosh", kv::from_bool(use_logcosh)},
            {"epsilon", kv::from_double(epsilon)}};
}

void LossConfig::set(std::string_view key, std::string_view value) {
    if (key == "dice_smooth") dice_smooth = kv::to_double(key, value);
    else if (key == "use_logcosh") use_logcosh = kv::to_bool(key, value);
    else if (key == "epsilon") epsilon = kv::to_double(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

Tensor bce(const Tensor& pred, const Tensor& target, double epsilon) {
    require_same_shape("bce", pred, target);
    const Tensor p = ad::clamp(pred, epsilon, 1.0 - epsilon);
    const Tensor one_minus_t = ad::add_scalar(ad::neg(target), 1.0);
    const Tensor one_minus_p = ad::add_scalar(ad::neg(p), 1.0);
    const Tensor ll = ad::add(ad::mul(target, ad::log(p)), ad::mul(one_minus_t, ad::log(one_minus_p)));
    return ad::neg(ad::mean(ll));
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double smooth) {
    require_same_shape("dice_loss", pred, target);
    const Tensor inter = ad::add_scalar(ad::mul_scalar(ad::sum(ad::mul(target, pred)), 2.0), smooth);
    const Tensor total = ad::add_scalar(ad::add(ad::sum(target), ad::sum(pred)), smooth);
    return ad::add_scalar(ad::neg(ad::div(inter, total)), 1.0);
}

Tensor logcosh_dice(const Tensor& pred, const Tensor& target, double smooth) {
    return ad::log(ad::cosh(dice_loss(pred, target, smooth)));
}

Tensor data_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    const Tensor overlap =
        cfg.use_logcosh ? logcosh_dice(pred, target, cfg.dice_smooth) : dice_loss(pred, target, cfg.dice_smooth);
    return ad::add(bce(pred, target, cfg.epsilon), overlap);
}

Tensor regularizer(const ParamTensors& params, const ParamTensors* anchor, double lambda) {
    if (lambda == 0.0) return {};
    if (anchor && !(anchor->layout == params.layout || *anchor->layout == *params.layout)) {
        throw Error("compound_loss: anchor layout does not match the parameters");
    }
    Tensor total;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor d = anchor ? ad::sub(params[i], (*anchor)[i]) : params[i];
        const Tensor sq = ad::sum(ad::mul(d, d));
        total = total.defined() ? ad::add(total, sq) : sq;
    }
    return ad::mul_scalar(total, anchor ? 0.5 * lambda : lambda);
}

Tensor compound_loss(const Tensor& pred, const Tensor& target, const ParamTensors& params,
                     const ParamTensors* anchor, const LossConfig& cfg) {
    const Tensor data = data_loss(pred, target, cfg);
    const Tensor reg = regularizer(params, anchor, cfg.lambda_reg);
    return reg.defined() ? ad::add(data, reg) : data;
}

Tensor compound_loss(const Tensor& pred, const Tensor& target, const ParamTensors& params,
                     const ParamVector* anchor, const LossConfig& cfg) {
    if (!anchor) return compound_loss(pred, target, params, static_cast<const ParamTensors*>(nullptr), cfg);
    const ParamTensors a = constant(*anchor);
    return compound_loss(pred, target, params, &a, cfg);
}

Tensor binarize(const Tensor& pred, double threshold) {
    std::vector<double> out(pred.numel());
    const auto p = pred.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] > threshold ? 1.0 : 0.0;
    return Tensor(pred.shape(), std::move(out));
}

double dsc(const Tensor& pred_binary, const Tensor& target) {
    const auto o = count("dsc", pred_binary, target);
    if (o.pred + o.target == 0) return 1.0;
    return 2.0 * o.both / (o.pred + o.target);
}

double iou(const Tensor& pred_binary, const Tensor& target) {
    const auto o = count("iou", pred_binary, target);
    const double uni = o.pred + o.target - o.both;
    if (uni == 0) return 1.0;
    return o.both / uni;
}

}  // namespace imaml
