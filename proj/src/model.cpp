#include "imaml/model.hpp"

#include <cmath>
#include <random>

#include "imaml/checkpoint.hpp"
#include "imaml/error.hpp"
#include "imaml/ops.hpp"

namespace imaml {

using ad::Shape;
using ad::Tensor;

namespace {

constexpr double kNormEps = 1e-5;

std::size_t channels_at(const AttnUNetConfig& cfg, std::size_t level) { return cfg.base_channels << level; }

std::size_t gate_channels(std::size_t skip_channels) { return std::max<std::size_t>(1, skip_channels / 2); }

std::string level_name(const char* kind, std::size_t level) { return kind + std::to_string(level); }

void add_block(ParamLayout& layout, const std::string& prefix, std::size_t in, std::size_t out) {
    layout.add(prefix + ".conv1.w", {out, in, 3, 3});
    layout.add(prefix + ".norm1.gamma", {out});
    layout.add(prefix + ".norm1.beta", {out});
    layout.add(prefix + ".conv2.w", {out, out, 3, 3});
    layout.add(prefix + ".norm2.gamma", {out});
    layout.add(prefix + ".norm2.beta", {out});
}

bool is_gain(const std::string& name) { return name.ends_with(".gamma"); }
bool is_bias(const std::string& name) {
    return name.ends_with(".beta") || name.ends_with(".b") || name.ends_with("bias");
}

class Net {
public:
    Net(const AttnUNetConfig& cfg, const ParamTensors& p) : cfg_(cfg), p_(p) {}

    Tensor run(const Tensor& images, std::vector<Tensor>* gates) const {
        std::vector<Tensor> skips;
        Tensor h = images;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            h = block(h, level_name("enc", l));
            skips.push_back(h);
            h = ad::max_pool2(h);
        }
        h = block(h, "mid");
        for (std::size_t l = cfg_.depth; l-- > 0;) {
            const std::string pre = level_name("dec", l);
            Tensor skip = skips[l];
            if (cfg_.attention_gates) {
                auto out = attention_gate(gate(pre), skip, h);
                if (gates) gates->push_back(out.alpha);
                skip = out.gated;
            }
            Tensor up = ad::conv2d(ad::upsample2(h), get(pre + ".up.w"), 1, 1);
            up = ad::relu(group_norm(up, get(pre + ".up.gamma"), get(pre + ".up.beta")));
            h = block(ad::concat_channels(skip, up), pre);
        }
        Tensor logits = ad::conv2d(h, get("head.w"), 1, 0);
        logits = ad::add(logits, ad::channel_broadcast(get("head.b"), logits.shape()));
        return ad::sigmoid(logits);
    }

private:
    const Tensor& get(const std::string& name) const { return p_.get(name); }

    Tensor conv_norm_relu(const Tensor& x, const std::string& prefix, const char* conv, const char* norm) const {
        const Tensor y = ad::conv2d(x, get(prefix + conv), 1, 1);
        return ad::relu(group_norm(y, get(prefix + norm + ".gamma"), get(prefix + norm + ".beta")));
    }

    Tensor block(const Tensor& x, const std::string& prefix) const {
        return conv_norm_relu(conv_norm_relu(x, prefix, ".conv1.w", ".norm1"), prefix, ".conv2.w", ".norm2");
    }

    GateWeights gate(const std::string& prefix) const {
        return GateWeights{get(prefix + ".gate.wx"), get(prefix + ".gate.wg"), get(prefix + ".gate.bias"),
                           get(prefix + ".gate.psi"), get(prefix + ".gate.psi_bias")};
    }

    const AttnUNetConfig& cfg_;
    const ParamTensors& p_;
};

}  // namespace

void AttnUNetConfig::validate() const {
    if (base_channels < 1) throw Error("model config: base_channels must be >= 1");
    if (depth < 2) throw Error("model config: depth must be >= 2, got " + std::to_string(depth));
    if (depth > 16) throw Error("model config: depth " + std::to_string(depth) + " is too large");
    if (in_channels < 1) throw Error("model config: in_channels must be >= 1");
    const std::size_t step = std::size_t{1} << depth;
    if (input_size == 0 || input_size % step != 0) {
        throw Error("model config: input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " +
                    std::to_string(step));
    }
}

kv::Fields AttnUNetConfig::fields() const {
    return {{"input_size", std::to_string(input_size)},
            {"base_channels", std::to_string(base_channels)},
            {"depth", std::to_string(depth)},
            {"in_channels", std::to_string(in_channels)},
            {"attention_gates", kv::from_bool(attention_gates)},
            {"seed", std::to_string(seed)}};
}

void AttnUNetConfig::set(std::string_view key, std::string_view value) {
    if (key == "input_size") input_size = kv::to_u64(key, value);
    else if (key == "base_channels") base_channels = kv::to_u64(key, value);
    else if (key == "depth") depth = kv::to_u64(key, value);
    else if (key == "in_channels") in_channels = kv::to_u64(key, value);
    else if (key == "attention_gates") attention_gates = kv::to_bool(key, value);
    else if (key == "seed") seed = kv::to_u64(key, value);
    else throw Error("unknown key '" + std::string(key) + "'");
}

LayoutPtr build_layout(const AttnUNetConfig& cfg) {
    cfg.validate();
    auto layout = std::make_shared<ParamLayout>();
    std::size_t in = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        add_block(*layout, level_name("enc", l), in, channels_at(cfg, l));
        in = channels_at(cfg, l);
    }
    add_block(*layout, "mid", in, channels_at(cfg, cfg.depth));
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const std::string pre = level_name("dec", l);
        const std::size_t c = channels_at(cfg, l);
        const std::size_t below = channels_at(cfg, l + 1);
        if (cfg.attention_gates) {
            const std::size_t f = gate_channels(c);
            layout->add(pre + ".gate.wx", {f, c, 2, 2});
            layout->add(pre + ".gate.wg", {f, below, 1, 1});
            layout->add(pre + ".gate.bias", {f});
            layout->add(pre + ".gate.psi", {1, f, 1, 1});
            layout->add(pre + ".gate.psi_bias", {1});
        }
        layout->add(pre + ".up.w", {c, below, 3, 3});
        layout->add(pre + ".up.gamma", {c});
        layout->add(pre + ".up.beta", {c});
        add_block(*layout, pre, 2 * c, c);
    }
    layout->add("head.w", {1, cfg.base_channels, 1, 1});
    layout->add("head.b", {1});
    return layout;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const Shape& s = x.shape();
    if (s.size() != 4 || gamma.shape() != Shape{s[1]} || beta.shape() != Shape{s[1]}) {
        throw Error("group_norm: expected x [B, C, H, W] with gamma, beta [C]; got " + ad::to_string(s) + ", " +
                    ad::to_string(gamma.shape()) + ", " + ad::to_string(beta.shape()));
    }
    const double inv_n = 1.0 / static_cast<double>(s[1] * s[2] * s[3]);
    const Tensor mu = ad::mul_scalar(ad::sample_sum(x), inv_n);
    const Tensor centered = ad::sub(x, ad::sample_broadcast(mu, s));
    const Tensor var = ad::mul_scalar(ad::sample_sum(ad::mul(centered, centered)), inv_n);
    const Tensor inv_std = ad::div(Tensor::full({s[0]}, 1.0), ad::sqrt(ad::add_scalar(var, kNormEps)));
    const Tensor normed = ad::mul(centered, ad::sample_broadcast(inv_std, s));
    return ad::add(ad::mul(normed, ad::channel_broadcast(gamma, s)), ad::channel_broadcast(beta, s));
}

Tensor gate_skip(const Tensor& skip, const Tensor& alpha) {
    const Shape& s = skip.shape();
    if (s.size() != 4 || alpha.shape() != Shape{s[0], 1, s[2], s[3]}) {
        throw Error("gate_skip: coefficients " + ad::to_string(alpha.shape()) + " do not match skip " +
                    ad::to_string(s));
    }
    return ad::mul(skip, ad::repeat_channels(alpha, s[1]));
}

GateOutput attention_gate(const GateWeights& w, const Tensor& skip, const Tensor& gating) {
    const Shape& xs = skip.shape();
    const Shape& gs = gating.shape();
    if (xs.size() != 4 || gs.size() != 4 || gs[0] != xs[0] || xs[2] != 2 * gs[2] || xs[3] != 2 * gs[3]) {
        throw Error("attention_gate: gating " + ad::to_string(gs) + " must have half the resolution of skip " +
                    ad::to_string(xs));
    }
    if (w.wx.shape().size() != 4 || w.wx.shape()[1] != xs[1]) {
        throw Error("attention_gate: channel mismatch, skip has " + std::to_string(xs[1]) + " channels but Wx expects " +
                    ad::to_string(w.wx.shape()));
    }
    if (w.wg.shape().size() != 4 || w.wg.shape()[1] != gs[1]) {
        throw Error("attention_gate: channel mismatch, gating has " + std::to_string(gs[1]) +
                    " channels but Wg expects " + ad::to_string(w.wg.shape()));
    }
    const Tensor theta_x = ad::conv2d(skip, w.wx, 2, 0);
    const Tensor phi_g = ad::conv2d(gating, w.wg, 1, 0);
    const Tensor joint = ad::relu(ad::add(ad::add(theta_x, phi_g), ad::channel_broadcast(w.bias, phi_g.shape())));
    Tensor psi = ad::conv2d(joint, w.psi, 1, 0);
    psi = ad::add(psi, ad::channel_broadcast(w.psi_bias, psi.shape()));
    const Tensor alpha = ad::upsample2(ad::sigmoid(psi));
    return GateOutput{gate_skip(skip, alpha), alpha};
}

SegModel::SegModel(AttnUNetConfig cfg, ParamVector params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    const auto layout = build_layout(cfg_);
    if (!params_.layout_ptr() || !(params_.layout() == *layout)) {
        throw Error("SegModel: parameter layout does not match the config");
    }
}

SegModel SegModel::init(const AttnUNetConfig& cfg) {
    const auto layout = build_layout(cfg);
    ParamVector params(layout);
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t i = 0; i < layout->segments().size(); ++i) {
        const auto& seg = layout->segments()[i];
        auto values = params.segment(i);
        if (is_gain(seg.name)) {
            std::fill(values.begin(), values.end(), 1.0);
        } else if (is_bias(seg.name)) {
            std::fill(values.begin(), values.end(), 0.0);
        } else {
            const std::size_t fan_in = seg.shape[1] * seg.shape[2] * seg.shape[3];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : values) v = dist(rng);
        }
    }
    return SegModel(cfg, std::move(params));
}

Tensor SegModel::forward(const ParamTensors& params, const Tensor& images, std::vector<Tensor>* gates) const {
    if (!params.layout || (params.layout != params_.layout_ptr() && !(*params.layout == params_.layout()))) {
        throw Error("forward: parameter layout does not match the model");
    }
    const Shape& s = images.shape();
    if (s.size() != 4 || s[0] == 0 || s[1] != cfg_.in_channels || s[2] != cfg_.input_size ||
        s[3] != cfg_.input_size) {
        throw Error("forward: expected images [B, " + std::to_string(cfg_.in_channels) + ", " +
                    std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "], got " +
                    ad::to_string(s));
    }
    return Net(cfg_, params).run(images, gates);
}

Tensor SegModel::predict(const ParamVector& params, const Tensor& images) const {
    return forward(constant(params), images);
}

void save_model(const std::string& path, const SegModel& model) {
    write_checkpoint(path, kv::format_section("model", model.config().fields()), model.params());
}

SegModel load_model(const std::string& path) {
    auto ck = read_checkpoint(path);
    AttnUNetConfig cfg;
    for (const auto& e : kv::parse(ck.text)) {
        if (e.section != "model") continue;
        try {
            cfg.set(e.key, e.value);
        } catch (const Error& err) {
            rethrow_with_context("checkpoint '" + path + "' line " + std::to_string(e.line), err);
        }
    }
    try {
        return SegModel(cfg, std::move(ck.values));
    } catch (const Error& err) {
        rethrow_with_context("checkpoint '" + path + "'", err);
    }
}

}  // namespace imaml
