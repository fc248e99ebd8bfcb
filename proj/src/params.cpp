#include "imaml/params.hpp"

#include <cmath>

#include "imaml/error.hpp"
#include "imaml/ops.hpp"

namespace imaml {

void ParamLayout::add(std::string name, ad::Shape shape) {
    for (const auto& s : segments_) {
        if (s.name == name) throw Error("ParamLayout: duplicate segment '" + name + "'");
    }
    const auto n = ad::numel(shape);
    if (n == 0) throw Error("ParamLayout: empty segment '" + name + "'");
    segments_.push_back(Segment{std::move(name), std::move(shape), total_, n});
    total_ += n;
}

std::size_t ParamLayout::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (segments_[i].name == name) return i;
    }
    throw Error("ParamLayout: no segment named '" + std::string(name) + "'");
}

bool ParamLayout::operator==(const ParamLayout& other) const {
    if (segments_.size() != other.segments_.size() || total_ != other.total_) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        const auto& a = segments_[i];
        const auto& b = other.segments_[i];
        if (a.name != b.name || a.shape != b.shape || a.offset != b.offset) return false;
    }
    return true;
}

ParamVector::ParamVector(LayoutPtr layout) : layout_(std::move(layout)) {
    if (!layout_) throw Error("ParamVector: null layout");
    data_.assign(layout_->total(), 0.0);
}

ParamVector::ParamVector(LayoutPtr layout, std::vector<double> data)
    : layout_(std::move(layout)), data_(std::move(data)) {
    if (!layout_) throw Error("ParamVector: null layout");
    if (data_.size() != layout_->total()) {
        throw Error("ParamVector: layout needs " + std::to_string(layout_->total()) +
                    " values, got " + std::to_string(data_.size()));
    }
}

std::span<const double> ParamVector::segment(std::size_t i) const {
    const auto& s = layout_->segments().at(i);
    return std::span<const double>(data_).subspan(s.offset, s.size);
}

std::span<double> ParamVector::segment(std::size_t i) {
    const auto& s = layout_->segments().at(i);
    return std::span<double>(data_).subspan(s.offset, s.size);
}

std::span<const double> ParamVector::segment(std::string_view name) const {
    return segment(layout_->index_of(name));
}

std::span<double> ParamVector::segment(std::string_view name) {
    return segment(layout_->index_of(name));
}

std::vector<ad::Tensor> ParamVector::unflatten() const {
    std::vector<ad::Tensor> out;
    out.reserve(layout_->segments().size());
    for (std::size_t i = 0; i < layout_->segments().size(); ++i) {
        const auto seg = segment(i);
        out.emplace_back(layout_->segments()[i].shape, std::vector<double>(seg.begin(), seg.end()));
    }
    return out;
}

ParamVector ParamVector::flatten(LayoutPtr layout, std::span<const ad::Tensor> tensors) {
    if (!layout) throw Error("ParamVector::flatten: null layout");
    const auto& segs = layout->segments();
    if (tensors.size() != segs.size()) {
        throw Error("ParamVector::flatten: layout has " + std::to_string(segs.size()) +
                    " segments, got " + std::to_string(tensors.size()) + " tensors");
    }
    std::vector<double> data(layout->total());
    for (std::size_t i = 0; i < segs.size(); ++i) {
        if (tensors[i].shape() != segs[i].shape) {
            throw Error("ParamVector::flatten: segment '" + segs[i].name + "' expects " +
                        ad::to_string(segs[i].shape) + ", got " + ad::to_string(tensors[i].shape()));
        }
        const auto src = tensors[i].data();
        std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(segs[i].offset));
    }
    return ParamVector(std::move(layout), std::move(data));
}

bool ParamVector::same_layout(const ParamVector& other) const {
    if (!layout_ || !other.layout_) return layout_ == other.layout_;
    return layout_ == other.layout_ || *layout_ == *other.layout_;
}

bool ParamVector::operator==(const ParamVector& other) const {
    return same_layout(other) && data_ == other.data_;
}

void require_same_layout(const char* op, const ParamVector& a, const ParamVector& b) {
    if (!a.same_layout(b)) {
        throw Error(std::string(op) + ": parameter layout mismatch (" + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()) + " values)");
    }
}

double dot(const ParamVector& a, const ParamVector& b) {
    require_same_layout("dot", a, b);
    double s = 0.0;
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

double norm(const ParamVector& a) { return std::sqrt(dot(a, a)); }

ParamVector operator+(const ParamVector& a, const ParamVector& b) {
    ParamVector out = a;
    axpy(out, 1.0, b);
    return out;
}

ParamVector operator-(const ParamVector& a, const ParamVector& b) {
    ParamVector out = a;
    axpy(out, -1.0, b);
    return out;
}

ParamVector operator*(double s, const ParamVector& a) {
    ParamVector out = a;
    for (auto& v : out.data()) v *= s;
    return out;
}

void axpy(ParamVector& y, double alpha, const ParamVector& x) {
    require_same_layout("axpy", y, x);
    auto yd = y.data();
    const auto xd = x.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += alpha * xd[i];
}

bool all_finite(const ParamVector& a) {
    for (double v : a.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

const ad::Tensor& ParamTensors::get(std::string_view name) const {
    return tensors.at(layout->index_of(name));
}

ParamTensors bind(ad::Tape& tape, const ParamVector& params) {
    ParamTensors out{params.layout_ptr(), {}};
    for (auto& t : params.unflatten()) out.tensors.push_back(tape.leaf(t));
    return out;
}

ParamTensors constant(const ParamVector& params) {
    return ParamTensors{params.layout_ptr(), params.unflatten()};
}

ParamVector values(const ParamTensors& tensors) {
    return ParamVector::flatten(tensors.layout, tensors.tensors);
}

ParamVector grad(const ad::Tensor& output, const ParamTensors& wrt) {
    const auto grads = ad::grad(output, wrt.tensors, false);
    return ParamVector::flatten(wrt.layout, grads);
}

ParamVector gradient(const LossFn& loss_fn, const ParamVector& at) {
    ad::Tape tape;
    const auto params = bind(tape, at);
    const ad::Tensor loss = loss_fn(params);
    if (!loss.defined() || loss.numel() != 1) {
        throw Error("grad: output must be a scalar, got shape " + ad::to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return ParamVector(at.layout_ptr());
    return grad(loss, params);
}

ParamVector hvp(const LossFn& loss_fn, const ParamVector& at, const ParamVector& v) {
    require_same_layout("hvp", at, v);
    CurvatureOperator op(loss_fn, at);
    return op.apply(v);
}

CurvatureOperator::CurvatureOperator(const LossFn& loss_fn, const ParamVector& at)
    : tape_(std::make_unique<ad::Tape>()) {
    params_ = bind(*tape_, at);
    const ad::Tensor loss = loss_fn(params_);
    if (!loss.defined() || loss.numel() != 1) {
        throw Error("hvp: loss must be a scalar, got shape " + ad::to_string(loss.shape()));
    }
    loss_ = loss.item();
    if (!loss.requires_grad()) {
        // Loss does not depend on the parameters: zero gradient and curvature.
        gradient_ = ParamVector(at.layout_ptr());
        mark_ = tape_->mark();
        return;
    }
    grads_ = ad::grad(loss, params_.tensors, true);
    gradient_ = ParamVector::flatten(at.layout_ptr(), grads_);
    mark_ = tape_->mark();
}

ParamVector CurvatureOperator::apply(const ParamVector& v) {
    if (!v.same_layout(gradient_)) throw Error("hvp: vector layout does not match the parameters");
    if (grads_.empty()) return ParamVector(v.layout_ptr());
    const auto vs = v.unflatten();
    ad::Tensor inner;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
        if (!grads_[i].requires_grad()) continue;  // constant gradient segment: zero curvature
        const ad::Tensor term = ad::sum(ad::mul(grads_[i], vs[i]));
        inner = inner.defined() ? ad::add(inner, term) : term;
    }
    ParamVector out(v.layout_ptr());
    if (inner.defined()) out = grad(inner, params_);
    tape_->rewind(mark_);
    return out;
}

}  // namespace imaml
