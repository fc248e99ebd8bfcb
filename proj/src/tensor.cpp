#include "imaml/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "imaml/error.hpp"
#include "imaml/ops.hpp"

namespace imaml::ad {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_.empty()) throw Error("Tensor: shape must have at least one dimension");
    for (auto d : shape_) {
        if (d == 0) throw Error("Tensor: zero-sized dimension in shape " + to_string(shape_));
    }
    if (ad::numel(shape_) != data.size()) {
        throw Error("Tensor: shape " + to_string(shape_) + " needs " +
                    std::to_string(ad::numel(shape_)) + " values, got " +
                    std::to_string(data.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = ad::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::span<const double> Tensor::data() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

double Tensor::item() const {
    if (numel() != 1) throw Error("Tensor::item: tensor has shape " + to_string(shape_));
    return (*data_)[0];
}

std::optional<std::size_t> Tensor::tape_id() const {
    if (!tape_) return std::nullopt;
    return node_;
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::view(const Tensor& shared, Shape shape) {
    if (ad::numel(shape) != shared.numel()) {
        throw Error("reshape: cannot view " + to_string(shared.shape()) + " as " + to_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = shared.data_;
    return t;
}

Tensor Tape::leaf(const Tensor& value) {
    if (!value.defined()) throw Error("Tape::leaf: undefined tensor");
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{{}, nullptr, t.shape_, t.data_});
    peak_ = std::max(peak_, nodes_.size());
    return t;
}

void Tape::rewind(std::size_t mark) {
    if (mark > nodes_.size()) throw Error("Tape::rewind: mark beyond tape end");
    nodes_.resize(mark);
}

Tensor Tape::record(Tensor result, std::span<const Tensor> inputs, BackwardFn backward) {
    Tape* tape = nullptr;
    for (const auto& in : inputs) {
        if (!in.tape_) continue;
        if (tape && tape != in.tape_) throw Error("autodiff: operands belong to different tapes");
        tape = in.tape_;
    }
    if (!tape || !tape->recording_) return result;
    Node node;
    node.parents.reserve(inputs.size());
    for (const auto& in : inputs) {
        if (in.tape_) {
            if (in.node_ >= tape->nodes_.size()) throw Error("autodiff: operand refers to a rewound node");
            node.parents.push_back(in.node_);
        } else {
            node.parents.push_back(kNoParent);
        }
    }
    node.backward = std::make_shared<const BackwardFn>(std::move(backward));
    node.shape = result.shape_;
    node.value = result.data_;
    result.tape_ = tape;
    result.node_ = tape->nodes_.size();
    tape->nodes_.push_back(std::move(node));
    tape->peak_ = std::max(tape->peak_, tape->nodes_.size());
    return result;
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
    if (!output.defined() || output.numel() != 1) {
        throw Error("grad: output must be a scalar, got shape " + to_string(output.shape()));
    }
    if (!output.tape_) throw Error("grad: output is detached from the tape");
    Tape& tape = *output.tape_;
    if (output.node_ >= tape.nodes_.size()) throw Error("grad: output refers to a rewound node");

    std::size_t lo = output.node_;
    for (const auto& w : wrt) {
        if (w.tape_ != &tape) throw Error("grad: wrt tensor is not on the output's tape");
        lo = std::min(lo, w.node_);
    }
    const std::size_t hi = output.node_;

    std::vector<Tensor> adjoint(hi - lo + 1);
    std::vector<bool> keep(hi - lo + 1, false);
    for (const auto& w : wrt) keep[w.node_ - lo] = true;
    adjoint[hi - lo] = Tensor::full(output.shape(), 1.0);

    RecordingGuard guard(tape, create_graph);
    for (std::size_t i = hi + 1; i-- > lo;) {
        Tensor& g = adjoint[i - lo];
        if (!g.defined()) continue;
        // Copy what we need: recording may reallocate the node vector.
        const auto backward = tape.nodes_[i].backward;
        if (!backward) continue;
        const auto parents = tape.nodes_[i].parents;
        std::vector<bool> needs(parents.size());
        bool any = false;
        for (std::size_t k = 0; k < parents.size(); ++k) {
            needs[k] = parents[k] != Tape::kNoParent && parents[k] >= lo;
            any = any || needs[k];
        }
        if (!any) continue;

        Tensor out;
        out.shape_ = tape.nodes_[i].shape;
        out.data_ = tape.nodes_[i].value;
        out.tape_ = &tape;
        out.node_ = i;

        auto parent_grads = (*backward)(g, out, needs);
        for (std::size_t k = 0; k < parents.size(); ++k) {
            if (!needs[k] || k >= parent_grads.size() || !parent_grads[k].defined()) continue;
            Tensor& acc = adjoint[parents[k] - lo];
            acc = acc.defined() ? add(acc, parent_grads[k]) : std::move(parent_grads[k]);
        }
        if (!create_graph && !keep[i - lo]) g = Tensor();  // free intermediate adjoints early
    }

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
        const Tensor& a = adjoint[w.node_ - lo];
        result.push_back(a.defined() ? a : Tensor::zeros(w.shape()));
    }
    return result;
}

}  // namespace imaml::ad
