#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tape records every op whose operands are attached to it. Backward closures
// are written in terms of the same differentiable ops, so running grad() with
// create_graph=true records the backward pass itself and the result can be
// differentiated again (Hessian-vector products, unrolled inner loops).

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace imaml::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class Tensor {
public:
    /// Undefined tensor; used as "no gradient" in backward rules.
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    [[nodiscard]] bool defined() const { return static_cast<bool>(data_); }
    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t numel() const { return data_ ? data_->size() : 0; }
    [[nodiscard]] std::span<const double> data() const;
    [[nodiscard]] double at(std::size_t i) const { return (*data_)[i]; }
    /// Value of a one-element tensor.
    [[nodiscard]] double item() const;

    [[nodiscard]] bool requires_grad() const { return tape_ != nullptr; }
    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] std::optional<std::size_t> tape_id() const;

    /// Same values, no tape participation.
    [[nodiscard]] Tensor detach() const;

    /// Shares storage with `shared` but carries a new shape (same numel).
    static Tensor view(const Tensor& shared, Shape shape);

private:
    friend class Tape;
    friend std::vector<Tensor> grad(const Tensor&, std::span<const Tensor>, bool);

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    std::size_t node_ = 0;
};

/// Backward rule of one recorded op. Receives the adjoint of the op output,
/// the (attached) output itself, and which inputs need a gradient. Returns
/// one entry per input; undefined entries mean "no contribution".
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad_out, const Tensor& out, const std::vector<bool>& needs)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `value` as a differentiable leaf.
    Tensor leaf(const Tensor& value);

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    /// Largest node count this tape has held.
    [[nodiscard]] std::size_t peak_size() const { return peak_; }
    [[nodiscard]] bool recording() const { return recording_; }

    /// Checkpoint mark. rewind(mark) drops every node recorded after it;
    /// tensors referring to dropped nodes must not be used afterwards.
    [[nodiscard]] std::size_t mark() const { return nodes_.size(); }
    void rewind(std::size_t mark);

    /// Attaches `result` to the tape shared by `inputs` when any of them is
    /// attached and the tape is recording; otherwise returns it detached.
    static Tensor record(Tensor result, std::span<const Tensor> inputs, BackwardFn backward);

private:
    friend std::vector<Tensor> grad(const Tensor&, std::span<const Tensor>, bool);
    friend class RecordingGuard;

    static constexpr std::size_t kNoParent = static_cast<std::size_t>(-1);

    struct Node {
        std::vector<std::size_t> parents;
        std::shared_ptr<const BackwardFn> backward;
        Shape shape;
        std::shared_ptr<const std::vector<double>> value;
    };

    std::vector<Node> nodes_;
    std::size_t peak_ = 0;
    bool recording_ = true;
};

/// Scoped override of a tape's recording flag.
class RecordingGuard {
public:
    RecordingGuard(Tape& tape, bool recording) : tape_(tape), previous_(tape.recording_) {
        tape_.recording_ = recording;
    }
    ~RecordingGuard() { tape_.recording_ = previous_; }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

private:
    Tape& tape_;
    bool previous_;
};

/// d output / d wrt for a one-element `output`. With create_graph the returned
/// gradients are themselves attached to the tape. The tape is left reusable.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph = false);

}  // namespace imaml::ad
