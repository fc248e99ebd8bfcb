#pragma once

// Flat parameter space shared by the model, the inner loop and the meta
// gradient. A ParamVector is one contiguous buffer cut into named segments;
// binding it to a tape yields one leaf tensor per segment.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imaml/tensor.hpp"

namespace imaml {

struct Segment {
    std::string name;
    ad::Shape shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

class ParamLayout {
public:
    /// Appends a segment directly after the previous one.
    void add(std::string name, ad::Shape shape);

    [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }
    [[nodiscard]] std::size_t total() const { return total_; }
    [[nodiscard]] std::size_t index_of(std::string_view name) const;

    bool operator==(const ParamLayout& other) const;

private:
    std::vector<Segment> segments_;
    std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

class ParamVector {
public:
    ParamVector() = default;
    /// Zero-filled vector with the given layout.
    explicit ParamVector(LayoutPtr layout);
    ParamVector(LayoutPtr layout, std::vector<double> data);

    [[nodiscard]] const ParamLayout& layout() const { return *layout_; }
    [[nodiscard]] const LayoutPtr& layout_ptr() const { return layout_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::span<double> data() { return data_; }
    [[nodiscard]] std::span<const double> data() const { return data_; }
    [[nodiscard]] const std::vector<double>& values() const { return data_; }

    [[nodiscard]] std::span<const double> segment(std::size_t i) const;
    [[nodiscard]] std::span<double> segment(std::size_t i);
    [[nodiscard]] std::span<const double> segment(std::string_view name) const;
    [[nodiscard]] std::span<double> segment(std::string_view name);

    /// One detached tensor per segment.
    [[nodiscard]] std::vector<ad::Tensor> unflatten() const;
    /// Inverse of unflatten; tensors must match the layout's shapes.
    static ParamVector flatten(LayoutPtr layout, std::span<const ad::Tensor> tensors);

    [[nodiscard]] bool same_layout(const ParamVector& other) const;

    bool operator==(const ParamVector& other) const;

private:
    LayoutPtr layout_;
    std::vector<double> data_;
};

void require_same_layout(const char* op, const ParamVector& a, const ParamVector& b);

double dot(const ParamVector& a, const ParamVector& b);
double norm(const ParamVector& a);
ParamVector operator+(const ParamVector& a, const ParamVector& b);
ParamVector operator-(const ParamVector& a, const ParamVector& b);
ParamVector operator*(double s, const ParamVector& a);
/// y += alpha * x
void axpy(ParamVector& y, double alpha, const ParamVector& x);
bool all_finite(const ParamVector& a);

/// Parameters as tensors, one per layout segment, possibly attached to a tape.
struct ParamTensors {
    LayoutPtr layout;
    std::vector<ad::Tensor> tensors;

    [[nodiscard]] const ad::Tensor& operator[](std::size_t i) const { return tensors[i]; }
    [[nodiscard]] const ad::Tensor& get(std::string_view name) const;
    [[nodiscard]] std::size_t size() const { return tensors.size(); }
};

/// Registers every segment as a leaf on `tape`.
ParamTensors bind(ad::Tape& tape, const ParamVector& params);
/// Detached tensors (constants).
ParamTensors constant(const ParamVector& params);
/// Current values of `tensors` as a vector.
ParamVector values(const ParamTensors& tensors);

using LossFn = std::function<ad::Tensor(const ParamTensors&)>;

/// d output / d wrt with the same segment layout as `wrt`.
ParamVector grad(const ad::Tensor& output, const ParamTensors& wrt);

/// Gradient of `loss_fn` at `at`; a loss that does not depend on the
/// parameters has a zero gradient.
ParamVector gradient(const LossFn& loss_fn, const ParamVector& at);

/// Hessian-vector product of `loss_fn` at `at`, by differentiating <grad, v>.
ParamVector hvp(const LossFn& loss_fn, const ParamVector& at, const ParamVector& v);

/// Gradient graph of a loss built once at a fixed point; apply(v) returns H v
/// by one extra backward pass, rewinding the tape afterwards so repeated
/// products do not grow it.
class CurvatureOperator {
public:
    CurvatureOperator(const LossFn& loss_fn, const ParamVector& at);

    [[nodiscard]] double loss() const { return loss_; }
    [[nodiscard]] const ParamVector& gradient() const { return gradient_; }
    ParamVector apply(const ParamVector& v);

    [[nodiscard]] std::size_t tape_size() const { return tape_->size(); }
    [[nodiscard]] std::size_t peak_tape_size() const { return tape_->peak_size(); }

private:
    std::unique_ptr<ad::Tape> tape_;
    ParamTensors params_;
    std::vector<ad::Tensor> grads_;
    ParamVector gradient_;
    double loss_ = 0.0;
    std::size_t mark_ = 0;
};

}  // namespace imaml
