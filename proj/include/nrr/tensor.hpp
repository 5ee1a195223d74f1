#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nrr/error.hpp"

namespace nrr::ad {

// The library is built in single precision. Gradient checks compile the same
// sources with NRR_AUTODIFF_DOUBLE so finite differences are meaningful.
#ifdef NRR_AUTODIFF_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& s);
std::size_t numel(const Shape& s);

/// Dense row-major array (last dimension fastest). An empty shape is a scalar.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Scalar fill = Scalar(0));
    Tensor(Shape shape, std::vector<Scalar> data);

    static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<Scalar> data() noexcept { return data_; }
    std::span<const Scalar> data() const noexcept { return data_; }
    Scalar* ptr() noexcept { return data_.data(); }
    const Scalar* ptr() const noexcept { return data_.data(); }

    Scalar& operator[](std::size_t i) noexcept { return data_[i]; }
    Scalar operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Value of a one-element tensor.
    Scalar item() const;

    void fill(Scalar v);
    Tensor reshaped(Shape shape) const;
    bool all_finite() const;

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<Scalar> data_;
};

struct Node {
    Tensor value;
    Tensor grad;  // empty until the node takes part in a backward pass
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    /// Allocates a zero gradient buffer matching `value` if none exists.
    Tensor& grad_buffer();
};

/// Handle to a node of the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad_buffer() { return node_->grad_buffer(); }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool defined() const noexcept { return node_ != nullptr; }
    Scalar item() const { return node_->value.item(); }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Graph input that never receives gradients.
Var constant(Tensor t);
/// Trainable leaf; its gradient accumulates across backward passes until cleared.
Var parameter(Tensor t);

/// Propagates d(loss)/d(node) to every node reachable from `loss`.
/// Leaf gradients accumulate; the caller clears them between steps.
void backward(const Var& loss);

// ---- layers -------------------------------------------------------------

/// x [N, in], weight [out, in], bias [out] -> [N, out]
Var affine(const Var& x, const Var& weight, const Var& bias);

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::array<std::size_t, 3> output_padding{0, 0, 0};  // (d, h, w); transposed convolution only
};

/// x [N, C, D, H, W], kernel [Co, C, k, k, k], bias [Co].
/// Output spatial size per axis: floor((in + 2p - k) / s) + 1.
Var conv3d(const Var& x, const Var& kernel, const Var& bias, ConvGeometry g);

/// x [N, Ci, D, H, W], kernel [Ci, Co, k, k, k], bias [Co].
/// Output spatial size per axis: (in - 1) s - 2p + k + output_padding.
Var conv_transpose3d(const Var& x, const Var& kernel, const Var& bias, ConvGeometry g);

/// Non-overlapping mean pooling; spatial dims must be divisible by `factor`.
Var avg_pool3d(const Var& x, std::size_t factor);
/// Nearest-neighbour upsampling by an integer factor.
Var upsample3d(const Var& x, std::size_t factor);

std::size_t conv_out_size(std::size_t in, std::size_t k, ConvGeometry g);
std::size_t conv_transpose_out_size(std::size_t in, std::size_t k, ConvGeometry g, int axis);

// ---- elementwise ----------------------------------------------------------

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var clamp(const Var& x, Scalar lo, Scalar hi);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, Scalar c);
Var add_scalar(const Var& x, Scalar c);

/// mu + sigma * eps with eps drawn outside the graph (pathwise derivative).
Var gaussian_sample(const Var& mu, const Var& sigma, const Tensor& eps);

// ---- reductions and reshaping -------------------------------------------

Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);
Var reshape(const Var& x, Shape shape);
/// [N, p] ++ [N, q] -> [N, p + q]
Var concat_cols(const Var& a, const Var& b);
/// Columns [begin, end) of a [N, F] matrix.
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);

/// Per-column (x - mean) / sqrt(var + eps) over the N rows of [N, F]
/// (population variance).
Var standardize_cols(const Var& x, Scalar eps = Scalar(1e-8));

/// Mean binary cross-entropy of logits against 0/1 targets, computed in the
/// numerically stable form max(z,0) - z*y + log(1 + exp(-|z|)).
Var bce_with_logits(const Var& logits, const Tensor& targets);

}  // namespace nrr::ad
