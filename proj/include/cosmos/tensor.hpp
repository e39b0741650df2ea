#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cosmos/error.hpp"

namespace cosmos {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Storage node shared by tensor handles and by tape closures. Value and grad
// are flat row-major buffers; grad stays empty until backward touches it.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool stop_grad = false;

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Handle with shared-pointer semantics: copies alias the same storage.
// Rank 0 (shape {}) is a scalar with one element.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T v);
    static Tensor from(Shape shape, std::vector<T> data);
    static Tensor scalar(T v) { return from({}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return check().shape; }
    std::size_t rank() const { return check().shape.size(); }
    std::size_t numel() const { return check().value.size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::vector<T>& data() { return check().value; }
    const std::vector<T>& data() const { return check().value; }
    T& at(std::size_t i) { return check().value[i]; }
    T at(std::size_t i) const { return check().value[i]; }
    T& at(std::size_t i, std::size_t j) { return check().value[i * cols() + j]; }
    T at(std::size_t i, std::size_t j) const { return check().value[i * cols() + j]; }

    // Scalar read; requires exactly one element.
    T item() const;

    bool requires_grad() const { return check().requires_grad; }
    Tensor& set_requires_grad(bool b) {
        check().requires_grad = b;
        return *this;
    }
    bool stop_gradient() const { return check().stop_grad; }

    // Deep copy of the value, marked as a constant for any later op.
    Tensor detach() const;
    // Deep copy preserving flags, with its own grad buffer.
    Tensor clone() const;

    const std::vector<T>& grad() const;
    bool has_grad() const { return !check().grad.empty(); }
    void zero_grad() { check().grad.clear(); }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    TensorNode<T>& check() const {
        if (!node_) throw ContractError("tensor: use of an undefined handle");
        return *node_;
    }
    std::shared_ptr<TensorNode<T>> node_;
};

// Reverse-mode tape. Ops are appended in execution order, which is already a
// topological order of the graph, so backward is a single reverse sweep that
// visits each recorded op exactly once. Ops whose output never received a
// gradient are skipped.
template <typename T>
class Tape {
public:
    struct Op {
        std::shared_ptr<TensorNode<T>> output;
        std::function<void()> backward;
    };

    void record(std::shared_ptr<TensorNode<T>> output, std::function<void()> backward) {
        ops_.push_back(Op{std::move(output), std::move(backward)});
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. The loss must
    // be a scalar recorded on this tape (or a leaf).
    void backward(const Tensor<T>& loss);

    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

private:
    std::vector<Op> ops_;
};

// RAII scope that selects the active tape for the current thread. A scope
// constructed with no tape suspends recording, which is how inference-only
// forward passes (teacher, eval) run.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(current_) { current_ = &tape; }
    TapeScope() : prev_(current_) { current_ = nullptr; }
    ~TapeScope() { current_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    static Tape<T>* current() { return current_; }

private:
    Tape<T>* prev_;
    static thread_local Tape<T>* current_;
};

template <typename T>
thread_local Tape<T>* TapeScope<T>::current_ = nullptr;

// Test hook: when true, the gelu backward rule is deliberately wrong. Used as
// a negative control for the finite-difference checker.
namespace debug {
extern bool corrupt_gelu_backward;
}

// ---- differentiable ops ----------------------------------------------------
// All ops allocate a fresh output tensor, record a backward closure on the
// active tape when any input takes gradients, and validate shapes up front.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// mat [R x C] + v [C], broadcast over rows.
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& mat, const Tensor<T>& v);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double c);
// a * s with s a scalar tensor (rank 0); gradient flows into both.
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
// exp(x) clamped above at max_value; gradient is zero where the clamp is active.
template <typename T> Tensor<T> exp_clamped(const Tensor<T>& x, double max_value);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count);
// Single row as a rank-1 tensor.
template <typename T> Tensor<T> row(const Tensor<T>& x, std::size_t i);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
// Stack rank-1 tensors of equal length into a matrix.
template <typename T> Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows);
// Gather rows of an embedding table; backward scatter-adds, so repeated ids
// accumulate.
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<std::int32_t>& ids);
// Each output row is a fixed linear combination of input rows. mix[r] lists
// (source row, weight). Used for bilinear interpolation of position tables.
template <typename T>
Tensor<T> combine_rows(const Tensor<T>& x,
                       const std::vector<std::vector<std::pair<std::size_t, double>>>& mix);

// axis selects the direction that sums to one: rank-2 axis=1 normalizes each
// row, axis=0 each column. Rank-1 accepts axis=0 only.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);
// Row softmax over a square score matrix where entry (i, j) with j > i is
// masked out; masked probabilities are exactly zero.
template <typename T> Tensor<T> causal_softmax_rows(const Tensor<T>& x);
// Normalizes the last axis; gain and bias have that length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps);
// Scales rows (or the whole rank-1 vector) to unit L2 norm. A row with norm
// below min_norm is degenerate and raises ContractError.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, double min_norm);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> diag(const Tensor<T>& x);

}  // namespace cosmos
