#include "cosmos/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cosmos {

namespace debug {
bool corrupt_gelu_backward = false;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

template <typename T>
bool tracked(const Tensor<T>& t) {
    return t.requires_grad() && !t.stop_gradient();
}

// Active tape, or null when recording is off or nothing upstream takes grads.
template <typename T>
Tape<T>* tape_for(bool any_tracked) {
    return any_tracked ? TapeScope<T>::current() : nullptr;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + " tensor, got " +
                         shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v) {
    auto t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("tensor: data of size " + std::to_string(data.size()) +
                         " does not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor<T>(std::move(n));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
    const auto& s = shape();
    if (i >= s.size())
        throw ShapeError("tensor: dim " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[i];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1)
        throw ContractError("tensor: item() needs exactly one element, shape is " +
                            shape_str(shape()));
    return data()[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape();
    n->value = data();
    n->stop_grad = true;
    return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape();
    n->value = data();
    n->requires_grad = requires_grad();
    n->stop_grad = stop_gradient();
    return Tensor<T>(std::move(n));
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    return check().grad;
}

// ---- Tape ------------------------------------------------------------------

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar, shape is " +
                            shape_str(loss.shape()));
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // not on any path to the loss
        it->backward();
    }
}

// ---- op helpers ------------------------------------------------------------

namespace {

// Marks the output as grad-bearing and records the closure when a tape is
// active and some input is tracked.
template <typename T, typename F>
void record(Tape<T>* tape, Tensor<T>& out, F&& fn) {
    if (!tape) return;
    out.set_requires_grad(true);
    tape->record(out.node(), std::forward<F>(fn));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    const bool ga = tracked(a), gb = tracked(b);
    if (auto* tape = tape_for<T>(ga || gb)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        record(tape, out, [an, bn, on, ga, gb, n] {
            const auto& g = on->grad;
            if (ga) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
            }
            if (gb) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    const bool ga = tracked(a), gb = tracked(b);
    if (auto* tape = tape_for<T>(ga || gb)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        record(tape, out, [an, bn, on, ga, gb, n] {
            const auto& g = on->grad;
            if (ga) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
            }
            if (gb) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    const bool ga = tracked(a), gb = tracked(b);
    if (auto* tape = tape_for<T>(ga || gb)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        record(tape, out, [an, bn, on, ga, gb, n] {
            const auto& g = on->grad;
            if (ga) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * bn->value[i];
            }
            if (gb) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * an->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& mat, const Tensor<T>& v) {
    require_rank(mat, 2, "add_rowvec");
    require_rank(v, 1, "add_rowvec");
    if (mat.cols() != v.dim(0))
        throw ShapeError("add_rowvec: " + shape_str(mat.shape()) + " vs " + shape_str(v.shape()));
    const std::size_t r = mat.rows(), c = mat.cols();
    auto out = Tensor<T>::zeros(mat.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = mat.data()[i * c + j] + v.data()[j];
    const bool gm = tracked(mat), gv = tracked(v);
    if (auto* tape = tape_for<T>(gm || gv)) {
        auto mn = mat.node(), vn = v.node(), on = out.node();
        record(tape, out, [mn, vn, on, gm, gv, r, c] {
            const auto& g = on->grad;
            if (gm) {
                mn->ensure_grad();
                for (std::size_t i = 0; i < r * c; ++i) mn->grad[i] += g[i];
            }
            if (gv) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) vn->grad[j] += g[i * c + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
    auto out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    const T cv = static_cast<T>(c);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * cv;
    if (auto* tape = tape_for<T>(tracked(a))) {
        auto an = a.node(), on = out.node();
        record(tape, out, [an, on, cv, n] {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * cv;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1)
        throw ShapeError("mul_scalar: scale must be a scalar, got " + shape_str(s.shape()));
    auto out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    const T sv = s.data()[0];
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * sv;
    const bool ga = tracked(a), gs = tracked(s);
    if (auto* tape = tape_for<T>(ga || gs)) {
        auto an = a.node(), sn = s.node(), on = out.node();
        record(tape, out, [an, sn, on, ga, gs, n] {
            const auto& g = on->grad;
            if (ga) {
                an->ensure_grad();
                const T sv = sn->value[0];
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * sv;
            }
            if (gs) {
                sn->ensure_grad();
                double acc = 0;
                for (std::size_t i = 0; i < n; ++i)
                    acc += static_cast<double>(g[i]) * static_cast<double>(an->value[i]);
                sn->grad[0] += static_cast<T>(acc);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out.data()[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * 0.7071067811865476)));
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double v = static_cast<double>(xn->value[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
                const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
                double d = cdf + v * pdf;
                if (debug::corrupt_gelu_backward) d *= 1.05;
                xn->grad[i] += on->grad[i] * static_cast<T>(d);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> exp_clamped(const Tensor<T>& x, double max_value) {
    auto out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(static_cast<double>(x.data()[i]));
        out.data()[i] = static_cast<T>(std::min(e, max_value));
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, n, max_value] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(static_cast<double>(xn->value[i]));
                if (e < max_value) xn->grad[i] += on->grad[i] * static_cast<T>(e);
            }
        });
    }
    return out;
}

// ---- matrix ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    auto out = Tensor<T>::zeros({m, n});
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = op + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ap[i * k + p];
            const T* brow = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const bool ga = tracked(a), gb = tracked(b);
    if (auto* tape = tape_for<T>(ga || gb)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        record(tape, out, [an, bn, on, ga, gb, m, k, n] {
            const T* g = on->grad.data();
            if (ga) {
                an->ensure_grad();
                T* da = an->grad.data();
                const T* bp = bn->value.data();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T s = 0;
                        const T* grow = g + i * n;
                        const T* brow = bp + p * n;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        da[i * k + p] += s;
                    }
            }
            if (gb) {
                bn->ensure_grad();
                T* db = bn->grad.data();
                const T* ap = an->value.data();
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = g + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = ap[i * k + p];
                        T* drow = db + p * n;
                        for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    auto out = Tensor<T>::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
    if (auto* tape = tape_for<T>(tracked(a))) {
        auto an = a.node(), on = out.node();
        record(tape, out, [an, on, r, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += on->grad[j * r + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    auto out = Tensor<T>::from(std::move(shape), a.data());
    if (auto* tape = tape_for<T>(tracked(a))) {
        auto an = a.node(), on = out.node();
        const std::size_t n = a.numel();
        record(tape, out, [an, on, n] {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    require_rank(x, 2, "slice_rows");
    if (begin + count > x.rows())
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_str(x.shape()));
    const std::size_t c = x.cols();
    auto out = Tensor<T>::zeros({count, c});
    std::copy_n(x.data().begin() + begin * c, count * c, out.data().begin());
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, begin, count, c] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < count * c; ++i) xn->grad[begin * c + i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    require_rank(x, 2, "slice_cols");
    if (begin + count > x.cols())
        throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    auto out = Tensor<T>::zeros({r, count});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(x.data().begin() + i * c + begin, count, out.data().begin() + i * count);
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, begin, count, r, c] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    xn->grad[i * c + begin + j] += on->grad[i * count + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> row(const Tensor<T>& x, std::size_t i) {
    require_rank(x, 2, "row");
    if (i >= x.rows())
        throw ShapeError("row: index " + std::to_string(i) + " out of range for " +
                         shape_str(x.shape()));
    const std::size_t c = x.cols();
    auto out = Tensor<T>::zeros({c});
    std::copy_n(x.data().begin() + i * c, c, out.data().begin());
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, i, c] {
            xn->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += on->grad[j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    bool any = false;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.cols() != c)
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        total += p.rows();
        any = any || tracked(p);
    }
    auto out = Tensor<T>::zeros({total, c});
    std::size_t at = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(at);
        std::copy_n(p.data().begin(), p.numel(), out.data().begin() + at * c);
        at += p.rows();
    }
    if (auto* tape = tape_for<T>(any)) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<bool> track;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            track.push_back(tracked(p));
        }
        auto on = out.node();
        record(tape, out, [nodes, track, offsets, on, c] {
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!track[k]) continue;
                nodes[k]->ensure_grad();
                const std::size_t base = offsets[k] * c;
                for (std::size_t i = 0; i < nodes[k]->numel(); ++i)
                    nodes[k]->grad[i] += on->grad[base + i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    bool any = false;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.rows() != r)
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.cols();
        any = any || tracked(p);
    }
    auto out = Tensor<T>::zeros({r, total});
    std::size_t at = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(at);
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.data().begin() + i * pc, pc, out.data().begin() + i * total + at);
        at += pc;
    }
    if (auto* tape = tape_for<T>(any)) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<bool> track;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            track.push_back(tracked(p));
            widths.push_back(p.cols());
        }
        auto on = out.node();
        record(tape, out, [nodes, track, offsets, widths, on, r, total] {
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!track[k]) continue;
                nodes[k]->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                        nodes[k]->grad[i * widths[k] + j] += on->grad[i * total + offsets[k] + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: no inputs");
    const std::size_t c = rows[0].numel();
    bool any = false;
    for (const auto& v : rows) {
        require_rank(v, 1, "stack_rows");
        if (v.numel() != c)
            throw ShapeError("stack_rows: length mismatch " + shape_str(rows[0].shape()) + " vs " +
                             shape_str(v.shape()));
        any = any || tracked(v);
    }
    auto out = Tensor<T>::zeros({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(rows[i].data().begin(), c, out.data().begin() + i * c);
    if (auto* tape = tape_for<T>(any)) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<bool> track;
        for (const auto& v : rows) {
            nodes.push_back(v.node());
            track.push_back(tracked(v));
        }
        auto on = out.node();
        record(tape, out, [nodes, track, on, c] {
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (!track[i]) continue;
                nodes[i]->ensure_grad();
                for (std::size_t j = 0; j < c; ++j) nodes[i]->grad[j] += on->grad[i * c + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
    require_rank(table, 2, "embedding_rows");
    const std::size_t v = table.rows(), c = table.cols();
    for (std::int32_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw ContractError("embedding_rows: id " + std::to_string(id) +
                                " outside table of " + std::to_string(v) + " rows");
    auto out = Tensor<T>::zeros({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[i]) * c, c,
                    out.data().begin() + i * c);
    if (auto* tape = tape_for<T>(tracked(table))) {
        auto tn = table.node(), on = out.node();
        record(tape, out, [tn, on, ids, c] {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const std::size_t base = static_cast<std::size_t>(ids[i]) * c;
                for (std::size_t j = 0; j < c; ++j) tn->grad[base + j] += on->grad[i * c + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> combine_rows(const Tensor<T>& x,
                       const std::vector<std::vector<std::pair<std::size_t, double>>>& mix) {
    require_rank(x, 2, "combine_rows");
    const std::size_t c = x.cols();
    for (const auto& entry : mix)
        for (const auto& [src, w] : entry) {
            (void)w;
            if (src >= x.rows())
                throw ShapeError("combine_rows: source row " + std::to_string(src) +
                                 " out of range for " + shape_str(x.shape()));
        }
    auto out = Tensor<T>::zeros({mix.size(), c});
    for (std::size_t r = 0; r < mix.size(); ++r)
        for (const auto& [src, w] : mix[r]) {
            const T wv = static_cast<T>(w);
            for (std::size_t j = 0; j < c; ++j)
                out.data()[r * c + j] += wv * x.data()[src * c + j];
        }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, mix, c] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < mix.size(); ++r)
                for (const auto& [src, w] : mix[r]) {
                    const T wv = static_cast<T>(w);
                    for (std::size_t j = 0; j < c; ++j)
                        xn->grad[src * c + j] += wv * on->grad[r * c + j];
                }
        });
    }
    return out;
}

// ---- softmax family --------------------------------------------------------

namespace {

// Lane decomposition: a lane is the 1-D slice being normalized. Rank-1 with
// axis 0 is one lane over the whole vector; rank-2 axis 1 lanes are rows,
// axis 0 lanes are columns.
struct Lanes {
    std::size_t count;   // number of lanes
    std::size_t len;     // elements per lane
    std::size_t stride;  // element stride inside a lane
    std::size_t step;    // offset between lane starts
};

inline Lanes lanes_for(const Shape& s, std::size_t axis, const char* op) {
    if (s.size() == 1) {
        if (axis != 0) throw ShapeError(std::string(op) + ": axis out of range for rank-1");
        return {1, s[0], 1, 0};
    }
    if (s.size() == 2) {
        if (axis == 1) return {s[0], s[1], 1, s[1]};
        if (axis == 0) return {s[1], s[0], s[1], 1};
        throw ShapeError(std::string(op) + ": axis out of range for rank-2");
    }
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got rank " +
                     std::to_string(s.size()));
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const Lanes L = lanes_for(x.shape(), axis, "softmax");
    auto out = Tensor<T>::zeros(x.shape());
    for (std::size_t l = 0; l < L.count; ++l) {
        const std::size_t base = l * L.step;
        double mx = -1e300;
        for (std::size_t i = 0; i < L.len; ++i)
            mx = std::max(mx, static_cast<double>(x.data()[base + i * L.stride]));
        double denom = 0;
        for (std::size_t i = 0; i < L.len; ++i) {
            const double e = std::exp(static_cast<double>(x.data()[base + i * L.stride]) - mx);
            out.data()[base + i * L.stride] = static_cast<T>(e);
            denom += e;
        }
        for (std::size_t i = 0; i < L.len; ++i)
            out.data()[base + i * L.stride] = static_cast<T>(
                static_cast<double>(out.data()[base + i * L.stride]) / denom);
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, L] {
            xn->ensure_grad();
            for (std::size_t l = 0; l < L.count; ++l) {
                const std::size_t base = l * L.step;
                double dot = 0;
                for (std::size_t i = 0; i < L.len; ++i) {
                    const std::size_t k = base + i * L.stride;
                    dot += static_cast<double>(on->grad[k]) * static_cast<double>(on->value[k]);
                }
                for (std::size_t i = 0; i < L.len; ++i) {
                    const std::size_t k = base + i * L.stride;
                    xn->grad[k] += static_cast<T>(static_cast<double>(on->value[k]) *
                                                  (static_cast<double>(on->grad[k]) - dot));
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    const Lanes L = lanes_for(x.shape(), axis, "log_softmax");
    auto out = Tensor<T>::zeros(x.shape());
    for (std::size_t l = 0; l < L.count; ++l) {
        const std::size_t base = l * L.step;
        double mx = -1e300;
        for (std::size_t i = 0; i < L.len; ++i)
            mx = std::max(mx, static_cast<double>(x.data()[base + i * L.stride]));
        double denom = 0;
        for (std::size_t i = 0; i < L.len; ++i)
            denom += std::exp(static_cast<double>(x.data()[base + i * L.stride]) - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t i = 0; i < L.len; ++i) {
            const std::size_t k = base + i * L.stride;
            out.data()[k] = static_cast<T>(static_cast<double>(x.data()[k]) - lse);
        }
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, L] {
            xn->ensure_grad();
            for (std::size_t l = 0; l < L.count; ++l) {
                const std::size_t base = l * L.step;
                double gsum = 0;
                for (std::size_t i = 0; i < L.len; ++i)
                    gsum += static_cast<double>(on->grad[base + i * L.stride]);
                for (std::size_t i = 0; i < L.len; ++i) {
                    const std::size_t k = base + i * L.stride;
                    const double p = std::exp(static_cast<double>(on->value[k]));
                    xn->grad[k] += static_cast<T>(static_cast<double>(on->grad[k]) - p * gsum);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> causal_softmax_rows(const Tensor<T>& x) {
    require_rank(x, 2, "causal_softmax_rows");
    if (x.rows() != x.cols())
        throw ShapeError("causal_softmax_rows: matrix must be square, got " +
                         shape_str(x.shape()));
    const std::size_t n = x.rows();
    auto out = Tensor<T>::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j)
            mx = std::max(mx, static_cast<double>(x.data()[i * n + j]));
        double denom = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double e = std::exp(static_cast<double>(x.data()[i * n + j]) - mx);
            out.data()[i * n + j] = static_cast<T>(e);
            denom += e;
        }
        for (std::size_t j = 0; j <= i; ++j)
            out.data()[i * n + j] =
                static_cast<T>(static_cast<double>(out.data()[i * n + j]) / denom);
        // entries with j > i stay exactly zero
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const std::size_t k = i * n + j;
                    dot += static_cast<double>(on->grad[k]) * static_cast<double>(on->value[k]);
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const std::size_t k = i * n + j;
                    xn->grad[k] += static_cast<T>(static_cast<double>(on->value[k]) *
                                                  (static_cast<double>(on->grad[k]) - dot));
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
    if (x.rank() != 1 && x.rank() != 2)
        throw ShapeError("layer_norm: expected rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t d = x.rank() == 2 ? x.cols() : x.dim(0);
    const std::size_t r = x.rank() == 2 ? x.rows() : 1;
    require_rank(gain, 1, "layer_norm");
    require_rank(bias, 1, "layer_norm");
    if (gain.dim(0) != d || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) +
                         " does not match feature dim of " + shape_str(x.shape()));
    auto out = Tensor<T>::zeros(x.shape());
    // saved for backward
    auto xhat = std::make_shared<std::vector<double>>(r * d);
    auto inv = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += static_cast<double>(x.data()[i * d + j]);
        mu /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = static_cast<double>(x.data()[i * d + j]) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*inv)[i] = iv;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (static_cast<double>(x.data()[i * d + j]) - mu) * iv;
            (*xhat)[i * d + j] = xh;
            out.data()[i * d + j] = static_cast<T>(static_cast<double>(gain.data()[j]) * xh +
                                                   static_cast<double>(bias.data()[j]));
        }
    }
    const bool gx = tracked(x), gg = tracked(gain), gb = tracked(bias);
    if (auto* tape = tape_for<T>(gx || gg || gb)) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        record(tape, out, [xn, gn, bn, on, xhat, inv, gx, gg, gb, r, d] {
            for (std::size_t i = 0; i < r; ++i) {
                if (gx) {
                    xn->ensure_grad();
                    double m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(on->grad[i * d + j]) *
                                           static_cast<double>(gn->value[j]);
                        m1 += dxh;
                        m2 += dxh * (*xhat)[i * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(on->grad[i * d + j]) *
                                           static_cast<double>(gn->value[j]);
                        xn->grad[i * d + j] += static_cast<T>(
                            (*inv)[i] * (dxh - m1 - (*xhat)[i * d + j] * m2));
                    }
                }
                if (gg) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j)
                        gn->grad[j] += static_cast<T>(static_cast<double>(on->grad[i * d + j]) *
                                                      (*xhat)[i * d + j]);
                }
                if (gb) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += on->grad[i * d + j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, double min_norm) {
    if (x.rank() != 1 && x.rank() != 2)
        throw ShapeError("l2_normalize: expected rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t d = x.rank() == 2 ? x.cols() : x.dim(0);
    const std::size_t r = x.rank() == 2 ? x.rows() : 1;
    auto out = Tensor<T>::zeros(x.shape());
    auto norms = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(x.data()[i * d + j]);
            s += v * v;
        }
        const double nrm = std::sqrt(s);
        if (nrm < min_norm)
            throw ContractError("l2_normalize: degenerate embedding, row " + std::to_string(i) +
                                " has norm " + std::to_string(nrm));
        (*norms)[i] = nrm;
        for (std::size_t j = 0; j < d; ++j)
            out.data()[i * d + j] = static_cast<T>(static_cast<double>(x.data()[i * d + j]) / nrm);
    }
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, norms, r, d] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < d; ++j)
                    dot += static_cast<double>(on->grad[i * d + j]) *
                           static_cast<double>(on->value[i * d + j]);
                for (std::size_t j = 0; j < d; ++j)
                    xn->grad[i * d + j] += static_cast<T>(
                        (static_cast<double>(on->grad[i * d + j]) -
                         static_cast<double>(on->value[i * d + j]) * dot) /
                        (*norms)[i]);
            }
        });
    }
    return out;
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0;
    for (const T v : x.data()) acc += static_cast<double>(v);
    auto out = Tensor<T>::scalar(static_cast<T>(acc));
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on] {
            xn->ensure_grad();
            const T g = on->grad[0];
            for (auto& d : xn->grad) d += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ContractError("mean: empty tensor");
    double acc = 0;
    for (const T v : x.data()) acc += static_cast<double>(v);
    const double n = static_cast<double>(x.numel());
    auto out = Tensor<T>::scalar(static_cast<T>(acc / n));
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            const T g = static_cast<T>(static_cast<double>(on->grad[0]) / n);
            for (auto& d : xn->grad) d += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> diag(const Tensor<T>& x) {
    require_rank(x, 2, "diag");
    if (x.rows() != x.cols())
        throw ShapeError("diag: matrix must be square, got " + shape_str(x.shape()));
    const std::size_t n = x.rows();
    auto out = Tensor<T>::zeros({n});
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i * n + i];
    if (auto* tape = tape_for<T>(tracked(x))) {
        auto xn = x.node(), on = out.node();
        record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i * n + i] += on->grad[i];
        });
    }
    return out;
}

// ---- explicit instantiations -----------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define COSMOS_INSTANTIATE_OPS(T)                                                              \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> add_rowvec<T>(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> scale<T>(const Tensor<T>&, double);                                     \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                              \
    template Tensor<T> exp_clamped<T>(const Tensor<T>&, double);                               \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                         \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                    \
    template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);              \
    template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);              \
    template Tensor<T> row<T>(const Tensor<T>&, std::size_t);                                  \
    template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                          \
    template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                          \
    template Tensor<T> stack_rows<T>(const std::vector<Tensor<T>>&);                           \
    template Tensor<T> embedding_rows<T>(const Tensor<T>&, const std::vector<std::int32_t>&); \
    template Tensor<T> combine_rows<T>(                                                        \
        const Tensor<T>&, const std::vector<std::vector<std::pair<std::size_t, double>>>&);    \
    template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                              \
    template Tensor<T> log_softmax<T>(const Tensor<T>&, std::size_t);                          \
    template Tensor<T> causal_softmax_rows<T>(const Tensor<T>&);                               \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     double);                                                  \
    template Tensor<T> l2_normalize<T>(const Tensor<T>&, double);                              \
    template Tensor<T> sum<T>(const Tensor<T>&);                                               \
    template Tensor<T> mean<T>(const Tensor<T>&);                                              \
    template Tensor<T> diag<T>(const Tensor<T>&);

COSMOS_INSTANTIATE_OPS(float)
COSMOS_INSTANTIATE_OPS(double)

}  // namespace cosmos
