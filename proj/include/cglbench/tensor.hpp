#pragma once

// Dense float64 tensors with a tape-based reverse-mode differentiator.
//
// A Tensor is a shared handle: copies alias the same storage, deep_copy()
// makes an independent one. Operations live in cglbench::ops and take the
// Tape they record onto; a node is recorded only when some input requires
// gradients, so evaluation-only passes leave the tape empty.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace cglbench {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out << ", ";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        return Tensor(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
    }

    [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return impl().shape; }
    [[nodiscard]] std::size_t rank() const { return impl().shape.size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
    [[nodiscard]] std::size_t numel() const { return impl().data.size(); }

    [[nodiscard]] std::span<double> data() { return impl().data; }
    [[nodiscard]] std::span<const double> data() const { return impl().data; }
    [[nodiscard]] double item() const {
        if (numel() != 1) {
            throw TensorError("item() on tensor of shape " + to_string(shape()));
        }
        return impl().data[0];
    }

    [[nodiscard]] bool requires_grad() const { return impl().requires_grad; }
    void set_requires_grad(bool value) { impl().requires_grad = value; }

    [[nodiscard]] bool has_grad() const { return !impl().grad.empty(); }
    [[nodiscard]] std::span<double> grad() { return impl().grad; }
    [[nodiscard]] std::span<const double> grad() const { return impl().grad; }

    /// Allocates (zero-filled) or resets the gradient buffer.
    void zero_grad() { impl().grad.assign(numel(), 0.0); }
    /// Drops the gradient buffer; has_grad() becomes false.
    void clear_grad() { impl().grad.clear(); }

    /// Gradient buffer, allocated on first use. Handle semantics: callable on
    /// const handles because the storage is shared.
    [[nodiscard]] std::span<double> ensure_grad() const {
        auto& s = shared();
        if (s.grad.size() != s.data.size()) s.grad.assign(s.data.size(), 0.0);
        return s.grad;
    }

    [[nodiscard]] Tensor deep_copy() const {
        Tensor out(impl().shape, impl().data, impl().requires_grad);
        out.impl().grad = impl().grad;
        return out;
    }

    /// Value copy that does not require gradients.
    [[nodiscard]] Tensor detach() const { return Tensor(impl().shape, impl().data, false); }

    [[nodiscard]] bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    struct Storage {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Tensor(Shape shape, std::vector<double> values, bool requires_grad)
        : impl_(std::make_shared<Storage>()) {
        if (element_count(shape) != values.size()) {
            throw TensorError("tensor of shape " + to_string(shape) + " cannot hold " +
                              std::to_string(values.size()) + " values");
        }
        for (auto d : shape) {
            if (d == 0) throw TensorError("zero-sized dimension in shape " + to_string(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    Storage& impl() {
        if (!impl_) throw TensorError("use of undefined tensor");
        return *impl_;
    }
    const Storage& impl() const {
        if (!impl_) throw TensorError("use of undefined tensor");
        return *impl_;
    }
    Storage& shared() const {
        if (!impl_) throw TensorError("use of undefined tensor");
        return *impl_;
    }

    std::shared_ptr<Storage> impl_;
};

/// Append-only record of differentiable operations.
class Tape {
public:
    using Rule = std::function<void()>;

    void record(std::vector<Tensor> inputs, Tensor output, Rule rule) {
        nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(rule)});
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    /// Reverse sweep from a scalar loss. Gradients of every tensor touched by
    /// the tape are reset first, so leaves end up holding exactly dloss/dleaf
    /// unless `accumulate` is set, in which case leaf gradients are added to.
    void backward(const Tensor& loss, bool accumulate = false) {
        if (!loss.defined() || loss.numel() != 1) {
            throw TensorError("backward requires a scalar loss, got shape " +
                              (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
        }
        std::ptrdiff_t last = -1;
        for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes_.size()) - 1; i >= 0; --i) {
            if (nodes_[static_cast<std::size_t>(i)].output.same_storage(loss)) {
                last = i;
                break;
            }
        }
        if (last < 0 && !loss.requires_grad()) {
            throw TensorError("loss is not reachable from the tape");
        }

        for (std::ptrdiff_t i = 0; i <= last; ++i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            node.output.zero_grad();
        }
        if (!accumulate) {
            for (std::ptrdiff_t i = 0; i <= last; ++i) {
                for (auto& in : nodes_[static_cast<std::size_t>(i)].inputs) {
                    if (in.requires_grad() && !is_output(in, i)) in.zero_grad();
                }
            }
            if (last < 0) const_cast<Tensor&>(loss).zero_grad();
        }
        Tensor seed = loss;
        seed.ensure_grad()[0] += 1.0;
        for (std::ptrdiff_t i = last; i >= 0; --i) {
            nodes_[static_cast<std::size_t>(i)].rule();
        }
    }

private:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        Rule rule;
    };

    // True when `t` was produced by a node earlier than `before`.
    bool is_output(const Tensor& t, std::ptrdiff_t before) const {
        for (std::ptrdiff_t i = 0; i < before; ++i) {
            if (nodes_[static_cast<std::size_t>(i)].output.same_storage(t)) return true;
        }
        return false;
    }

    std::vector<Node> nodes_;
};

/// Disables tape recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool& enabled() {
        thread_local bool flag = true;
        return flag;
    }

private:
    bool previous_;
};

namespace ops {
namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!NoGradGuard::enabled()) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw TensorError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const std::string& op) {
    if (axis >= shape.size()) {
        throw TensorError(op + ": axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace detail

/// Matrix product. Supports [m,k]x[k,n], [b,m,k]x[k,n] (shared right factor)
/// and [m,k]x[b,k,n] (shared left factor, e.g. a graph operator).
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    using namespace detail;
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const bool left_batched = sa.size() == 3 && sb.size() == 2;
    const bool right_batched = sa.size() == 2 && sb.size() == 3;
    const bool plain = sa.size() == 2 && sb.size() == 2;
    if (!(left_batched || right_batched || plain)) shape_error("matmul", sa, sb);

    if (plain || left_batched) {
        const std::size_t k = sa.back();
        const std::size_t rows = a.numel() / k;
        if (sb[0] != k) shape_error("matmul", sa, sb);
        const std::size_t n = sb[1];
        Shape out_shape = sa;
        out_shape.back() = n;
        Tensor out = Tensor::zeros(out_shape);
        MatrixMap(out.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n)).noalias() =
            ConstMatrixMap(a.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)) *
            ConstMatrixMap(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        if (any_requires_grad({&a, &b})) {
            out.set_requires_grad(true);
            tape.record({a, b}, out, [a, b, out, rows, k, n]() mutable {
                ConstMatrixMap dout(out.grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
                if (a.requires_grad()) {
                    MatrixMap(a.ensure_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k))
                        .noalias() +=
                        dout * ConstMatrixMap(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n))
                                   .transpose();
                }
                if (b.requires_grad()) {
                    MatrixMap(b.ensure_grad().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n))
                        .noalias() +=
                        ConstMatrixMap(a.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k))
                            .transpose() *
                        dout;
                }
            });
        }
        return out;
    }

    // [m,k] x [batch,k,n]
    const std::size_t m = sa[0];
    const std::size_t k = sa[1];
    if (sb[1] != k) shape_error("matmul", sa, sb);
    const std::size_t batch = sb[0];
    const std::size_t n = sb[2];
    Tensor out = Tensor::zeros({batch, m, n});
    const auto em = static_cast<Eigen::Index>(m);
    const auto ek = static_cast<Eigen::Index>(k);
    const auto en = static_cast<Eigen::Index>(n);
    ConstMatrixMap left(a.data().data(), em, ek);
    for (std::size_t i = 0; i < batch; ++i) {
        MatrixMap(out.data().data() + i * m * n, em, en).noalias() =
            left * ConstMatrixMap(b.data().data() + i * k * n, ek, en);
    }
    if (any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        tape.record({a, b}, out, [a, b, out, batch, em, ek, en]() mutable {
            const auto mn = static_cast<std::size_t>(em * en);
            const auto kn = static_cast<std::size_t>(ek * en);
            ConstMatrixMap left(a.data().data(), em, ek);
            for (std::size_t i = 0; i < batch; ++i) {
                ConstMatrixMap dout(out.grad().data() + i * mn, em, en);
                if (a.requires_grad()) {
                    MatrixMap(a.ensure_grad().data(), em, ek).noalias() +=
                        dout * ConstMatrixMap(b.data().data() + i * kn, ek, en).transpose();
                }
                if (b.requires_grad()) {
                    MatrixMap(b.ensure_grad().data() + i * kn, ek, en).noalias() += left.transpose() * dout;
                }
            }
        });
    }
    return out;
}

/// Elementwise sum. `b` may also be a vector matching the last axis of `a`
/// (bias broadcast).
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool bias = !same && b.rank() == 1 && b.dim(0) == a.shape().back();
    if (!same && !bias) detail::shape_error("add", a.shape(), b.shape());
    Tensor out = a.detach();
    auto od = out.data();
    auto bd = b.data();
    const std::size_t width = bd.size();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[same ? i : i % width];
    if (detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        tape.record({a, b}, out, [a, b, out, same, width]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : i % width] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("sub", a.shape(), b.shape());
    Tensor out = a.detach();
    auto od = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
    if (detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        tape.record({a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("mul", a.shape(), b.shape());
    Tensor out = a.detach();
    auto od = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
    if (detail::any_requires_grad({&a, &b})) {
        out.set_requires_grad(true);
        tape.record({a, b}, out, [a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.ensure_grad();
                auto bd = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
            }
            if (b.requires_grad()) {
                auto gb = b.ensure_grad();
                auto ad = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
    Tensor out = a.detach();
    for (auto& v : out.data()) v *= factor;
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out, factor]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
    Tensor out = a.detach();
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            auto ad = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (ad[i] > 0.0) ga[i] += g[i];
            }
        });
    }
    return out;
}

/// Same data, new shape.
inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
    if (element_count(shape) != a.numel()) detail::shape_error("reshape", a.shape(), shape);
    Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw TensorError("concat: no inputs");
    Shape out_shape = parts.front().shape();
    if (axis >= out_shape.size()) throw TensorError("concat: axis out of range for " + to_string(out_shape));
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != out_shape.size()) detail::shape_error("concat", parts.front().shape(), probe);
        for (std::size_t i = 0; i < probe.size(); ++i) {
            if (i != axis && probe[i] != parts.front().shape()[i]) {
                detail::shape_error("concat", parts.front().shape(), probe);
            }
        }
        out_shape[axis] += probe[axis];
    }
    const auto split = detail::split_axis(out_shape, axis, "concat");
    Tensor out = Tensor::zeros(out_shape);
    auto od = out.data();
    std::size_t offset = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        const std::size_t extent = p.dim(axis);
        auto pd = p.data();
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * extent * split.inner), extent * split.inner,
                        od.begin() + static_cast<std::ptrdiff_t>((o * split.extent + offset) * split.inner));
        }
        offset += extent;
        needs_grad = needs_grad || p.requires_grad();
    }
    if (needs_grad && NoGradGuard::enabled()) {
        out.set_requires_grad(true);
        tape.record(parts, out, [parts, out, axis, split]() mutable {
            auto g = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t extent = p.dim(axis);
                if (p.requires_grad()) {
                    auto gp = p.ensure_grad();
                    for (std::size_t o = 0; o < split.outer; ++o) {
                        for (std::size_t i = 0; i < extent * split.inner; ++i) {
                            gp[o * extent * split.inner + i] += g[(o * split.extent + offset) * split.inner + i];
                        }
                    }
                }
                offset += extent;
            }
        });
    }
    return out;
}

/// Gathers `indices` along `axis`; slicing is the contiguous special case.
inline Tensor index_select(Tape& tape, const Tensor& a, std::size_t axis, std::vector<std::size_t> indices) {
    const auto split = detail::split_axis(a.shape(), axis, "index_select");
    if (indices.empty()) throw TensorError("index_select: empty index list");
    for (auto idx : indices) {
        if (idx >= split.extent) {
            throw TensorError("index_select: index " + std::to_string(idx) + " out of range for shape " +
                              to_string(a.shape()));
        }
    }
    Shape out_shape = a.shape();
    out_shape[axis] = indices.size();
    Tensor out = Tensor::zeros(out_shape);
    auto od = out.data();
    auto ad = a.data();
    const std::size_t m = indices.size();
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
            std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * split.extent + indices[j]) * split.inner),
                        split.inner, od.begin() + static_cast<std::ptrdiff_t>((o * m + j) * split.inner));
        }
    }
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out, split, indices = std::move(indices)]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            const std::size_t m = indices.size();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t j = 0; j < m; ++j) {
                    for (std::size_t i = 0; i < split.inner; ++i) {
                        ga[(o * split.extent + indices[j]) * split.inner + i] += g[(o * m + j) * split.inner + i];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor slice(Tape& tape, const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (begin >= end) throw TensorError("slice: empty range");
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return index_select(tape, a, axis, std::move(idx));
}

inline Tensor sum(Tape& tape, const Tensor& a, std::size_t axis) {
    const auto split = detail::split_axis(a.shape(), axis, "sum");
    Tensor out = Tensor::zeros(detail::drop_axis(a.shape(), axis));
    auto od = out.data();
    auto ad = a.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t e = 0; e < split.extent; ++e) {
            const double* src = ad.data() + (o * split.extent + e) * split.inner;
            double* dst = od.data() + o * split.inner;
            for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
    }
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out, split]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t e = 0; e < split.extent; ++e) {
                    for (std::size_t i = 0; i < split.inner; ++i) {
                        ga[(o * split.extent + e) * split.inner + i] += g[o * split.inner + i];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& a, std::size_t axis) {
    const double n = static_cast<double>(detail::split_axis(a.shape(), axis, "mean").extent);
    return scale(tape, sum(tape, a, axis), 1.0 / n);
}

/// Max over an axis. Gradient goes to the first maximal entry.
inline Tensor max(Tape& tape, const Tensor& a, std::size_t axis) {
    const auto split = detail::split_axis(a.shape(), axis, "max");
    Tensor out = Tensor::zeros(detail::drop_axis(a.shape(), axis));
    auto od = out.data();
    auto ad = a.data();
    std::vector<std::size_t> argmax(split.outer * split.inner, 0);
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < split.inner; ++i) {
            double best = ad[o * split.extent * split.inner + i];
            std::size_t where = 0;
            for (std::size_t e = 1; e < split.extent; ++e) {
                const double v = ad[(o * split.extent + e) * split.inner + i];
                if (v > best) {
                    best = v;
                    where = e;
                }
            }
            od[o * split.inner + i] = best;
            argmax[o * split.inner + i] = where;
        }
    }
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out, split, argmax = std::move(argmax)]() mutable {
            auto g = out.grad();
            auto ga = a.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t i = 0; i < split.inner; ++i) {
                    const std::size_t e = argmax[o * split.inner + i];
                    ga[(o * split.extent + e) * split.inner + i] += g[o * split.inner + i];
                }
            }
        });
    }
    return out;
}

/// Sum of all entries, shape [1].
inline Tensor sum_all(Tape& tape, const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out]() mutable {
            const double g = out.grad()[0];
            for (auto& v : a.ensure_grad()) v += g;
        });
    }
    return out;
}

/// Numerically stable log-softmax over the last axis.
inline Tensor log_softmax(Tape& tape, const Tensor& a) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    Tensor out = a.detach();
    auto od = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = od.data() + r * n;
        const double peak = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += std::exp(row[c] - peak);
        const double log_norm = peak + std::log(total);
        for (std::size_t c = 0; c < n; ++c) row[c] -= log_norm;
    }
    if (detail::any_requires_grad({&a})) {
        out.set_requires_grad(true);
        tape.record({a}, out, [a, out, rows, n]() mutable {
            auto g = out.grad();
            auto y = out.data();
            auto ga = a.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double gsum = 0.0;
                for (std::size_t c = 0; c < n; ++c) gsum += g[r * n + c];
                for (std::size_t c = 0; c < n; ++c) {
                    ga[r * n + c] += g[r * n + c] - std::exp(y[r * n + c]) * gsum;
                }
            }
        });
    }
    return out;
}

/// Mean over rows of -logp[row, target[row]] for a [batch, classes] tensor.
inline Tensor nll(Tape& tape, const Tensor& log_probs, const std::vector<std::size_t>& targets) {
    if (log_probs.rank() != 2 || log_probs.dim(0) != targets.size()) {
        throw TensorError("nll: expected [batch, classes] with " + std::to_string(targets.size()) +
                          " rows, got " + to_string(log_probs.shape()));
    }
    const std::size_t n = log_probs.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] >= n) throw TensorError("nll: target out of range");
        total -= log_probs.data()[r * n + targets[r]];
    }
    const double inv = 1.0 / static_cast<double>(targets.size());
    Tensor out = Tensor::scalar(total * inv);
    if (detail::any_requires_grad({&log_probs})) {
        out.set_requires_grad(true);
        tape.record({log_probs}, out, [log_probs, out, targets, n, inv]() mutable {
            const double g = out.grad()[0];
            auto gl = log_probs.ensure_grad();
            for (std::size_t r = 0; r < targets.size(); ++r) gl[r * n + targets[r]] -= g * inv;
        });
    }
    return out;
}

/// Depthwise temporal convolution with zero "same" padding.
/// input [batch, frames, joints, channels], kernel [taps, channels], odd taps.
inline Tensor temporal_conv(Tape& tape, const Tensor& input, const Tensor& kernel) {
    if (input.rank() != 4 || kernel.rank() != 2 || kernel.dim(1) != input.dim(3) || kernel.dim(0) % 2 == 0) {
        detail::shape_error("temporal_conv", input.shape(), kernel.shape());
    }
    const std::size_t batch = input.dim(0), frames = input.dim(1), joints = input.dim(2), channels = input.dim(3);
    const std::size_t taps = kernel.dim(0);
    if (frames < taps) {
        throw TensorError("temporal_conv: " + std::to_string(frames) + " frames is fewer than kernel size " +
                          std::to_string(taps));
    }
    const auto half = static_cast<std::ptrdiff_t>(taps / 2);
    const std::size_t frame_stride = joints * channels;
    Tensor out = Tensor::zeros(input.shape());
    auto od = out.data();
    auto xd = input.data();
    auto kd = kernel.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < frames; ++t) {
            double* dst = od.data() + (b * frames + t) * frame_stride;
            for (std::size_t k = 0; k < taps; ++k) {
                const auto src_t = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
                if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(frames)) continue;
                const double* src = xd.data() + (b * frames + static_cast<std::size_t>(src_t)) * frame_stride;
                const double* w = kd.data() + k * channels;
                for (std::size_t j = 0; j < joints; ++j) {
                    for (std::size_t c = 0; c < channels; ++c) dst[j * channels + c] += w[c] * src[j * channels + c];
                }
            }
        }
    }
    if (detail::any_requires_grad({&input, &kernel})) {
        out.set_requires_grad(true);
        tape.record({input, kernel}, out,
                    [input, kernel, out, batch, frames, joints, channels, taps, half, frame_stride]() mutable {
                        auto g = out.grad();
                        auto xd = input.data();
                        auto kd = kernel.data();
                        std::span<double> gx = input.requires_grad() ? input.ensure_grad() : std::span<double>{};
                        std::span<double> gk = kernel.requires_grad() ? kernel.ensure_grad() : std::span<double>{};
                        for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t t = 0; t < frames; ++t) {
                                const double* gd = g.data() + (b * frames + t) * frame_stride;
                                for (std::size_t k = 0; k < taps; ++k) {
                                    const auto src_t =
                                        static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - half;
                                    if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(frames)) continue;
                                    const std::size_t src_off =
                                        (b * frames + static_cast<std::size_t>(src_t)) * frame_stride;
                                    for (std::size_t j = 0; j < joints; ++j) {
                                        for (std::size_t c = 0; c < channels; ++c) {
                                            const double gv = gd[j * channels + c];
                                            if (!gx.empty()) gx[src_off + j * channels + c] += kd[k * channels + c] * gv;
                                            if (!gk.empty()) gk[k * channels + c] += xd[src_off + j * channels + c] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    });
    }
    return out;
}

}  // namespace ops

/// Mean cross-entropy with the softmax taken over active classes only.
/// `labels` are global class ids; `active` has one flag per logit column.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels,
                            const std::vector<bool>& active) {
    if (logits.rank() != 2 || logits.dim(1) != active.size()) {
        throw TensorError("cross_entropy: logits " + to_string(logits.shape()) + " do not match mask of " +
                          std::to_string(active.size()) + " classes");
    }
    if (labels.empty() || labels.size() != logits.dim(0)) {
        throw TensorError("cross_entropy: need one label per row, got " + std::to_string(labels.size()));
    }
    std::vector<std::size_t> columns;
    std::vector<std::size_t> position(active.size(), active.size());
    for (std::size_t c = 0; c < active.size(); ++c) {
        if (active[c]) {
            position[c] = columns.size();
            columns.push_back(c);
        }
    }
    if (columns.empty()) throw TensorError("cross_entropy: no active classes");
    std::vector<std::size_t> targets;
    targets.reserve(labels.size());
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= active.size() ||
            position[static_cast<std::size_t>(label)] == active.size()) {
            throw TensorError("cross_entropy: label " + std::to_string(label) + " is not an active class");
        }
        targets.push_back(position[static_cast<std::size_t>(label)]);
    }
    Tensor restricted = columns.size() == active.size() ? logits : ops::index_select(tape, logits, 1, columns);
    return ops::nll(tape, ops::log_softmax(tape, restricted), targets);
}

/// theta <- theta - lr * grad, then gradients are cleared.
inline void sgd_step(std::span<Tensor> params, double learning_rate) {
    if (!(learning_rate > 0.0)) throw TensorError("sgd_step: learning rate must be positive");
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].has_grad()) {
            throw TensorError("sgd_step: parameter " + std::to_string(p) + " has no gradient");
        }
    }
    for (auto& param : params) {
        auto d = param.data();
        auto g = param.grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= learning_rate * g[i];
        param.clear_grad();
    }
}

/// Adam with bias correction. One instance per training phase.
class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
        if (!(learning_rate > 0.0)) throw TensorError("Adam: learning rate must be positive");
    }

    void step(std::span<Tensor> params) {
        if (first_.empty()) {
            for (const auto& p : params) {
                first_.emplace_back(p.numel(), 0.0);
                second_.emplace_back(p.numel(), 0.0);
            }
        }
        if (first_.size() != params.size()) throw TensorError("Adam: parameter list changed between steps");
        ++steps_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (!params[p].has_grad()) {
                throw TensorError("Adam: parameter " + std::to_string(p) + " has no gradient");
            }
            auto d = params[p].data();
            auto g = params[p].grad();
            auto& m = first_[p];
            auto& v = second_[p];
            for (std::size_t i = 0; i < d.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                d[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
            params[p].clear_grad();
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t steps_ = 0;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
};

}  // namespace cglbench
