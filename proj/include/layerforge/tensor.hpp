#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding the value and (lazily) the
// gradient. Ops take the Tape they record onto; when the tape has gradients
// disabled, or no input requires a gradient, nothing is recorded. Backward
// replays the recorded closures in exact reverse order and accumulates into
// every node's grad buffer, so parameters keep accumulating across tapes until
// zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace layerforge::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "," : "") << s[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (numel(shape) != data.size()) {
            throw ShapeError("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    std::span<T> data_mut() const { return node_->value; }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() const {
        node_->ensure_grad();
        return node_->grad;
    }
    T item() const {
        if (size() != 1) {
            throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) const { node_->requires_grad = v; }
    void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    // Independent copy of the value (no grad, same requires_grad flag).
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& handle() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    bool check_finite() const { return check_finite_; }
    void set_check_finite(bool on) { check_finite_ = on; }
    std::size_t size() const { return entries_.size(); }

    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = seed and replays the tape backwards. The tape is
    // consumed.
    void backward(const Tensor<T>& loss, T seed = T(1)) {
        if (loss.size() != 1) {
            throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            entries_.clear();
            return;
        }
        loss.node().ensure_grad();
        loss.node().grad[0] += seed;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            (*it)();
        }
        entries_.clear();
    }

private:
    std::vector<std::function<void()>> entries_;
    bool grad_enabled_ = true;
    bool check_finite_ = false;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

template <class T>
bool any_requires_grad(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> xs) {
    if (!tape.grad_enabled()) {
        return false;
    }
    for (const auto* x : xs) {
        if (x->requires_grad()) {
            return true;
        }
    }
    return false;
}

template <class T>
Tensor<T> result(const Tape<T>& tape, Shape shape, std::vector<T> data, bool track, const char* op) {
    if (tape.check_finite()) {
        for (T v : data) {
            if (!std::isfinite(v)) {
                throw NonFiniteError(std::string(op) + ": non-finite value in output");
            }
        }
    }
    return Tensor<T>(std::move(shape), std::move(data), track);
}

template <class T>
void require_2d(const Tensor<T>& x, const char* op) {
    if (x.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(x.shape()));
    }
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n);
    {
        detail::Map<T> c(out.data(), m, n);
        c.noalias() = detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
    }
    const bool track = detail::any_requires_grad(tape, {&a, &b});
    auto y = detail::result(tape, {m, n}, std::move(out), track, "matmul");
    if (track) {
        tape.record([a, b, y, m, k, n] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            detail::MapC<T> dy(gy.data(), m, n);
            if (a.requires_grad()) {
                detail::Map<T>(a.grad_mut().data(), m, k).noalias() +=
                    dy * detail::MapC<T>(b.data().data(), k, n).transpose();
            }
            if (b.requires_grad()) {
                detail::Map<T>(b.grad_mut().data(), k, n).noalias() +=
                    detail::MapC<T>(a.data().data(), m, k).transpose() * dy;
            }
        });
    }
    return y;
}

namespace detail {

// Shared implementation of same-shape binary elementwise ops. dfa/dfb give the
// partial derivatives at index i.
template <class T, class F, class DA, class DB>
Tensor<T> binary(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA dfa, DB dfb) {
    require_same(a, b, op);
    std::vector<T> out(a.size());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(av[i], bv[i]);
    }
    const bool track = any_requires_grad(tape, {&a, &b});
    auto y = result(tape, a.shape(), std::move(out), track, op);
    if (track) {
        tape.record([a, b, y, dfa, dfb] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto av = a.data();
            auto bv = b.data();
            if (a.requires_grad()) {
                auto ga = a.grad_mut();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    ga[i] += gy[i] * dfa(av[i], bv[i]);
                }
            }
            if (b.requires_grad()) {
                auto gb = b.grad_mut();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gb[i] += gy[i] * dfb(av[i], bv[i]);
                }
            }
        });
    }
    return y;
}

}  // namespace detail

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        tape, a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        tape, a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        tape, a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

// x + bias, where bias has the size of x's trailing dimension.
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
    const std::size_t n = x.shape().back();
    if (bias.size() != n) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match trailing dim of " +
                         shape_str(x.shape()));
    }
    const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
    std::vector<T> out(x.data().begin(), x.data().end());
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] += bv[j];
        }
    }
    const bool track = detail::any_requires_grad(tape, {&x, &bias});
    auto y = detail::result(tape, x.shape(), std::move(out), track, "add_bias");
    if (track) {
        tape.record([x, bias, y, rows, n] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            if (x.requires_grad()) {
                auto gx = x.grad_mut();
                for (std::size_t i = 0; i < gy.size(); ++i) {
                    gx[i] += gy[i];
                }
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_mut();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gb[j] += gy[r * n + j];
                    }
                }
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s) {
    std::vector<T> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * s;
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, x.shape(), std::move(out), track, "scale");
    if (track) {
        tape.record([x, y, s] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                gx[i] += gy[i] * s;
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), track,
                            "reshape");
    if (track) {
        tape.record([x, y] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                gx[i] += gy[i];
            }
        });
    }
    return y;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_2d(x, "transpose");
    const auto m = x.dim(0), n = x.dim(1);
    std::vector<T> out(m * n);
    detail::Map<T>(out.data(), n, m) = detail::MapC<T>(x.data().data(), m, n).transpose();
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, {n, m}, std::move(out), track, "transpose");
    if (track) {
        tape.record([x, y, m, n] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            detail::Map<T>(x.grad_mut().data(), m, n) += detail::MapC<T>(gy.data(), n, m).transpose();
        });
    }
    return y;
}

// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) {
        throw ShapeError("concat: no inputs");
    }
    if (axis != 0 && axis != 1) {
        throw ShapeError("concat: axis must be 0 or 1");
    }
    for (const auto& x : xs) {
        detail::require_2d(x, "concat");
    }
    const std::size_t other = xs[0].dim(1 - axis);
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.dim(1 - axis) != other) {
            throw ShapeError("concat: incompatible shapes " + shape_str(xs[0].shape()) + " and " +
                             shape_str(x.shape()));
        }
        total += x.dim(axis);
    }
    const std::size_t rows = axis == 0 ? total : other;
    const std::size_t cols = axis == 0 ? other : total;
    std::vector<T> out(rows * cols);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    bool track = false;
    for (const auto& x : xs) {
        offsets.push_back(off);
        auto xv = x.data();
        if (axis == 0) {
            std::copy(xv.begin(), xv.end(), out.begin() + off * cols);
        } else {
            const auto w = x.dim(1);
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(xv.begin() + r * w, w, out.begin() + r * cols + off);
            }
        }
        off += x.dim(axis);
        track = track || (tape.grad_enabled() && x.requires_grad());
    }
    auto y = detail::result(tape, {rows, cols}, std::move(out), track, "concat");
    if (track) {
        tape.record([xs, y, offsets, axis, rows, cols] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            for (std::size_t i = 0; i < xs.size(); ++i) {
                const auto& x = xs[i];
                if (!x.requires_grad()) {
                    continue;
                }
                auto gx = x.grad_mut();
                if (axis == 0) {
                    for (std::size_t j = 0; j < gx.size(); ++j) {
                        gx[j] += gy[offsets[i] * cols + j];
                    }
                } else {
                    const auto w = x.dim(1);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < w; ++c) {
                            gx[r * w + c] += gy[r * cols + offsets[i] + c];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// Rows [start, start+len) (axis 0) or columns (axis 1) of a 2-D tensor.
template <class T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
    detail::require_2d(x, "slice");
    if ((axis != 0 && axis != 1) || start + len > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for " + shape_str(x.shape()));
    }
    const auto rows = x.dim(0), cols = x.dim(1);
    const std::size_t out_rows = axis == 0 ? len : rows;
    const std::size_t out_cols = axis == 0 ? cols : len;
    std::vector<T> out(out_rows * out_cols);
    auto xv = x.data();
    if (axis == 0) {
        std::copy_n(xv.begin() + start * cols, len * cols, out.begin());
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(xv.begin() + r * cols + start, len, out.begin() + r * len);
        }
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, {out_rows, out_cols}, std::move(out), track, "slice");
    if (track) {
        tape.record([x, y, axis, start, len, rows, cols] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            if (axis == 0) {
                for (std::size_t i = 0; i < len * cols; ++i) {
                    gx[start * cols + i] += gy[i];
                }
            } else {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < len; ++c) {
                        gx[r * cols + start + c] += gy[r * len + c];
                    }
                }
            }
        });
    }
    return y;
}

// Row-wise softmax of a 2-D tensor.
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
    detail::require_2d(x, "softmax_rows");
    const auto rows = x.dim(0), cols = x.dim(1);
    if (cols == 0) {
        throw ShapeError("softmax_rows: empty axis");
    }
    std::vector<T> out(rows * cols);
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * cols;
        T* o = out.data() + r * cols;
        const T mx = *std::max_element(in, in + cols);
        T sum = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        const T inv = T(1) / sum;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] *= inv;
        }
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, x.shape(), std::move(out), track, "softmax_rows");
    if (track) {
        tape.record([x, y, rows, cols] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            auto yv = y.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* s = yv.data() + r * cols;
                const T* g = gy.data() + r * cols;
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += g[c] * s[c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] += s[c] * (g[c] - dot);
                }
            }
        });
    }
    return y;
}

// x / sqrt(mean(x^2) + eps) per row; no learned gain or bias.
template <class T>
Tensor<T> rms_norm_rows(Tape<T>& tape, const Tensor<T>& x, T eps = T(1e-6)) {
    detail::require_2d(x, "rms_norm_rows");
    const auto rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(rows * cols);
    std::vector<T> inv_rms(rows);
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T ms = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            ms += xv[r * cols + c] * xv[r * cols + c];
        }
        ms /= static_cast<T>(cols);
        inv_rms[r] = T(1) / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xv[r * cols + c] * inv_rms[r];
        }
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, x.shape(), std::move(out), track, "rms_norm_rows");
    if (track) {
        tape.record([x, y, inv_rms = std::move(inv_rms), rows, cols] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            auto yv = y.data();
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += gy[r * cols + c] * yv[r * cols + c];
                }
                dot /= static_cast<T>(cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] += inv_rms[r] * (gy[r * cols + c] - yv[r * cols + c] * dot);
                }
            }
        });
    }
    return y;
}

// tanh-approximated GELU.
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    std::vector<T> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xv[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v)));
    }
    const bool track = detail::any_requires_grad(tape, {&x});
    auto y = detail::result(tape, x.shape(), std::move(out), track, "gelu");
    if (track) {
        tape.record([x, y] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            auto gx = x.grad_mut();
            auto xv = x.data();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const T v = xv[i];
                const T th = std::tanh(k * (v + a * v * v * v));
                const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3) * a * v * v);
                gx[i] += gy[i] * d;
            }
        });
    }
    return y;
}

// Mean squared error over all elements; returns a {1} tensor.
template <class T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require_same(pred, target, "mse");
    const std::size_t n = pred.size();
    if (n == 0) {
        throw ShapeError("mse: empty input");
    }
    auto pv = pred.data();
    auto tv = target.data();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = pv[i] - tv[i];
        acc += d * d;
    }
    const bool track = detail::any_requires_grad(tape, {&pred, &target});
    auto y = detail::result(tape, {1}, {acc / static_cast<T>(n)}, track, "mse");
    if (track) {
        tape.record([pred, target, y, n] {
            const auto& gy = y.node().grad;
            if (gy.empty()) {
                return;
            }
            const T g = gy[0] * T(2) / static_cast<T>(n);
            auto pv = pred.data();
            auto tv = target.data();
            if (pred.requires_grad()) {
                auto gp = pred.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    gp[i] += g * (pv[i] - tv[i]);
                }
            }
            if (target.requires_grad()) {
                auto gt = target.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    gt[i] -= g * (pv[i] - tv[i]);
                }
            }
        });
    }
    return y;
}

// Converts a tensor's value between scalar types (no tape; detached).
template <class U, class T>
Tensor<U> cast(const Tensor<T>& x, bool requires_grad = false) {
    std::vector<U> data(x.data().begin(), x.data().end());
    return Tensor<U>(x.shape(), std::move(data), requires_grad);
}

}  // namespace layerforge::ad
