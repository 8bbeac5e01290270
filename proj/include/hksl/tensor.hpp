#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace hksl {

using Shape = std::vector<std::size_t>;

/// Allocator that default-initializes, so resize() on doubles leaves memory unset.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using Buffer = std::vector<double, DefaultInitAllocator<double>>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (data_.size() != shape_size(shape_))
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    /// Contents are unspecified; every element must be written before use.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.data_.resize(shape_size(shape));
        t.shape_ = std::move(shape);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const {
        if (data_.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    /// Rows of a tensor viewed as [leading, last-axis].
    std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    Tensor reshaped(Shape shape) const& {
        Tensor t = *this;
        return std::move(t).reshaped(std::move(shape));
    }
    Tensor reshaped(Shape shape) && {
        if (shape_size(shape) != data_.size())
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        shape_ = std::move(shape);
        return std::move(*this);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    Shape shape_;
    Buffer data_;
};

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

inline ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    return MatMap(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// Parameters are identified by address; a parameter tensor must not move while a tape refers to it.
using ParamId = const Tensor*;
using Gradients = std::unordered_map<ParamId, Tensor>;

class Tape;

/// Handle to a value recorded on a tape.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

  private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of operations. Nodes are appended in creation order, so a node's
/// parents always precede it and a reverse sweep is a valid topological order.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        ParamId param = nullptr;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives gradient.
    Var constant(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, {}, {}, false, nullptr});
        return {this, nodes_.size() - 1};
    }

    /// Leaf bound to a parameter. Registering the same tensor twice returns the same node.
    Var param(const Tensor& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
        nodes_.push_back(Node{p, {}, {}, {}, true, &p});
        param_nodes_.emplace(&p, nodes_.size() - 1);
        param_order_.push_back(&p);
        return {this, nodes_.size() - 1};
    }

    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
        bool rg = false;
        for (auto p : parents) rg = rg || nodes_[p].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, std::move(parents), rg ? std::move(backward) : BackwardFn{}, rg,
                              nullptr});
        return {this, nodes_.size() - 1};
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<ParamId>& params() const { return param_order_; }

    /// Gradient buffer of a node, allocated on first use. Returns nullptr if the node needs no gradient.
    Tensor* grad_of(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return &n.grad;
    }

  private:
    std::vector<Node> nodes_;
    std::unordered_map<ParamId, std::size_t> param_nodes_;
    std::vector<ParamId> param_order_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

/// Reverse sweep from a scalar loss. Every parameter registered on the tape gets an entry;
/// parameters the loss does not depend on get zeros.
inline Gradients backward(Tape& tape, Var loss) {
    if (&loss.tape() != &tape) throw std::invalid_argument("loss does not belong to this tape");
    if (loss.value().size() != 1)
        throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    for (std::size_t i = 0; i < tape.size(); ++i) tape.node(i).grad = Tensor();
    if (Tensor* g = tape.grad_of(loss.id())) (*g)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = tape.node(i);
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(tape, i);
    }
    Gradients out;
    for (ParamId p : tape.params()) {
        const auto& n = tape.node(tape.param(*p).id());
        out.emplace(p, n.grad.empty() ? Tensor(p->shape()) : n.grad);
    }
    return out;
}

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

inline void require_same_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
}

template <class Fwd, class Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
    const Tensor& xv = x.value();
    Tensor out = Tensor::uninitialized(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi, deriv](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        const Tensor& in = t.node(xi).value;
        const Tensor& y = t.node(self).value;
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv(in[i], y[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. All take and return Vars on the same tape.

inline Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

inline Var add(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    const std::size_t ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        for (std::size_t p : {ai, bi})
            if (Tensor* gp = t.grad_of(p))
                for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a, b, "sub");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    const std::size_t ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        if (Tensor* ga = t.grad_of(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (Tensor* gb = t.grad_of(bi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a, b, "mul");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    const std::size_t ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& av = t.node(ai).value;
        const Tensor& bv = t.node(bi).value;
        if (Tensor* ga = t.grad_of(ai))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
        if (Tensor* gb = t.grad_of(bi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    });
}

/// Element-wise minimum; the gradient goes to the smaller operand (ties to the first).
inline Var minimum(Var a, Var b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a, b, "minimum");
    Tensor out = Tensor::uninitialized(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
    const std::size_t ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& av = t.node(ai).value;
        const Tensor& bv = t.node(bi).value;
        Tensor* ga = t.grad_of(ai);
        Tensor* gb = t.grad_of(bi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (av[i] <= bv[i]) {
                if (ga) (*ga)[i] += g[i];
            } else if (gb) {
                (*gb)[i] += g[i];
            }
        }
    });
}

inline Var scale(Var x, double c) {
    return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var x, double c) {
    return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var neg(Var x) { return scale(x, -1.0); }

/// x * s where s is a single-element Var.
inline Var scale_by(Var x, Var s) {
    detail::require_same_tape(x, s);
    if (s.value().size() != 1) throw std::invalid_argument("scale_by: scale must have one element");
    const double sv = s.value()[0];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * sv;
    const std::size_t xi = x.id(), si = s.id();
    return x.tape().record(std::move(out), {xi, si}, [xi, si](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& xv = t.node(xi).value;
        const double s0 = t.node(si).value[0];
        if (Tensor* gx = t.grad_of(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * s0;
        if (Tensor* gs = t.grad_of(si)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
            (*gs)[0] += acc;
        }
    });
}

inline Var relu(Var x) {
    return detail::unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
    return detail::unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
    return detail::unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var x) {
    return detail::unary(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
    return detail::unary(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var square(Var x) {
    return detail::unary(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// [rows, in] x [in, out] -> [rows, out].
inline Var matmul(Var a, Var b) {
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                                    shape_str(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out = Tensor::uninitialized({m, n});
    as_matrix(out, m, n).noalias() = as_matrix(av, m, k) * as_matrix(bv, k, n);
    const std::size_t ai = a.id(), bi = b.id();
    return a.tape().record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        if (Tensor* ga = t.grad_of(ai))
            as_matrix(*ga, m, k).noalias() += as_matrix(g, m, n) * as_matrix(t.node(bi).value, k, n).transpose();
        if (Tensor* gb = t.grad_of(bi))
            as_matrix(*gb, k, n).noalias() += as_matrix(t.node(ai).value, m, k).transpose() * as_matrix(g, m, n);
    });
}

/// Adds a bias vector of length cols() to every row.
inline Var add_row(Var x, Var bias) {
    detail::require_same_tape(x, bias);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols(), r = xv.rows();
    if (bias.value().size() != c)
        throw std::invalid_argument("add_row: bias length " + std::to_string(bias.value().size()) +
                                    " does not match " + std::to_string(c) + " columns");
    Tensor out = xv;
    const Tensor& bv = bias.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
    const std::size_t xi = x.id(), bi = bias.id();
    return x.tape().record(std::move(out), {xi, bi}, [xi, bi, r, c](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        if (Tensor* gx = t.grad_of(xi))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (Tensor* gb = t.grad_of(bi))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[i * c + j];
    });
}

/// Multiplies every row element-wise by a vector of length cols().
inline Var mul_row(Var x, Var scale_vec) {
    detail::require_same_tape(x, scale_vec);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols(), r = xv.rows();
    if (scale_vec.value().size() != c) throw std::invalid_argument("mul_row: length mismatch");
    Tensor out = xv;
    const Tensor& sv = scale_vec.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= sv[j];
    const std::size_t xi = x.id(), si = scale_vec.id();
    return x.tape().record(std::move(out), {xi, si}, [xi, si, r, c](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& xv2 = t.node(xi).value;
        const Tensor& sv2 = t.node(si).value;
        if (Tensor* gx = t.grad_of(xi))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[i * c + j] * sv2[j];
        if (Tensor* gs = t.grad_of(si))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*gs)[j] += g[i * c + j] * xv2[i * c + j];
    });
}

/// Normalizes each row to zero mean and unit variance (no affine part).
inline Var layer_norm(Var x, double eps = 1e-5) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out(xv.shape());
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = xv.ptr() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mean) * inv_std[i];
    }
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi, r, c, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        const Tensor& y = t.node(self).value;
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mg += g[i * c + j];
                mgy += g[i * c + j] * y[i * c + j];
            }
            mg *= inv_c;
            mgy *= inv_c;
            for (std::size_t j = 0; j < c; ++j)
                (*gx)[i * c + j] += inv_std[i] * (g[i * c + j] - mg - y[i * c + j] * mgy);
        }
    });
}

/// Concatenation along the last axis. All parts share the same leading shape.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Tape& tape = parts.front().tape();
    const std::size_t r = parts.front().value().rows();
    Shape lead = parts.front().shape();
    lead.pop_back();
    std::vector<std::size_t> widths, ids;
    std::size_t total = 0;
    for (const Var& p : parts) {
        detail::require_same_tape(parts.front(), p);
        Shape pl = p.shape();
        pl.pop_back();
        if (pl != lead) throw std::invalid_argument("concat: leading shapes differ");
        widths.push_back(p.value().cols());
        ids.push_back(p.id());
        total += widths.back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor out(out_shape);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(pv.ptr() + i * widths[k], widths[k], out.ptr() + i * total + off);
        off += widths[k];
    }
    return tape.record(std::move(out), ids, [ids, widths, r, total](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (Tensor* gp = t.grad_of(ids[k]))
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) (*gp)[i * widths[k] + j] += g[i * total + o + j];
            o += widths[k];
        }
    });
}

/// Columns [begin, end) of the last axis.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (begin >= end || end > c) throw std::invalid_argument("slice_cols: bad range");
    const std::size_t w = end - begin;
    Shape s = xv.shape();
    s.back() = w;
    Tensor out(s);
    for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.ptr() + i * c + begin, w, out.ptr() + i * w);
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi, r, c, w, begin](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) (*gx)[i * c + begin + j] += g[i * w + j];
    });
}

inline Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));  // copy: the parent keeps its value
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    });
}

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const std::size_t xi = x.id();
    return x.tape().record(Tensor::scalar(s), {xi}, [xi](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const double g = t.node(self).grad[0];
        for (double& v : gx->data()) v += g;
    });
}

inline Var mean(Var x) {
    const double n = static_cast<double>(x.value().size());
    return scale(sum(x), 1.0 / n);
}

/// Sum over the last axis, keeping it as width one.
inline Var row_sum(Var x) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    Shape s = xv.shape();
    s.back() = 1;
    Tensor out(s);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += xv[i * c + j];
        out[i] = acc;
    }
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi, r, c](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[i];
    });
}

/// Unit-normalizes each row. A zero row maps to zero and passes no gradient.
inline Var l2_normalize(Var x) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out(xv.shape());
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
        norms[i] = std::sqrt(s);
        if (norms[i] > 0.0)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / norms[i];
    }
    const std::size_t xi = x.id();
    return x.tape().record(std::move(out), {xi}, [xi, r, c, norms = std::move(norms)](Tape& t, std::size_t self) {
        Tensor* gx = t.grad_of(xi);
        if (!gx) return;
        const Tensor& g = t.node(self).grad;
        const Tensor& y = t.node(self).value;
        for (std::size_t i = 0; i < r; ++i) {
            if (norms[i] == 0.0) continue;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
        }
    });
}

/// Row-wise squared Euclidean distance, shape [rows, 1].
inline Var sq_dist(Var a, Var b) { return row_sum(square(sub(a, b))); }

/// 3x3 convolution with zero padding 1 on channels-last input.
/// x: [B, H, W, C], weight: [O, 3*3*C] ordered (kh, kw, c), bias: [O]. Output [B, Ho, Wo, O].
inline Var conv2d(Var x, Var weight, Var bias, std::size_t stride) {
    detail::require_same_tape(x, weight);
    detail::require_same_tape(x, bias);
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw std::invalid_argument("conv2d: input must be [B,H,W,C], got " + shape_str(xv.shape()));
    const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    const std::size_t K = 9 * C;
    const Tensor& wv = weight.value();
    if (wv.rank() != 2 || wv.dim(1) != K)
        throw std::invalid_argument("conv2d: weight must be [O," + std::to_string(K) + "], got " +
                                    shape_str(wv.shape()));
    const std::size_t O = wv.dim(0);
    if (bias.value().size() != O) throw std::invalid_argument("conv2d: bias length mismatch");
    const std::size_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
    const std::size_t R = B * Ho * Wo;

    Tensor cols = Tensor::uninitialized({R, K});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                double* row = cols.ptr() + ((b * Ho + oh) * Wo + ow) * K;
                for (std::size_t kh = 0; kh < 3; ++kh) {
                    const long ih = static_cast<long>(oh * stride + kh) - 1;
                    for (std::size_t kw = 0; kw < 3; ++kw) {
                        const long iw = static_cast<long>(ow * stride + kw) - 1;
                        double* dst = row + (kh * 3 + kw) * C;
                        if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) {
                            std::fill_n(dst, C, 0.0);
                            continue;
                        }
                        std::copy_n(xv.ptr() + ((b * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw)) * C,
                                    C, dst);
                    }
                }
            }

    Tensor out = Tensor::uninitialized({B, Ho, Wo, O});
    auto om = as_matrix(out, R, O);
    om.noalias() = as_matrix(cols, R, K) * as_matrix(wv, O, K).transpose();
    const Tensor& bv = bias.value();
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t o = 0; o < O; ++o) out[i * O + o] += bv[o];

    const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
    const bool need_cols = weight.requires_grad();
    return x.tape().record(
        std::move(out), {xi, wi, bi},
        [xi, wi, bi, B, H, W, C, O, K, Ho, Wo, R, stride, cols = need_cols ? std::move(cols) : Tensor()](
            Tape& t, std::size_t self) {
            const Tensor& g = t.node(self).grad;
            auto gm = as_matrix(g, R, O);
            if (Tensor* gw = t.grad_of(wi)) as_matrix(*gw, O, K).noalias() += gm.transpose() * as_matrix(cols, R, K);
            if (Tensor* gb = t.grad_of(bi))
                for (std::size_t i = 0; i < R; ++i)
                    for (std::size_t o = 0; o < O; ++o) (*gb)[o] += g[i * O + o];
            if (Tensor* gx = t.grad_of(xi)) {
                RowMajor dcols = gm * as_matrix(t.node(wi).value, O, K);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const double* row = dcols.data() + ((b * Ho + oh) * Wo + ow) * K;
                            for (std::size_t kh = 0; kh < 3; ++kh) {
                                const long ih = static_cast<long>(oh * stride + kh) - 1;
                                for (std::size_t kw = 0; kw < 3; ++kw) {
                                    const long iw = static_cast<long>(ow * stride + kw) - 1;
                                    if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W))
                                        continue;
                                    double* dst = gx->ptr() + ((b * H + static_cast<std::size_t>(ih)) * W +
                                                               static_cast<std::size_t>(iw)) * C;
                                    const double* src = row + (kh * 3 + kw) * C;
                                    for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                                }
                            }
                        }
            }
        });
}

// ---------------------------------------------------------------------------
// Gradient checking.

/// Max over coordinates of |analytic - central difference| / max(1e-8, |central difference|),
/// taken over every tensor in `params`. `f` builds a scalar on a fresh tape; it must register
/// each checked tensor with Tape::param.
inline double finite_diff_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                                double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
    Gradients grads;
    {
        Tape tape;
        Var loss = f(tape);
        if (!std::isfinite(loss.value().item())) throw std::domain_error("finite_diff_check: non-finite value");
        grads = backward(tape, loss);
    }
    auto eval = [&]() {
        Tape tape;
        const double v = f(tape).value().item();
        if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite value");
        return v;
    };
    double worst = 0.0;
    for (Tensor* p : params) {
        auto it = grads.find(p);
        const Tensor analytic = it == grads.end() ? Tensor(p->shape()) : it->second;
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double orig = (*p)[i];
            (*p)[i] = orig + epsilon;
            const double up = eval();
            (*p)[i] = orig - epsilon;
            const double down = eval();
            (*p)[i] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric)));
        }
    }
    return worst;
}

/// Single-input form: `f` maps the input Var to a scalar.
inline double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double epsilon) {
    Tensor x = point;
    return finite_diff_check([&](Tape& t) { return f(t, t.param(x)); }, std::vector<Tensor*>{&x}, epsilon);
}

}  // namespace hksl
