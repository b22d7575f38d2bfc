#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "looc/error.hpp"

namespace looc {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " elements");
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-2 accessors.
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.empty() ? 0 : data_.size() / std::max<std::size_t>(shape_[0], 1); }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }

    double item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

namespace kernels {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap view(const Tensor& t) {
    return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap view(Tensor& t) {
    return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// c (+)= op(a) * op(b) where op is optional transposition.
inline void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c, bool accumulate) {
    auto A = view(a);
    auto B = view(b);
    auto C = view(c);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b) C.noalias() += A * B;
    else if (!trans_a && trans_b) C.noalias() += A * B.transpose();
    else if (trans_a && !trans_b) C.noalias() += A.transpose() * B;
    else C.noalias() += A.transpose() * B.transpose();
}

}  // namespace kernels

enum class OpKind {
    Parameter,
    Constant,
    MatMul,
    Add,
    Mul,
    Relu,
    Scale,
    AddBias,
    L2Normalize,
    LogSoftmaxNll,
    RowSum,
    ConcatCols,
    Transpose,
};

enum class ElementwiseOp { Add, Mul, Relu, Scale };

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its Tape lives.
class Var {
public:
    Var() = default;
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }
    const Tape* tape() const noexcept { return tape_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in construction order, which
/// is a topological order; backward() walks them once in reverse.
class Tape {
public:
    static constexpr double kNormEps = 1e-12;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Differentiable leaf.
    Var parameter(Tensor value) { return push(OpKind::Parameter, {}, std::move(value), true); }

    /// Detached leaf: never accumulates gradient.
    Var constant(Tensor value) { return push(OpKind::Constant, {}, std::move(value), false); }

    /// Detached copy of an existing node's value.
    Var detach(Var v) { return constant(value(v)); }

    const Tensor& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    OpKind kind(Var v) const { return node(v).kind; }

    /// Gradient accumulated by the last backward(); zeros when the node took no part.
    Tensor grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
        return n.grad;
    }

    Var matmul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
            throw DimensionError("matmul shape mismatch: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
        Tensor out(Shape{A.dim(0), B.dim(1)});
        kernels::gemm(A, false, B, false, out, false);
        return push(OpKind::MatMul, {a.id_, b.id_}, std::move(out), any_grad({a, b}));
    }

    Var add(Var a, Var b) {
        require_same_shape("add", a, b);
        Tensor out = value(a);
        const auto& B = value(b).storage();
        auto& o = out.storage();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += B[i];
        return push(OpKind::Add, {a.id_, b.id_}, std::move(out), any_grad({a, b}));
    }

    Var mul(Var a, Var b) {
        require_same_shape("mul", a, b);
        Tensor out = value(a);
        const auto& B = value(b).storage();
        auto& o = out.storage();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= B[i];
        return push(OpKind::Mul, {a.id_, b.id_}, std::move(out), any_grad({a, b}));
    }

    Var relu(Var a) {
        Tensor out = value(a);
        for (double& x : out.storage()) x = x > 0.0 ? x : 0.0;
        return push(OpKind::Relu, {a.id_}, std::move(out), any_grad({a}));
    }

    Var scale(Var a, double s) {
        Tensor out = value(a);
        for (double& x : out.storage()) x *= s;
        Var v = push(OpKind::Scale, {a.id_}, std::move(out), any_grad({a}));
        nodes_[v.id_].scalar = s;
        return v;
    }

    Var elementwise(ElementwiseOp op, Var a, Var b) {
        switch (op) {
            case ElementwiseOp::Add: return add(a, b);
            case ElementwiseOp::Mul: return mul(a, b);
            default: throw UsageError("elementwise: op needs a different arity");
        }
    }
    Var elementwise(ElementwiseOp op, Var a, double s = 0.0) {
        switch (op) {
            case ElementwiseOp::Relu: return relu(a);
            case ElementwiseOp::Scale: return scale(a, s);
            default: throw UsageError("elementwise: op needs a second tensor operand");
        }
    }

    /// x[b, n] + bias[n] broadcast over rows.
    Var add_bias(Var x, Var bias) {
        const Tensor& X = value(x);
        const Tensor& B = value(bias);
        if (X.rank() != 2 || B.numel() != X.dim(1))
            throw DimensionError("add_bias shape mismatch: " + shape_str(X.shape()) + " + " + shape_str(B.shape()));
        Tensor out = X;
        const std::size_t n = X.dim(1);
        for (std::size_t r = 0; r < X.dim(0); ++r) {
            double* o = out.data().data() + r * n;
            for (std::size_t c = 0; c < n; ++c) o[c] += B[c];
        }
        return push(OpKind::AddBias, {x.id_, bias.id_}, std::move(out), any_grad({x, bias}));
    }

    Var l2_normalize(Var x, double eps = kNormEps) {
        const Tensor& X = value(x);
        if (X.rank() != 2) throw DimensionError("l2_normalize expects [batch,d], got " + shape_str(X.shape()));
        Tensor out = X;
        std::vector<double> norms(X.dim(0));
        for (std::size_t r = 0; r < X.dim(0); ++r) {
            auto row = out.row(r);
            double ss = 0.0;
            for (double v : row) ss += v * v;
            double nrm = std::sqrt(ss);
            if (!(nrm >= eps))
                throw DegenerateError("l2_normalize: row " + std::to_string(r) + " has norm " +
                                      std::to_string(nrm) + " below eps");
            norms[r] = nrm;
            for (double& v : row) v /= nrm;
        }
        Var v = push(OpKind::L2Normalize, {x.id_}, std::move(out), any_grad({x}));
        nodes_[v.id_].saved = std::move(norms);
        return v;
    }

    /// Mean over rows of -log softmax(logits)[target].
    Var log_softmax_nll(Var logits, std::span<const std::size_t> targets) {
        const Tensor& L = value(logits);
        if (L.rank() != 2 || L.dim(1) < 1)
            throw DimensionError("log_softmax_nll expects [batch,c>=1], got " + shape_str(L.shape()));
        if (targets.size() != L.dim(0))
            throw DimensionError("log_softmax_nll: " + std::to_string(targets.size()) + " targets for " +
                                 std::to_string(L.dim(0)) + " rows");
        const std::size_t c = L.dim(1);
        std::vector<double> probs(L.numel());
        double total = 0.0;
        for (std::size_t r = 0; r < L.dim(0); ++r) {
            if (targets[r] >= c)
                throw IndexError("log_softmax_nll: target " + std::to_string(targets[r]) + " out of range for " +
                                 std::to_string(c) + " classes");
            auto row = L.row(r);
            double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                double e = std::exp(row[j] - mx);
                probs[r * c + j] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= sum;
            total += -(row[targets[r]] - mx - std::log(sum));
        }
        total /= static_cast<double>(L.dim(0));
        Var v = push(OpKind::LogSoftmaxNll, {logits.id_}, Tensor::scalar(total), any_grad({logits}));
        nodes_[v.id_].saved = std::move(probs);
        nodes_[v.id_].saved_index.assign(targets.begin(), targets.end());
        return v;
    }

    /// [b, n] -> [b, 1]
    Var row_sum(Var x) {
        const Tensor& X = value(x);
        if (X.rank() != 2) throw DimensionError("row_sum expects rank 2, got " + shape_str(X.shape()));
        Tensor out(Shape{X.dim(0), 1});
        for (std::size_t r = 0; r < X.dim(0); ++r) {
            double s = 0.0;
            for (double v : X.row(r)) s += v;
            out[r] = s;
        }
        return push(OpKind::RowSum, {x.id_}, std::move(out), any_grad({x}));
    }

    /// Row-wise dot product of two [b, n] tensors -> [b, 1].
    Var row_dot(Var a, Var b) { return row_sum(mul(a, b)); }

    Var concat_cols(std::span<const Var> parts) {
        if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
        const std::size_t rows = value(parts[0]).rows();
        std::size_t total = 0;
        std::vector<std::size_t> ids;
        std::vector<Var> vars(parts.begin(), parts.end());
        for (Var p : parts) {
            const Tensor& t = value(p);
            if (t.rank() != 2 || t.rows() != rows)
                throw DimensionError("concat_cols row mismatch: " + shape_str(value(parts[0]).shape()) + " vs " +
                                     shape_str(t.shape()));
            total += t.cols();
            ids.push_back(p.id_);
        }
        Tensor out(Shape{rows, total});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& t = value(p);
            for (std::size_t r = 0; r < rows; ++r)
                std::copy(t.row(r).begin(), t.row(r).end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * total + off));
            off += t.cols();
        }
        return push(OpKind::ConcatCols, std::move(ids), std::move(out), any_grad(vars));
    }

    Var transpose(Var x) {
        const Tensor& X = value(x);
        if (X.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(X.shape()));
        Tensor out(Shape{X.dim(1), X.dim(0)});
        kernels::view(out) = kernels::view(X).transpose();
        return push(OpKind::Transpose, {x.id_}, std::move(out), any_grad({x}));
    }

    /// Reverse pass from a scalar root. Clears gradients from any previous pass.
    void backward(Var root) {
        Node& r = node(root);
        if (r.value.numel() != 1)
            throw DimensionError("backward needs a scalar root, got " + shape_str(r.value.shape()));
        if (!r.requires_grad) throw ContractError("backward on a value that depends on no differentiable leaf");
        for (Node& n : nodes_) n.grad = Tensor();
        r.grad = Tensor(r.value.shape(), 1.0);
        for (std::size_t i = root.id_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            propagate(n);
        }
    }

private:
    struct Node {
        OpKind kind = OpKind::Constant;
        std::vector<std::size_t> inputs;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        double scalar = 0.0;
        std::vector<double> saved;
        std::vector<std::size_t> saved_index;
    };

    Node& node(Var v) {
        check(v);
        return nodes_[v.id_];
    }
    const Node& node(Var v) const {
        check(v);
        return nodes_[v.id_];
    }
    void check(Var v) const {
        if (v.tape_ != this || v.id_ >= nodes_.size()) throw UsageError("Var does not belong to this tape");
    }

    bool any_grad(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (node(v).requires_grad) return true;
        return false;
    }
    bool any_grad(const std::vector<Var>& vs) const {
        for (Var v : vs)
            if (node(v).requires_grad) return true;
        return false;
    }

    void require_same_shape(const char* op, Var a, Var b) const {
        if (value(a).shape() != value(b).shape())
            throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(value(a).shape()) + " vs " +
                                 shape_str(value(b).shape()));
    }

    Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor value, bool requires_grad) {
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    // Returns the gradient buffer of input k, allocating zeros on first touch,
    // or nullptr when that input is detached.
    Tensor* input_grad(Node& n, std::size_t k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) return nullptr;
        if (in.grad.empty()) in.grad = Tensor(in.value.shape(), 0.0);
        return &in.grad;
    }

    void propagate(Node& n) {
        const Tensor& g = n.grad;
        switch (n.kind) {
            case OpKind::Parameter:
            case OpKind::Constant: break;
            case OpKind::MatMul: {
                const Tensor& A = nodes_[n.inputs[0]].value;
                const Tensor& B = nodes_[n.inputs[1]].value;
                if (Tensor* ga = input_grad(n, 0)) kernels::gemm(g, false, B, true, *ga, true);
                if (Tensor* gb = input_grad(n, 1)) kernels::gemm(A, true, g, false, *gb, true);
                break;
            }
            case OpKind::Add: {
                for (std::size_t k = 0; k < 2; ++k)
                    if (Tensor* gi = input_grad(n, k))
                        for (std::size_t i = 0; i < g.numel(); ++i) (*gi)[i] += g[i];
                break;
            }
            case OpKind::Mul: {
                const Tensor& A = nodes_[n.inputs[0]].value;
                const Tensor& B = nodes_[n.inputs[1]].value;
                if (Tensor* ga = input_grad(n, 0))
                    for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * B[i];
                if (Tensor* gb = input_grad(n, 1))
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * A[i];
                break;
            }
            case OpKind::Relu: {
                const Tensor& X = nodes_[n.inputs[0]].value;
                if (Tensor* gx = input_grad(n, 0))
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        if (X[i] > 0.0) (*gx)[i] += g[i];
                break;
            }
            case OpKind::Scale: {
                if (Tensor* gx = input_grad(n, 0))
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * n.scalar;
                break;
            }
            case OpKind::AddBias: {
                if (Tensor* gx = input_grad(n, 0))
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
                if (Tensor* gb = input_grad(n, 1)) {
                    const std::size_t cols = g.cols();
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
                }
                break;
            }
            case OpKind::L2Normalize: {
                // y = x/|x|;  dx = (g - y (g.y)) / |x|
                if (Tensor* gx = input_grad(n, 0)) {
                    const Tensor& Y = n.value;
                    const std::size_t d = Y.cols();
                    for (std::size_t r = 0; r < Y.rows(); ++r) {
                        double gy = 0.0;
                        for (std::size_t c = 0; c < d; ++c) gy += g[r * d + c] * Y[r * d + c];
                        for (std::size_t c = 0; c < d; ++c)
                            (*gx)[r * d + c] += (g[r * d + c] - Y[r * d + c] * gy) / n.saved[r];
                    }
                }
                break;
            }
            case OpKind::LogSoftmaxNll: {
                if (Tensor* gl = input_grad(n, 0)) {
                    const std::size_t rows = gl->rows();
                    const std::size_t c = gl->cols();
                    const double s = g[0] / static_cast<double>(rows);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < c; ++j) {
                            double d = n.saved[r * c + j] - (j == n.saved_index[r] ? 1.0 : 0.0);
                            (*gl)[r * c + j] += s * d;
                        }
                }
                break;
            }
            case OpKind::RowSum: {
                if (Tensor* gx = input_grad(n, 0)) {
                    const std::size_t cols = gx->cols();
                    for (std::size_t r = 0; r < gx->rows(); ++r)
                        for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r];
                }
                break;
            }
            case OpKind::ConcatCols: {
                const std::size_t total = g.cols();
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    const std::size_t w = nodes_[n.inputs[k]].value.cols();
                    if (Tensor* gi = input_grad(n, k))
                        for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < w; ++c) (*gi)[r * w + c] += g[r * total + off + c];
                    off += w;
                }
                break;
            }
            case OpKind::Transpose: {
                if (Tensor* gx = input_grad(n, 0)) kernels::view(*gx) += kernels::view(g).transpose();
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

/// Momentum SGD state: v <- momentum*v + g; p <- p - lr*v.
struct SgdState {
    double lr = 0.1;
    double momentum = 0.9;
    std::vector<Tensor> velocity;
};

inline void sgd_step(std::span<Tensor*> params, std::span<const Tensor> grads, SgdState& state) {
    if (params.size() != grads.size())
        throw DimensionError("sgd_step: " + std::to_string(params.size()) + " params but " +
                             std::to_string(grads.size()) + " grads");
    if (!(state.momentum >= 0.0 && state.momentum < 1.0))
        throw ParameterError("sgd_step: momentum must lie in [0,1)");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape())
            throw DimensionError("sgd_step: param " + shape_str(params[i]->shape()) + " vs grad " +
                                 shape_str(grads[i].shape()));
        for (double g : grads[i].storage())
            if (!std::isfinite(g))
                throw DivergenceError("sgd_step: non-finite gradient in parameter " + std::to_string(i));
    }
    if (state.velocity.empty()) {
        for (Tensor* p : params) state.velocity.emplace_back(p->shape(), 0.0);
    }
    if (state.velocity.size() != params.size())
        throw DimensionError("sgd_step: velocity buffers do not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.velocity[i].shape() != params[i]->shape())
            throw DimensionError("sgd_step: velocity " + shape_str(state.velocity[i].shape()) + " vs param " +
                                 shape_str(params[i]->shape()));
        auto& v = state.velocity[i].storage();
        auto& p = params[i]->storage();
        const auto& g = grads[i].storage();
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = state.momentum * v[j] + g[j];
            p[j] -= state.lr * v[j];
        }
    }
}

}  // namespace looc
