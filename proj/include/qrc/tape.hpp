#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "qrc/tensor.hpp"

namespace qrc {

enum class Activation { Relu, Sigmoid, Tanh, Softmax };

enum class BnMode { Train, Eval };

// Reverse-mode autodiff over an append-only op tape.
//
// Node ids are indices into the tape; insertion order is a topological
// order, so backward() is a single reverse sweep. Values are immutable
// once recorded. A tape belongs to exactly one training step.
template <typename T>
class Tape {
public:
    enum class Op {
        Leaf,
        Add,
        AddN,
        Sub,
        Mul,
        Scale,
        AddConst,
        MatMul,
        AddRow,
        Relu,
        Sigmoid,
        Tanh,
        SoftmaxRows,
        LogSoftmaxRows,
        SmoothL1,
        Sum,
        ConcatCols,
        VStack,
        RepeatRow,
        SliceRows,
        SliceCols,
        GatherRows,
        PickSum,
        BatchNorm,
        Reshape,
    };

    struct Node {
        Op op;
        std::vector<int> inputs;
        Tensor<T> value;
        bool needs_grad = false;
        double c = 0.0;        // Scale factor / AddConst constant
        int i0 = 0, i1 = 0;    // slice bounds, repeat count, bn mode
        std::vector<int> idx;  // gather rows / flattened pick positions
        Tensor<T> saved;       // BatchNorm: xhat
        Tensor<T> saved2;      // BatchNorm: invstd (1xC)
    };

    int size() const { return static_cast<int>(nodes_.size()); }
    const Tensor<T>& value(int id) const { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    const Node& node(int id) const { return nodes_[id]; }

    int leaf(Tensor<T> v, bool needs_grad = false) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    int constant(Tensor<T> v) { return leaf(std::move(v), false); }

    // Value copy with the gradient edge cut.
    int detach(int x) { return leaf(nodes_[x].value, false); }

    int add(int a, int b) {
        check_same(a, b, "add");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value.data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
        return push_op(Op::Add, {a, b}, std::move(out));
    }

    int add_n(const std::vector<int>& xs) {
        if (xs.empty()) throw ContractError("add_n of nothing");
        Tensor<T> out = nodes_[xs[0]].value;
        for (std::size_t j = 1; j < xs.size(); ++j) {
            check_same(xs[0], xs[j], "add_n");
            const auto& v = nodes_[xs[j]].value.data;
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += v[i];
        }
        return push_op(Op::AddN, xs, std::move(out));
    }

    int sub(int a, int b) {
        check_same(a, b, "sub");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value.data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
        return push_op(Op::Sub, {a, b}, std::move(out));
    }

    int mul(int a, int b) {
        check_same(a, b, "mul");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value.data;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
        return push_op(Op::Mul, {a, b}, std::move(out));
    }

    int scale(int x, double c) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = static_cast<T>(v * c);
        Node n = make_op(Op::Scale, {x}, std::move(out));
        n.c = c;
        return push(std::move(n));
    }

    int add_const(int x, double c) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = static_cast<T>(v + c);
        Node n = make_op(Op::AddConst, {x}, std::move(out));
        n.c = c;
        return push(std::move(n));
    }

    int matmul(int a, int b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.cols() != bv.rows()) throw DimensionError("matmul shape mismatch");
        Tensor<T> out = Tensor<T>::zeros({av.rows(), bv.cols()});
        gemm(av, false, bv, false, out);
        return push_op(Op::MatMul, {a, b}, std::move(out));
    }

    // X (RxC) + broadcast row b (1xC).
    int add_row(int x, int b) {
        const auto& xv = nodes_[x].value;
        const auto& bv = nodes_[b].value;
        if (bv.rows() != 1 || bv.cols() != xv.cols()) throw DimensionError("add_row shape mismatch");
        Tensor<T> out = xv;
        for (int r = 0; r < xv.rows(); ++r)
            for (int c = 0; c < xv.cols(); ++c) out.at(r, c) += bv.at(0, c);
        return push_op(Op::AddRow, {x, b}, std::move(out));
    }

    // y = xW + b. x: Rxn, W: nxk, b: 1xk.
    int linear(int x, int w, int b) { return add_row(matmul(x, w), b); }

    int relu(int x) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return push_op(Op::Relu, {x}, std::move(out));
    }

    int sigmoid(int x) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        return push_op(Op::Sigmoid, {x}, std::move(out));
    }

    int tanh_(int x) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = std::tanh(v);
        return push_op(Op::Tanh, {x}, std::move(out));
    }

    // Row-wise softmax (the last axis of a 2-D tensor).
    int softmax_rows(int x) {
        Tensor<T> out = nodes_[x].value;
        softmax_inplace(out, false);
        return push_op(Op::SoftmaxRows, {x}, std::move(out));
    }

    int log_softmax_rows(int x) {
        Tensor<T> out = nodes_[x].value;
        softmax_inplace(out, true);
        return push_op(Op::LogSoftmaxRows, {x}, std::move(out));
    }

    int activate(Activation kind, int x) {
        switch (kind) {
            case Activation::Relu: return relu(x);
            case Activation::Sigmoid: return sigmoid(x);
            case Activation::Tanh: return tanh_(x);
            case Activation::Softmax: return softmax_rows(x);
        }
        throw ContractError("unknown activation");
    }

    // f(x) = 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Even in x, so it can
    // be applied to raw differences without taking |.| first.
    int smooth_l1(int x) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) {
            T a = std::abs(v);
            v = a < T(1) ? T(0.5) * v * v : a - T(0.5);
        }
        return push_op(Op::SmoothL1, {x}, std::move(out));
    }

    int sum(int x) {
        T acc = 0;
        for (T v : nodes_[x].value.data) acc += v;
        return push_op(Op::Sum, {x}, Tensor<T>::scalar(acc));
    }

    int mean(int x) {
        double n = static_cast<double>(nodes_[x].value.numel());
        return scale(sum(x), 1.0 / n);
    }

    int concat_cols(int a, int b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.rows() != bv.rows()) throw DimensionError("concat_cols row mismatch");
        Tensor<T> out = Tensor<T>::zeros({av.rows(), av.cols() + bv.cols()});
        for (int r = 0; r < av.rows(); ++r) {
            for (int c = 0; c < av.cols(); ++c) out.at(r, c) = av.at(r, c);
            for (int c = 0; c < bv.cols(); ++c) out.at(r, av.cols() + c) = bv.at(r, c);
        }
        return push_op(Op::ConcatCols, {a, b}, std::move(out));
    }

    int vstack(const std::vector<int>& xs) {
        if (xs.empty()) throw ContractError("vstack of nothing");
        int cols = nodes_[xs[0]].value.cols();
        int rows = 0;
        for (int id : xs) {
            if (nodes_[id].value.cols() != cols) throw DimensionError("vstack column mismatch");
            rows += nodes_[id].value.rows();
        }
        Tensor<T> out = Tensor<T>::zeros({rows, cols});
        int r = 0;
        for (int id : xs) {
            const auto& v = nodes_[id].value;
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r) * cols);
            r += v.rows();
        }
        return push_op(Op::VStack, xs, std::move(out));
    }

    int repeat_row(int x, int times) {
        const auto& xv = nodes_[x].value;
        if (xv.rows() != 1) throw DimensionError("repeat_row wants a 1xC input");
        Tensor<T> out = Tensor<T>::zeros({times, xv.cols()});
        for (int r = 0; r < times; ++r)
            std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r) * xv.cols());
        Node n = make_op(Op::RepeatRow, {x}, std::move(out));
        n.i0 = times;
        return push(std::move(n));
    }

    int slice_rows(int x, int r0, int r1) {
        const auto& xv = nodes_[x].value;
        if (r0 < 0 || r1 > xv.rows() || r0 >= r1) throw DimensionError("slice_rows out of range");
        Tensor<T> out = Tensor<T>::zeros({r1 - r0, xv.cols()});
        std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(r0) * xv.cols(),
                  xv.data.begin() + static_cast<std::ptrdiff_t>(r1) * xv.cols(), out.data.begin());
        Node n = make_op(Op::SliceRows, {x}, std::move(out));
        n.i0 = r0;
        n.i1 = r1;
        return push(std::move(n));
    }

    int slice_cols(int x, int c0, int c1) {
        const auto& xv = nodes_[x].value;
        if (c0 < 0 || c1 > xv.cols() || c0 >= c1) throw DimensionError("slice_cols out of range");
        Tensor<T> out = Tensor<T>::zeros({xv.rows(), c1 - c0});
        for (int r = 0; r < xv.rows(); ++r)
            for (int c = c0; c < c1; ++c) out.at(r, c - c0) = xv.at(r, c);
        Node n = make_op(Op::SliceCols, {x}, std::move(out));
        n.i0 = c0;
        n.i1 = c1;
        return push(std::move(n));
    }

    int gather_rows(int x, std::vector<int> rows) {
        const auto& xv = nodes_[x].value;
        Tensor<T> out = Tensor<T>::zeros({static_cast<int>(rows.size()), xv.cols()});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] < 0 || rows[i] >= xv.rows()) throw DimensionError("gather_rows out of range");
            for (int c = 0; c < xv.cols(); ++c) out.at(static_cast<int>(i), c) = xv.at(rows[i], c);
        }
        Node n = make_op(Op::GatherRows, {x}, std::move(out));
        n.idx = std::move(rows);
        return push(std::move(n));
    }

    // Scalar sum of selected entries; an entry picked twice contributes twice.
    int pick_sum(int x, const std::vector<std::pair<int, int>>& positions) {
        const auto& xv = nodes_[x].value;
        T acc = 0;
        std::vector<int> flat;
        flat.reserve(positions.size());
        for (auto [r, c] : positions) {
            if (r < 0 || r >= xv.rows() || c < 0 || c >= xv.cols())
                throw DimensionError("pick_sum out of range");
            acc += xv.at(r, c);
            flat.push_back(r * xv.cols() + c);
        }
        Node n = make_op(Op::PickSum, {x}, Tensor<T>::scalar(acc));
        n.idx = std::move(flat);
        return push(std::move(n));
    }

    // Per-feature standardization. Train mode uses batch statistics and
    // reports them via batch_mean/batch_var for the caller's running-stat
    // update; eval mode standardizes with the supplied running statistics.
    int batch_norm(int x, int gamma, int beta, BnMode mode, const Tensor<T>& running_mean,
                   const Tensor<T>& running_var, double eps, Tensor<T>* batch_mean = nullptr,
                   Tensor<T>* batch_var = nullptr) {
        const auto& xv = nodes_[x].value;
        int R = xv.rows(), C = xv.cols();
        if (mode == BnMode::Train && R < 2)
            throw DegenerateBatchError("batch standardization needs at least 2 rows in train mode");
        const auto& g = nodes_[gamma].value;
        const auto& b = nodes_[beta].value;
        if (g.cols() != C || b.cols() != C) throw DimensionError("batch_norm parameter width mismatch");

        Tensor<T> mean = Tensor<T>::zeros({1, C});
        Tensor<T> var = Tensor<T>::zeros({1, C});
        if (mode == BnMode::Train) {
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) mean.at(0, c) += xv.at(r, c);
            for (int c = 0; c < C; ++c) mean.at(0, c) /= T(R);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) {
                    T d = xv.at(r, c) - mean.at(0, c);
                    var.at(0, c) += d * d;
                }
            for (int c = 0; c < C; ++c) var.at(0, c) /= T(R);
        } else {
            mean = running_mean;
            var = running_var;
        }

        Tensor<T> invstd = Tensor<T>::zeros({1, C});
        for (int c = 0; c < C; ++c) invstd.at(0, c) = T(1) / std::sqrt(var.at(0, c) + T(eps));

        Tensor<T> xhat = Tensor<T>::zeros({R, C});
        Tensor<T> out = Tensor<T>::zeros({R, C});
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
                xhat.at(r, c) = (xv.at(r, c) - mean.at(0, c)) * invstd.at(0, c);
                out.at(r, c) = g.at(0, c) * xhat.at(r, c) + b.at(0, c);
            }

        if (batch_mean) *batch_mean = mean;
        if (batch_var) *batch_var = var;

        Node n = make_op(Op::BatchNorm, {x, gamma, beta}, std::move(out));
        n.i0 = mode == BnMode::Train ? 0 : 1;
        n.saved = std::move(xhat);
        n.saved2 = std::move(invstd);
        return push(std::move(n));
    }

    int reshape(int x, std::vector<int> shape) {
        const auto& xv = nodes_[x].value;
        if (Tensor<T>::numel_of(shape) != static_cast<std::ptrdiff_t>(xv.numel()))
            throw DimensionError("reshape element count mismatch");
        Tensor<T> out(std::move(shape), xv.data);
        return push_op(Op::Reshape, {x}, std::move(out));
    }

    // Reverse sweep from a scalar loss. Returns one gradient tensor per
    // node id (empty where no gradient was needed). Each node is visited
    // exactly once.
    std::vector<Tensor<T>> backward(int loss_id) const {
        if (nodes_[loss_id].value.numel() != 1)
            throw ContractError("backward wants a scalar loss");
        std::vector<Tensor<T>> grads(nodes_.size());
        if (!nodes_[loss_id].needs_grad) return grads;
        grads[loss_id] = Tensor<T>::scalar(T(1));
        for (int id = loss_id; id >= 0; --id) {
            const Node& n = nodes_[id];
            if (!n.needs_grad || grads[id].numel() == 0) continue;
            backward_node(id, n, grads);
        }
        return grads;
    }

private:
    std::vector<Node> nodes_;

    int push(Node n) {
#ifdef QRC_CHECK_FINITE
        if (!n.value.all_finite()) throw NumericError("non-finite value on tape");
#endif
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node make_op(Op op, std::vector<int> inputs, Tensor<T> value) {
        Node n;
        n.op = op;
        n.needs_grad = false;
        for (int i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        return n;
    }

    int push_op(Op op, std::vector<int> inputs, Tensor<T> value) {
        return push(make_op(op, std::move(inputs), std::move(value)));
    }

    void check_same(int a, int b, const char* what) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw DimensionError(std::string(what) + " shape mismatch " + nodes_[a].value.shape_str() +
                                 " vs " + nodes_[b].value.shape_str());
    }

    static void softmax_inplace(Tensor<T>& x, bool log_form) {
        int R = x.rows(), C = x.cols();
        for (int r = 0; r < R; ++r) {
            T mx = x.at(r, 0);
            for (int c = 1; c < C; ++c) mx = std::max(mx, x.at(r, c));
            T z = 0;
            for (int c = 0; c < C; ++c) z += std::exp(x.at(r, c) - mx);
            T logz = std::log(z) + mx;
            for (int c = 0; c < C; ++c)
                x.at(r, c) = log_form ? x.at(r, c) - logz : std::exp(x.at(r, c) - logz);
        }
    }

    void accumulate(std::vector<Tensor<T>>& grads, int id, const Tensor<T>& g) const {
        if (!nodes_[id].needs_grad) return;
        if (grads[id].numel() == 0) {
            grads[id] = g;
            return;
        }
        for (std::size_t i = 0; i < g.data.size(); ++i) grads[id].data[i] += g.data[i];
    }

    Tensor<T>& grad_slot(std::vector<Tensor<T>>& grads, int id) const {
        if (grads[id].numel() == 0) grads[id] = Tensor<T>::zeros(nodes_[id].value.shape);
        return grads[id];
    }

    void backward_node(int id, const Node& n, std::vector<Tensor<T>>& grads) const {
        const Tensor<T>& g = grads[id];
        switch (n.op) {
            case Op::Leaf:
                return;
            case Op::Add:
                accumulate(grads, n.inputs[0], g);
                accumulate(grads, n.inputs[1], g);
                return;
            case Op::AddN:
                for (int in : n.inputs) accumulate(grads, in, g);
                return;
            case Op::Sub: {
                accumulate(grads, n.inputs[0], g);
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor<T>& gb = grad_slot(grads, n.inputs[1]);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
                }
                return;
            }
            case Op::Mul: {
                const auto& av = nodes_[n.inputs[0]].value;
                const auto& bv = nodes_[n.inputs[1]].value;
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor<T>& ga = grad_slot(grads, n.inputs[0]);
                    for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor<T>& gb = grad_slot(grads, n.inputs[1]);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
                }
                return;
            }
            case Op::Scale: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    gx.data[i] += static_cast<T>(g.data[i] * n.c);
                return;
            }
            case Op::AddConst:
                accumulate(grads, n.inputs[0], g);
                return;
            case Op::MatMul: {
                const auto& av = nodes_[n.inputs[0]].value;
                const auto& bv = nodes_[n.inputs[1]].value;
                if (nodes_[n.inputs[0]].needs_grad)
                    gemm(g, false, bv, true, grad_slot(grads, n.inputs[0]), true);
                if (nodes_[n.inputs[1]].needs_grad)
                    gemm(av, true, g, false, grad_slot(grads, n.inputs[1]), true);
                return;
            }
            case Op::AddRow: {
                accumulate(grads, n.inputs[0], g);
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor<T>& gb = grad_slot(grads, n.inputs[1]);
                    for (int r = 0; r < g.rows(); ++r)
                        for (int c = 0; c < g.cols(); ++c) gb.at(0, c) += g.at(r, c);
                }
                return;
            }
            case Op::Relu: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    if (n.value.data[i] > T(0)) gx.data[i] += g.data[i];
                return;
            }
            case Op::Sigmoid: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    T y = n.value.data[i];
                    gx.data[i] += g.data[i] * y * (T(1) - y);
                }
                return;
            }
            case Op::Tanh: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    T y = n.value.data[i];
                    gx.data[i] += g.data[i] * (T(1) - y * y);
                }
                return;
            }
            case Op::SoftmaxRows: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                int C = n.value.cols();
                for (int r = 0; r < n.value.rows(); ++r) {
                    T dot = 0;
                    for (int c = 0; c < C; ++c) dot += g.at(r, c) * n.value.at(r, c);
                    for (int c = 0; c < C; ++c)
                        gx.at(r, c) += n.value.at(r, c) * (g.at(r, c) - dot);
                }
                return;
            }
            case Op::LogSoftmaxRows: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                int C = n.value.cols();
                for (int r = 0; r < n.value.rows(); ++r) {
                    T gsum = 0;
                    for (int c = 0; c < C; ++c) gsum += g.at(r, c);
                    for (int c = 0; c < C; ++c)
                        gx.at(r, c) += g.at(r, c) - std::exp(n.value.at(r, c)) * gsum;
                }
                return;
            }
            case Op::SmoothL1: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                const auto& xv = nodes_[n.inputs[0]].value;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    T x = xv.data[i];
                    T d = std::abs(x) < T(1) ? x : (x > T(0) ? T(1) : T(-1));
                    gx.data[i] += g.data[i] * d;
                }
                return;
            }
            case Op::Sum: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                T gv = g.data[0];
                for (auto& v : gx.data) v += gv;
                return;
            }
            case Op::ConcatCols: {
                const auto& av = nodes_[n.inputs[0]].value;
                const auto& bv = nodes_[n.inputs[1]].value;
                if (nodes_[n.inputs[0]].needs_grad) {
                    Tensor<T>& ga = grad_slot(grads, n.inputs[0]);
                    for (int r = 0; r < av.rows(); ++r)
                        for (int c = 0; c < av.cols(); ++c) ga.at(r, c) += g.at(r, c);
                }
                if (nodes_[n.inputs[1]].needs_grad) {
                    Tensor<T>& gb = grad_slot(grads, n.inputs[1]);
                    for (int r = 0; r < bv.rows(); ++r)
                        for (int c = 0; c < bv.cols(); ++c) gb.at(r, c) += g.at(r, av.cols() + c);
                }
                return;
            }
            case Op::VStack: {
                int r = 0;
                int C = n.value.cols();
                for (int in : n.inputs) {
                    int rows = nodes_[in].value.rows();
                    if (nodes_[in].needs_grad) {
                        Tensor<T>& gi = grad_slot(grads, in);
                        for (int rr = 0; rr < rows; ++rr)
                            for (int c = 0; c < C; ++c) gi.at(rr, c) += g.at(r + rr, c);
                    }
                    r += rows;
                }
                return;
            }
            case Op::RepeatRow: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) gx.at(0, c) += g.at(r, c);
                return;
            }
            case Op::SliceRows: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) gx.at(n.i0 + r, c) += g.at(r, c);
                return;
            }
            case Op::SliceCols: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (int r = 0; r < g.rows(); ++r)
                    for (int c = 0; c < g.cols(); ++c) gx.at(r, n.i0 + c) += g.at(r, c);
                return;
            }
            case Op::GatherRows: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < n.idx.size(); ++i)
                    for (int c = 0; c < g.cols(); ++c)
                        gx.at(n.idx[i], c) += g.at(static_cast<int>(i), c);
                return;
            }
            case Op::PickSum: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                T gv = g.data[0];
                for (int flat : n.idx) gx.data[flat] += gv;
                return;
            }
            case Op::BatchNorm: {
                backward_batch_norm(n, g, grads);
                return;
            }
            case Op::Reshape: {
                if (!nodes_[n.inputs[0]].needs_grad) return;
                Tensor<T>& gx = grad_slot(grads, n.inputs[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
                return;
            }
        }
    }

    void backward_batch_norm(const Node& n, const Tensor<T>& g, std::vector<Tensor<T>>& grads) const {
        int R = g.rows(), C = g.cols();
        const Tensor<T>& xhat = n.saved;
        const Tensor<T>& invstd = n.saved2;
        const auto& gamma = nodes_[n.inputs[1]].value;

        if (nodes_[n.inputs[1]].needs_grad) {
            Tensor<T>& gg = grad_slot(grads, n.inputs[1]);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) gg.at(0, c) += g.at(r, c) * xhat.at(r, c);
        }
        if (nodes_[n.inputs[2]].needs_grad) {
            Tensor<T>& gb = grad_slot(grads, n.inputs[2]);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) gb.at(0, c) += g.at(r, c);
        }
        if (!nodes_[n.inputs[0]].needs_grad) return;
        Tensor<T>& gx = grad_slot(grads, n.inputs[0]);

        if (n.i0 == 1) { // eval mode: affine transform with fixed statistics
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    gx.at(r, c) += g.at(r, c) * gamma.at(0, c) * invstd.at(0, c);
            return;
        }
        // train mode: statistics depend on x
        for (int c = 0; c < C; ++c) {
            T sum_d = 0, sum_dx = 0;
            for (int r = 0; r < R; ++r) {
                T d = g.at(r, c) * gamma.at(0, c);
                sum_d += d;
                sum_dx += d * xhat.at(r, c);
            }
            for (int r = 0; r < R; ++r) {
                T d = g.at(r, c) * gamma.at(0, c);
                gx.at(r, c) +=
                    invstd.at(0, c) * (d - sum_d / T(R) - xhat.at(r, c) * sum_dx / T(R));
            }
        }
    }
};

} // namespace qrc
