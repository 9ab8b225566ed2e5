#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gfnem/params.hpp"
#include "gfnem/tensor.hpp"

namespace gfnem {

class Tape;

// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    double value() const;
    std::span<const double> values() const;
    const std::vector<int64_t>& shape() const;
    int64_t size() const;
};

// Reverse-mode tape over dense 64-bit tensors. Rebuilt per evaluation;
// confined to one thread. Nodes are evaluated eagerly on construction and
// backward() fills adjoints. Parameter leaves reference a single ParamStore
// read-only; accumulate_param_grads adds their adjoints into the store's
// gradient buffers in leaf-creation order.
class Tape {
public:
    enum class Op : uint8_t {
        Const, Param, Add, Mul, Scale, AddConst, MatMul, MatMulNT, Exp, Log, Tanh, Relu,
        LogSumExp, LogSoftmax, Gather, Concat, StackRows, Sum, Mean, OuterAdd, Reshape,
    };

    Var constant(Tensor t) {
        Node n;
        n.op = Op::Const;
        n.shape = t.shape;
        n.storage = std::move(t.values);
        return finish(std::move(n));
    }
    Var scalar(double v) { return constant(Tensor::scalar(v)); }

    Var param(ParamStore& store, const std::string& name) {
        if (store_ && store_ != &store)
            throw std::runtime_error("tape: parameters from two stores on one tape");
        store_ = &store;
        const ParamBlock& b = store.block(name);
        Node n;
        n.op = Op::Param;
        n.shape = b.value.shape;
        n.external = b.value.values.data();
        n.nvals = b.value.size();
        n.param_block = store.id_of(name);
        return finish(std::move(n));
    }

    // ---- arithmetic -------------------------------------------------------

    // add with limited broadcasting: same shape, scalar either side, or
    // matrix + row vector
    Var add(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        Node n;
        n.op = Op::Add;
        n.a = a.id;
        n.b = b.id;
        if (na.shape == nb.shape) {
            n.shape = na.shape;
            n.storage.resize(static_cast<size_t>(na.nvals));
            for (int64_t i = 0; i < na.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[i] + nb.vals()[i];
        } else if (nb.nvals == 1) {
            n.shape = na.shape;
            n.storage.resize(static_cast<size_t>(na.nvals));
            for (int64_t i = 0; i < na.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[i] + nb.vals()[0];
        } else if (na.nvals == 1) {
            n.shape = nb.shape;
            n.storage.resize(static_cast<size_t>(nb.nvals));
            for (int64_t i = 0; i < nb.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[0] + nb.vals()[i];
        } else if (na.shape.size() == 2 && nb.shape.size() == 1 && na.shape[1] == nb.shape[0]) {
            n.shape = na.shape;
            n.storage.resize(static_cast<size_t>(na.nvals));
            int64_t cols = nb.shape[0];
            for (int64_t i = 0; i < na.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[i] + nb.vals()[i % cols];
        } else {
            throw std::runtime_error("add: shape mismatch " + shape_str(na.shape) + " vs " +
                                     shape_str(nb.shape));
        }
        return finish(std::move(n));
    }

    // elementwise product; same shape or scalar either side
    Var mul(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        Node n;
        n.op = Op::Mul;
        n.a = a.id;
        n.b = b.id;
        if (na.shape == nb.shape) {
            n.shape = na.shape;
            n.storage.resize(static_cast<size_t>(na.nvals));
            for (int64_t i = 0; i < na.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[i] * nb.vals()[i];
        } else if (nb.nvals == 1) {
            n.shape = na.shape;
            n.storage.resize(static_cast<size_t>(na.nvals));
            for (int64_t i = 0; i < na.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[i] * nb.vals()[0];
        } else if (na.nvals == 1) {
            n.shape = nb.shape;
            n.storage.resize(static_cast<size_t>(nb.nvals));
            for (int64_t i = 0; i < nb.nvals; ++i)
                n.storage[static_cast<size_t>(i)] = na.vals()[0] * nb.vals()[i];
        } else {
            throw std::runtime_error("mul: shape mismatch " + shape_str(na.shape) + " vs " +
                                     shape_str(nb.shape));
        }
        return finish(std::move(n));
    }

    Var scale(Var a, double c) {
        const Node& na = node(a);
        Node n;
        n.op = Op::Scale;
        n.a = a.id;
        n.attr = c;
        n.shape = na.shape;
        n.storage.resize(static_cast<size_t>(na.nvals));
        for (int64_t i = 0; i < na.nvals; ++i) n.storage[static_cast<size_t>(i)] = c * na.vals()[i];
        return finish(std::move(n));
    }

    Var add_const(Var a, double c) {
        const Node& na = node(a);
        Node n;
        n.op = Op::AddConst;
        n.a = a.id;
        n.attr = c;
        n.shape = na.shape;
        n.storage.resize(static_cast<size_t>(na.nvals));
        for (int64_t i = 0; i < na.nvals; ++i) n.storage[static_cast<size_t>(i)] = c + na.vals()[i];
        return finish(std::move(n));
    }

    Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
    Var square(Var a) { return mul(a, a); }

    // ---- linear algebra ---------------------------------------------------

    // A[m,k] * B[k,n]; vectors are treated as a single row on the left and a
    // single column on the right is not supported (shape them explicitly)
    Var matmul(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        auto [m, k] = rows_cols(na, "matmul lhs");
        auto [k2, nn] = rows_cols(nb, "matmul rhs");
        if (k != k2)
            throw std::runtime_error("matmul: inner dims " + shape_str(na.shape) + " vs " +
                                     shape_str(nb.shape));
        Node n;
        n.op = Op::MatMul;
        n.a = a.id;
        n.b = b.id;
        n.shape = {m, nn};
        n.storage.assign(static_cast<size_t>(m * nn), 0.0);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
                double av = na.vals()[i * k + p];
                if (av == 0.0) continue;
                const double* brow = nb.vals() + p * nn;
                double* crow = n.storage.data() + i * nn;
                for (int64_t j = 0; j < nn; ++j) crow[j] += av * brow[j];
            }
        return finish(std::move(n));
    }

    // A[m,k] * B[n,k]^T -> [m,n]
    Var matmul_nt(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        auto [m, k] = rows_cols(na, "matmul_nt lhs");
        auto [nn, k2] = rows_cols(nb, "matmul_nt rhs");
        if (k != k2)
            throw std::runtime_error("matmul_nt: inner dims " + shape_str(na.shape) + " vs " +
                                     shape_str(nb.shape));
        Node n;
        n.op = Op::MatMulNT;
        n.a = a.id;
        n.b = b.id;
        n.shape = {m, nn};
        n.storage.assign(static_cast<size_t>(m * nn), 0.0);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j) {
                double acc = 0.0;
                const double* arow = na.vals() + i * k;
                const double* brow = nb.vals() + j * k;
                for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                n.storage[static_cast<size_t>(i * nn + j)] = acc;
            }
        return finish(std::move(n));
    }

    // u[m] (+) v[n] -> [m,n] with entries u_i + v_j
    Var outer_add(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() != 1 || nb.shape.size() != 1)
            throw std::runtime_error("outer_add: expects two vectors");
        int64_t m = na.nvals, nn = nb.nvals;
        Node n;
        n.op = Op::OuterAdd;
        n.a = a.id;
        n.b = b.id;
        n.shape = {m, nn};
        n.storage.resize(static_cast<size_t>(m * nn));
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j)
                n.storage[static_cast<size_t>(i * nn + j)] = na.vals()[i] + nb.vals()[j];
        return finish(std::move(n));
    }

    // ---- elementwise nonlinearities --------------------------------------

    Var exp(Var a) { return unary(a, Op::Exp, [](double x) { return std::exp(x); }); }
    Var log(Var a) {
        const Node& na = node(a);
        for (int64_t i = 0; i < na.nvals; ++i)
            if (!(na.vals()[i] > 0.0))
                throw std::runtime_error("log: non-positive input");
        return unary(a, Op::Log, [](double x) { return std::log(x); });
    }
    Var tanh(Var a) { return unary(a, Op::Tanh, [](double x) { return std::tanh(x); }); }
    Var relu(Var a) { return unary(a, Op::Relu, [](double x) { return x > 0.0 ? x : 0.0; }); }

    // ---- log-domain reductions -------------------------------------------

    // max-shifted log(sum(exp(x))) over all entries -> scalar
    Var logsumexp(Var a) {
        const Node& na = node(a);
        if (na.nvals == 0) throw std::runtime_error("logsumexp: empty input");
        Node n;
        n.op = Op::LogSumExp;
        n.a = a.id;
        n.shape = {};
        n.storage = {lse(na.vals(), na.nvals)};
        return finish(std::move(n));
    }

    // x - logsumexp(row) over the last axis; rank 1 or 2
    Var log_softmax(Var a) {
        const Node& na = node(a);
        if (na.shape.size() > 2) throw std::runtime_error("log_softmax: rank > 2");
        int64_t cols = na.shape.empty() ? 1 : na.shape.back();
        int64_t rows = na.nvals / std::max<int64_t>(cols, 1);
        Node n;
        n.op = Op::LogSoftmax;
        n.a = a.id;
        n.shape = na.shape;
        n.storage.resize(static_cast<size_t>(na.nvals));
        for (int64_t r = 0; r < rows; ++r) {
            double z = lse(na.vals() + r * cols, cols);
            for (int64_t j = 0; j < cols; ++j)
                n.storage[static_cast<size_t>(r * cols + j)] = na.vals()[r * cols + j] - z;
        }
        return finish(std::move(n));
    }

    // ---- structure --------------------------------------------------------

    // flat-index gather -> vector
    Var gather(Var a, std::vector<int64_t> idx) {
        const Node& na = node(a);
        Node n;
        n.op = Op::Gather;
        n.a = a.id;
        n.shape = {static_cast<int64_t>(idx.size())};
        n.storage.resize(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= na.nvals)
                throw std::runtime_error("gather: index out of range");
            n.storage[i] = na.vals()[idx[i]];
        }
        n.idx = std::move(idx);
        return finish(std::move(n));
    }

    Var pick(Var a, int64_t i) { return gather(a, std::vector<int64_t>{i}); }

    // row r of a matrix, as a vector
    Var row(Var a, int64_t r) {
        const Node& na = node(a);
        if (na.shape.size() != 2) throw std::runtime_error("row: expects a matrix");
        int64_t cols = na.shape[1];
        std::vector<int64_t> idx(static_cast<size_t>(cols));
        for (int64_t j = 0; j < cols; ++j) idx[static_cast<size_t>(j)] = r * cols + j;
        return gather(a, std::move(idx));
    }

    // concatenation of vectors (or flattened args) into one vector
    Var concat(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::runtime_error("concat: no arguments");
        Node n;
        n.op = Op::Concat;
        int64_t total = 0;
        for (Var p : parts) {
            n.args.push_back(p.id);
            total += node(p).nvals;
        }
        n.shape = {total};
        n.storage.reserve(static_cast<size_t>(total));
        for (Var p : parts) {
            const Node& np = node(p);
            n.storage.insert(n.storage.end(), np.vals(), np.vals() + np.nvals);
        }
        return finish(std::move(n));
    }

    // stack equal-length vectors as matrix rows
    Var stack_rows(const std::vector<Var>& rows_in) {
        if (rows_in.empty()) throw std::runtime_error("stack_rows: no arguments");
        int64_t cols = node(rows_in[0]).nvals;
        Node n;
        n.op = Op::StackRows;
        n.shape = {static_cast<int64_t>(rows_in.size()), cols};
        n.storage.reserve(static_cast<size_t>(cols) * rows_in.size());
        for (Var r : rows_in) {
            const Node& nr = node(r);
            if (nr.nvals != cols) throw std::runtime_error("stack_rows: ragged rows");
            n.args.push_back(r.id);
            n.storage.insert(n.storage.end(), nr.vals(), nr.vals() + nr.nvals);
        }
        return finish(std::move(n));
    }

    Var sum(Var a) {
        const Node& na = node(a);
        double s = 0.0;
        for (int64_t i = 0; i < na.nvals; ++i) s += na.vals()[i];
        Node n;
        n.op = Op::Sum;
        n.a = a.id;
        n.shape = {};
        n.storage = {s};
        return finish(std::move(n));
    }

    Var mean(Var a) {
        const Node& na = node(a);
        if (na.nvals == 0) throw std::runtime_error("mean: empty input");
        double s = 0.0;
        for (int64_t i = 0; i < na.nvals; ++i) s += na.vals()[i];
        Node n;
        n.op = Op::Mean;
        n.a = a.id;
        n.shape = {};
        n.storage = {s / static_cast<double>(na.nvals)};
        return finish(std::move(n));
    }

    Var reshape(Var a, std::vector<int64_t> shape) {
        const Node& na = node(a);
        if (Tensor::count(shape) != na.nvals)
            throw std::runtime_error("reshape: size mismatch");
        Node n;
        n.op = Op::Reshape;
        n.a = a.id;
        n.shape = std::move(shape);
        n.storage.assign(na.vals(), na.vals() + na.nvals);
        return finish(std::move(n));
    }

    // ---- execution --------------------------------------------------------

    // Backpropagates from a scalar root; adjoints of every reachable node are
    // populated. Returns the root value.
    double backward(Var root) {
        Node& nr = node(root);
        if (nr.nvals != 1) throw std::runtime_error("backward: root is not a scalar");
        for (auto& n : nodes_) n.adj.assign(static_cast<size_t>(n.nvals), 0.0);
        nodes_[static_cast<size_t>(root.id)].adj[0] = 1.0;
        for (int id = root.id; id >= 0; --id) backward_node(nodes_[static_cast<size_t>(id)]);
        return nr.vals()[0];
    }

    // Adds parameter-leaf adjoints into the store's gradient buffers, in
    // leaf-creation order. Call after backward(), from the owning thread.
    void accumulate_param_grads(double weight = 1.0) {
        if (!store_) return;
        for (const Node& n : nodes_) {
            if (n.op != Op::Param || n.adj.empty()) continue;
            Tensor& g = store_->block(n.param_block).grad;
            for (int64_t i = 0; i < n.nvals; ++i)
                g.values[static_cast<size_t>(i)] += weight * n.adj[static_cast<size_t>(i)];
        }
    }

    // Adjoint of a parameter block as accumulated on this tape.
    std::vector<double> param_adjoint(const std::string& name) const {
        if (!store_) throw std::runtime_error("tape: no parameters bound");
        int blk = store_->id_of(name);
        std::vector<double> out(store_->block(blk).value.values.size(), 0.0);
        for (const Node& n : nodes_) {
            if (n.op != Op::Param || n.param_block != blk || n.adj.empty()) continue;
            for (size_t i = 0; i < out.size(); ++i) out[i] += n.adj[i];
        }
        return out;
    }

    size_t num_nodes() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        store_ = nullptr;
    }

    double value_of(Var v) const {
        const Node& n = node(v);
        if (n.nvals != 1) throw std::runtime_error("value_of: not a scalar");
        return n.vals()[0];
    }
    std::span<const double> values_of(Var v) const {
        const Node& n = node(v);
        return {n.vals(), static_cast<size_t>(n.nvals)};
    }
    const std::vector<int64_t>& shape_of(Var v) const { return node(v).shape; }
    std::span<const double> adjoint_of(Var v) const {
        const Node& n = node(v);
        return {n.adj.data(), n.adj.size()};
    }

private:
    struct Node {
        Op op;
        int a = -1, b = -1;
        std::vector<int> args;          // n-ary ops
        std::vector<int64_t> shape;
        std::vector<double> storage;    // owned values (empty for Param)
        const double* external = nullptr;
        int64_t nvals = 0;
        double attr = 0.0;              // Scale/AddConst constant
        std::vector<int64_t> idx;       // Gather indices
        int param_block = -1;
        std::vector<double> adj;

        const double* vals() const { return external ? external : storage.data(); }
    };

    Var finish(Node&& n) {
        if (!n.external) n.nvals = static_cast<int64_t>(n.storage.size());
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }

    template <class F>
    Var unary(Var a, Op op, F&& f) {
        const Node& na = node(a);
        Node n;
        n.op = op;
        n.a = a.id;
        n.shape = na.shape;
        n.storage.resize(static_cast<size_t>(na.nvals));
        for (int64_t i = 0; i < na.nvals; ++i) n.storage[static_cast<size_t>(i)] = f(na.vals()[i]);
        return finish(std::move(n));
    }

    static std::pair<int64_t, int64_t> rows_cols(const Node& n, const char* what) {
        if (n.shape.size() == 2) return {n.shape[0], n.shape[1]};
        if (n.shape.size() == 1) return {1, n.shape[0]};
        throw std::runtime_error(std::string(what) + ": expects rank 1 or 2");
    }

    static double lse(const double* x, int64_t n) {
        double m = -std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < n; ++i) m = std::max(m, x[i]);
        if (!std::isfinite(m)) return m;  // all -inf (or empty) stays -inf
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
        return m + std::log(s);
    }

    void backward_node(Node& n) {
        bool any = false;
        for (double a : n.adj)
            if (a != 0.0) { any = true; break; }
        if (!any) return;
        switch (n.op) {
            case Op::Const:
            case Op::Param:
                break;
            case Op::Add: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                Node& nb = nodes_[static_cast<size_t>(n.b)];
                spread_add(na, n);
                spread_add(nb, n);
                break;
            }
            case Op::Mul: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                Node& nb = nodes_[static_cast<size_t>(n.b)];
                // d(a*b) = b*dc into a, a*dc into b, honoring broadcasts
                mul_back(na, nb, n);
                mul_back(nb, na, n);
                break;
            }
            case Op::Scale: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] += n.attr * n.adj[static_cast<size_t>(i)];
                break;
            }
            case Op::AddConst: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] += n.adj[static_cast<size_t>(i)];
                break;
            }
            case Op::MatMul: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                Node& nb = nodes_[static_cast<size_t>(n.b)];
                int64_t m = n.shape[0], nn = n.shape[1];
                int64_t k = na.nvals / m;
                // dA += dC * B^T ; dB += A^T * dC
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < nn; ++j)
                            acc += n.adj[static_cast<size_t>(i * nn + j)] * nb.vals()[p * nn + j];
                        na.adj[static_cast<size_t>(i * k + p)] += acc;
                    }
                for (int64_t p = 0; p < k; ++p)
                    for (int64_t j = 0; j < nn; ++j) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < m; ++i)
                            acc += na.vals()[i * k + p] * n.adj[static_cast<size_t>(i * nn + j)];
                        nb.adj[static_cast<size_t>(p * nn + j)] += acc;
                    }
                break;
            }
            case Op::MatMulNT: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                Node& nb = nodes_[static_cast<size_t>(n.b)];
                int64_t m = n.shape[0], nn = n.shape[1];
                int64_t k = na.nvals / m;
                // C = A B^T: dA += dC * B ; dB += dC^T * A
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < nn; ++j)
                            acc += n.adj[static_cast<size_t>(i * nn + j)] * nb.vals()[j * k + p];
                        na.adj[static_cast<size_t>(i * k + p)] += acc;
                    }
                for (int64_t j = 0; j < nn; ++j)
                    for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < m; ++i)
                            acc += n.adj[static_cast<size_t>(i * nn + j)] * na.vals()[i * k + p];
                        nb.adj[static_cast<size_t>(j * k + p)] += acc;
                    }
                break;
            }
            case Op::OuterAdd: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                Node& nb = nodes_[static_cast<size_t>(n.b)];
                int64_t m = n.shape[0], nn = n.shape[1];
                for (int64_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < nn; ++j) acc += n.adj[static_cast<size_t>(i * nn + j)];
                    na.adj[static_cast<size_t>(i)] += acc;
                }
                for (int64_t j = 0; j < nn; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < m; ++i) acc += n.adj[static_cast<size_t>(i * nn + j)];
                    nb.adj[static_cast<size_t>(j)] += acc;
                }
                break;
            }
            case Op::Exp: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] +=
                        n.vals()[i] * n.adj[static_cast<size_t>(i)];
                break;
            }
            case Op::Log: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] +=
                        n.adj[static_cast<size_t>(i)] / na.vals()[i];
                break;
            }
            case Op::Tanh: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i) {
                    double y = n.vals()[i];
                    na.adj[static_cast<size_t>(i)] += (1.0 - y * y) * n.adj[static_cast<size_t>(i)];
                }
                break;
            }
            case Op::Relu: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    if (na.vals()[i] > 0.0)
                        na.adj[static_cast<size_t>(i)] += n.adj[static_cast<size_t>(i)];
                break;
            }
            case Op::LogSumExp: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                double z = n.vals()[0];
                if (!std::isfinite(z)) break;  // all -inf: zero gradient
                double d = n.adj[0];
                for (int64_t i = 0; i < na.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] += d * std::exp(na.vals()[i] - z);
                break;
            }
            case Op::LogSoftmax: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                int64_t cols = n.shape.empty() ? 1 : n.shape.back();
                int64_t rows = n.nvals / std::max<int64_t>(cols, 1);
                for (int64_t r = 0; r < rows; ++r) {
                    double dsum = 0.0;
                    for (int64_t j = 0; j < cols; ++j)
                        dsum += n.adj[static_cast<size_t>(r * cols + j)];
                    for (int64_t j = 0; j < cols; ++j) {
                        double sm = std::exp(n.vals()[r * cols + j]);
                        na.adj[static_cast<size_t>(r * cols + j)] +=
                            n.adj[static_cast<size_t>(r * cols + j)] - sm * dsum;
                    }
                }
                break;
            }
            case Op::Gather: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (size_t i = 0; i < n.idx.size(); ++i)
                    na.adj[static_cast<size_t>(n.idx[i])] += n.adj[i];
                break;
            }
            case Op::Concat: {
                int64_t off = 0;
                for (int arg : n.args) {
                    Node& na = nodes_[static_cast<size_t>(arg)];
                    for (int64_t i = 0; i < na.nvals; ++i)
                        na.adj[static_cast<size_t>(i)] += n.adj[static_cast<size_t>(off + i)];
                    off += na.nvals;
                }
                break;
            }
            case Op::StackRows: {
                int64_t cols = n.shape[1];
                for (size_t r = 0; r < n.args.size(); ++r) {
                    Node& na = nodes_[static_cast<size_t>(n.args[r])];
                    for (int64_t j = 0; j < cols; ++j)
                        na.adj[static_cast<size_t>(j)] +=
                            n.adj[r * static_cast<size_t>(cols) + static_cast<size_t>(j)];
                }
                break;
            }
            case Op::Sum: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                double d = n.adj[0];
                for (int64_t i = 0; i < na.nvals; ++i) na.adj[static_cast<size_t>(i)] += d;
                break;
            }
            case Op::Mean: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                double d = n.adj[0] / static_cast<double>(na.nvals);
                for (int64_t i = 0; i < na.nvals; ++i) na.adj[static_cast<size_t>(i)] += d;
                break;
            }
            case Op::Reshape: {
                Node& na = nodes_[static_cast<size_t>(n.a)];
                for (int64_t i = 0; i < n.nvals; ++i)
                    na.adj[static_cast<size_t>(i)] += n.adj[static_cast<size_t>(i)];
                break;
            }
        }
    }

    static void spread_add(Node& arg, const Node& out) {
        if (arg.nvals == out.nvals && arg.shape == out.shape) {
            for (int64_t i = 0; i < out.nvals; ++i)
                arg.adj[static_cast<size_t>(i)] += out.adj[static_cast<size_t>(i)];
        } else if (arg.nvals == 1) {
            double acc = 0.0;
            for (int64_t i = 0; i < out.nvals; ++i) acc += out.adj[static_cast<size_t>(i)];
            arg.adj[0] += acc;
        } else {
            // row-vector broadcast over matrix rows
            int64_t cols = arg.nvals;
            for (int64_t i = 0; i < out.nvals; ++i)
                arg.adj[static_cast<size_t>(i % cols)] += out.adj[static_cast<size_t>(i)];
        }
    }

    // adjoint contribution into `arg` for Mul, where `other` is the co-factor
    void mul_back(Node& arg, const Node& other, const Node& out) {
        if (arg.nvals == out.nvals) {
            if (other.nvals == 1) {
                for (int64_t i = 0; i < out.nvals; ++i)
                    arg.adj[static_cast<size_t>(i)] +=
                        other.vals()[0] * out.adj[static_cast<size_t>(i)];
            } else {
                for (int64_t i = 0; i < out.nvals; ++i)
                    arg.adj[static_cast<size_t>(i)] +=
                        other.vals()[i] * out.adj[static_cast<size_t>(i)];
            }
        } else {
            // arg is the scalar side
            double acc = 0.0;
            for (int64_t i = 0; i < out.nvals; ++i)
                acc += other.vals()[i] * out.adj[static_cast<size_t>(i)];
            arg.adj[0] += acc;
        }
    }

    std::vector<Node> nodes_;
    ParamStore* store_ = nullptr;
};

inline double Var::value() const { return tape->value_of(*this); }
inline std::span<const double> Var::values() const { return tape->values_of(*this); }
inline const std::vector<int64_t>& Var::shape() const { return tape->shape_of(*this); }
inline int64_t Var::size() const { return static_cast<int64_t>(values().size()); }

}  // namespace gfnem
