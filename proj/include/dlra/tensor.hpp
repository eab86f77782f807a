#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/rng.hpp"

namespace dlra {

namespace detail {

template <typename T>
struct Node {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // persistent, lazily allocated, survives across passes
    std::vector<T> adj;   // scratch adjoint for the current backward pass
    std::uint64_t adj_epoch = 0;
    bool requires_grad = false;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

}  // namespace detail

// Dense row-major tensor handle. Copies share the underlying node; values are
// immutable once an op has consumed them, grad buffers are the only mutable
// state after creation.
template <typename T>
class Tensor {
public:
    using Node = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape) {
        return filled(std::move(shape), T(0));
    }

    static Tensor filled(std::vector<std::size_t> shape, T v) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(count(t.node_->shape), v);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<T> data) {
        if (count(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + detail::shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.node_->value) v = static_cast<T>(rng.normal(static_cast<double>(mean), static_cast<double>(stddev)));
        return t;
    }

    bool defined() const { return node_ != nullptr; }

    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape.at(1) : std::size_t(1); }

    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }

    T& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }
    T at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

    T item() const {
        if (size() != 1) throw ShapeError("item() requires a scalar tensor, got " + detail::shape_str(shape()));
        return node_->value[0];
    }

    bool has_grad() const { return !node_->grad.empty(); }

    std::vector<T>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        const_cast<Tensor*>(this)->grad();
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Deep value copy; grad and graph links are not carried over.
    Tensor clone_detached() const {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops, one per thread and scalar type.
// Built define-by-run during the forward pass, replayed in reverse by
// backward(). Adjoints are scratch state keyed by a pass epoch so repeated
// backward calls accumulate into grad without double counting shared subgraphs.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
public:
    struct Pass {
        std::uint64_t epoch;
        std::vector<std::shared_ptr<detail::Node<T>>> touched;
    };
    using PullFn = std::function<void(Pass&)>;

    struct Entry {
        std::shared_ptr<detail::Node<T>> out;
        PullFn pull;
    };

    static Tape& instance() {
        thread_local Tape tape;
        return tape;
    }

    bool enabled() const { return enabled_; }
    void set_enabled(bool b) { enabled_ = b; }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    void record(std::shared_ptr<detail::Node<T>> out, PullFn pull) {
        entries_.push_back(Entry{std::move(out), std::move(pull)});
    }

    void run_backward(const Tensor<T>& loss) {
        if (loss.size() != 1) {
            throw ShapeError("backward requires a scalar loss, got " + detail::shape_str(loss.shape()));
        }
        Pass pass{++epoch_, {}};
        auto seed = loss.node();
        seed->adj.assign(1, T(1));
        seed->adj_epoch = pass.epoch;
        pass.touched.push_back(seed);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->out->adj_epoch != pass.epoch) continue;  // not an ancestor of the loss
            it->pull(pass);
        }
        for (auto& n : pass.touched) {
            if (!n->requires_grad) continue;
            if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
            for (std::size_t i = 0; i < n->adj.size(); ++i) n->grad[i] += n->adj[i];
        }
    }

private:
    std::vector<Entry> entries_;
    std::uint64_t epoch_ = 0;
    bool enabled_ = true;
};

// Suspends tape recording for the current scope (evaluation, proximal steps).
template <typename T>
class NoGrad {
public:
    NoGrad() : prev_(Tape<T>::instance().enabled()) { Tape<T>::instance().set_enabled(false); }
    ~NoGrad() { Tape<T>::instance().set_enabled(prev_); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>::instance().run_backward(loss);
}

namespace detail {

// Adjoint buffer for `n` in the current pass, zero-initialized on first touch.
template <typename T>
std::vector<T>& adj_of(const std::shared_ptr<Node<T>>& n, typename Tape<T>::Pass& pass) {
    if (n->adj_epoch != pass.epoch) {
        n->adj.assign(n->value.size(), T(0));
        n->adj_epoch = pass.epoch;
        pass.touched.push_back(n);
    }
    return n->adj;
}

template <typename T>
bool tracked(const Tensor<T>& t) {
    return Tape<T>::instance().enabled() && t.requires_grad();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* opname) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(opname) + ": operand shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* opname) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(opname) + ": expected a rank-2 tensor, got " + shape_str(t.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// C[m,n] = A[m,k] * B[k,n]. Backward: dA = dC * B^T, dB = A^T * dC.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw ShapeError("matmul: inner extents differ, " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    }
    Tensor<T> c = Tensor<T>::zeros({m, n});
    {
        const T* pa = a.data();
        const T* pb = b.data();
        T* pc = c.data();
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = pa + i * k;
            T* crow = pc + i * n;
            for (std::size_t l = 0; l < k; ++l) {
                const T av = arow[l];
                if (av == T(0)) continue;
                const T* brow = pb + l * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    const bool need_a = detail::tracked(a), need_b = detail::tracked(b);
    if (need_a || need_b) {
        c.set_requires_grad(true);
        auto na = a.node(), nb = b.node(), nc = c.node();
        Tape<T>::instance().record(nc, [na, nb, nc, m, k, n, need_a, need_b](typename Tape<T>::Pass& pass) {
            const std::vector<T>& dc = nc->adj;
            if (need_a) {
                std::vector<T>& da = detail::adj_of(na, pass);
                // dA[i,l] += sum_j dC[i,j] * B[l,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const T* dcrow = dc.data() + i * n;
                    T* darow = da.data() + i * k;
                    for (std::size_t l = 0; l < k; ++l) {
                        const T* brow = nb->value.data() + l * n;
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
                        darow[l] += acc;
                    }
                }
            }
            if (need_b) {
                std::vector<T>& db = detail::adj_of(nb, pass);
                // dB[l,j] += sum_i A[i,l] * dC[i,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const T* arow = na->value.data() + i * k;
                    const T* dcrow = dc.data() + i * n;
                    for (std::size_t l = 0; l < k; ++l) {
                        const T av = arow[l];
                        if (av == T(0)) continue;
                        T* dbrow = db.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
                    }
                }
            }
        });
    }
    return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor<T> c = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) c.data()[j * m + i] = a.data()[i * n + j];
    if (detail::tracked(a)) {
        c.set_requires_grad(true);
        auto na = a.node(), nc = c.node();
        Tape<T>::instance().record(nc, [na, nc, m, n](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) da[i * n + j] += nc->adj[j * m + i];
        });
    }
    return c;
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_pointwise(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, name);
    Tensor<T> c = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = fwd(a.data()[i], b.data()[i]);
    const bool need_a = tracked(a), need_b = tracked(b);
    if (need_a || need_b) {
        c.set_requires_grad(true);
        auto na = a.node(), nb = b.node(), nc = c.node();
        Tape<T>::instance().record(nc, [na, nb, nc, need_a, need_b, bwd](typename Tape<T>::Pass& pass) {
            bwd(*na, *nb, *nc, need_a ? &adj_of(na, pass) : nullptr, need_b ? &adj_of(nb, pass) : nullptr);
        });
    }
    return c;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_pointwise(
        a, b, "add", [](T x, T y) { return x + y; },
        [](detail::Node<T>&, detail::Node<T>&, detail::Node<T>& nc, std::vector<T>* da, std::vector<T>* db) {
            for (std::size_t i = 0; i < nc.adj.size(); ++i) {
                if (da) (*da)[i] += nc.adj[i];
                if (db) (*db)[i] += nc.adj[i];
            }
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_pointwise(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](detail::Node<T>&, detail::Node<T>&, detail::Node<T>& nc, std::vector<T>* da, std::vector<T>* db) {
            for (std::size_t i = 0; i < nc.adj.size(); ++i) {
                if (da) (*da)[i] += nc.adj[i];
                if (db) (*db)[i] -= nc.adj[i];
            }
        });
}

// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_pointwise(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](detail::Node<T>& na, detail::Node<T>& nb, detail::Node<T>& nc, std::vector<T>* da, std::vector<T>* db) {
            for (std::size_t i = 0; i < nc.adj.size(); ++i) {
                if (da) (*da)[i] += nc.adj[i] * nb.value[i];
                if (db) (*db)[i] += nc.adj[i] * na.value[i];
            }
        });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no, c](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += no->adj[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < da.size(); ++i)
                if (na->value[i] > T(0)) da[i] += no->adj[i];
        });
    }
    return out;
}

namespace detail {

// tanh form: gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
// This exact variant is the contract; other approximations drift past the
// cross-implementation tolerances.
template <typename T>
inline T gelu_value(T x) {
    const T kSqrt2OverPi = T(0.7978845608028653558798921198687);
    const T inner = kSqrt2OverPi * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
inline T gelu_grad(T x) {
    const T kSqrt2OverPi = T(0.7978845608028653558798921198687);
    const T inner = kSqrt2OverPi * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(inner);
    const T sech2 = T(1) - th * th;
    return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * kSqrt2OverPi * (T(1) + T(3) * T(0.044715) * x * x);
}

}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = detail::gelu_value(a.data()[i]);
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += no->adj[i] * detail::gelu_grad(na->value[i]);
        });
    }
    return out;
}

// Row-wise softmax over the last axis of a rank-2 tensor, max-shifted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    detail::require_rank2(a, "softmax");
    const std::size_t m = a.rows(), n = a.cols();
    if (n < 1) throw ShapeError("softmax: empty rows");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = a.data() + i * n;
        T* y = out.data() + i * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no, m, n](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < m; ++i) {
                const T* y = no->value.data() + i * n;
                const T* dy = no->adj.data() + i * n;
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                for (std::size_t j = 0; j < n; ++j) da[i * n + j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise layer normalization with affine parameters gamma, beta of length d.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    detail::require_rank2(x, "layernorm");
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 1) throw ShapeError("layernorm: empty rows");
    if (eps <= T(0)) throw ConfigError("layernorm: eps must be positive");
    if (gamma.size() != d || beta.size() != d) {
        throw ShapeError("layernorm: affine params " + detail::shape_str(gamma.shape()) + "/" +
                         detail::shape_str(beta.shape()) + " do not match row width " + std::to_string(d));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_sigma(m), xhat(m * d);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.data() + i * d;
        T mean = T(0);
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            out.data()[i * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    const bool need_x = detail::tracked(x), need_g = detail::tracked(gamma), need_b = detail::tracked(beta);
    if (need_x || need_g || need_b) {
        out.set_requires_grad(true);
        auto nx = x.node(), ng = gamma.node(), nb = beta.node(), no = out.node();
        auto inv_s = std::make_shared<std::vector<T>>(std::move(inv_sigma));
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        Tape<T>::instance().record(no, [nx, ng, nb, no, inv_s, xh, m, d, need_x, need_g, need_b](
                                           typename Tape<T>::Pass& pass) {
            for (std::size_t i = 0; i < m; ++i) {
                const T* dy = no->adj.data() + i * d;
                const T* h = xh->data() + i * d;
                if (need_g) {
                    std::vector<T>& dg = detail::adj_of(ng, pass);
                    for (std::size_t j = 0; j < d; ++j) dg[j] += dy[j] * h[j];
                }
                if (need_b) {
                    std::vector<T>& db = detail::adj_of(nb, pass);
                    for (std::size_t j = 0; j < d; ++j) db[j] += dy[j];
                }
                if (need_x) {
                    std::vector<T>& dx = detail::adj_of(nx, pass);
                    T mean_g = T(0), mean_gh = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T g = dy[j] * ng->value[j];
                        mean_g += g;
                        mean_gh += g * h[j];
                    }
                    mean_g /= T(d);
                    mean_gh /= T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T g = dy[j] * ng->value[j];
                        dx[i * d + j] += (g - mean_g - h[j] * mean_gh) * (*inv_s)[i];
                    }
                }
            }
        });
    }
    return out;
}

// Mean of -log softmax(logits)[label] over the batch.
// Backward: dlogits = (softmax - onehot) / B.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    detail::require_rank2(logits, "cross_entropy");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(b));
    }
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
        }
    }
    std::vector<T> probs(b * c);
    T loss = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        const T* x = logits.data() + i * c;
        T mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(x[j] - mx);
            sum += probs[i * c + j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
        loss -= std::log(probs[i * c + static_cast<std::size_t>(labels[i])]);
    }
    loss /= T(b);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (detail::tracked(logits)) {
        out.set_requires_grad(true);
        auto nl = logits.node(), no = out.node();
        auto p = std::make_shared<std::vector<T>>(std::move(probs));
        auto lab = std::make_shared<std::vector<int>>(labels);
        Tape<T>::instance().record(no, [nl, no, p, lab, b, c](typename Tape<T>::Pass& pass) {
            std::vector<T>& dl = detail::adj_of(nl, pass);
            const T scale = no->adj[0] / T(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    T g = (*p)[i * c + j];
                    if (j == static_cast<std::size_t>((*lab)[i])) g -= T(1);
                    dl[i * c + j] += scale * g;
                }
            }
        });
    }
    return out;
}

// Column mean over rows: [m,n] -> [1,n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    detail::require_rank2(a, "mean_rows");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor<T> out = Tensor<T>::zeros({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j] += a.data()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out.data()[j] /= T(m);
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no, m, n](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) da[i * n + j] += no->adj[j] / T(m);
        });
    }
    return out;
}

// Columns [c0, c1) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    detail::require_rank2(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (c0 >= c1 || c1 > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") invalid for " + detail::shape_str(a.shape()));
    }
    const std::size_t w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data()[i * w + j] = a.data()[i * n + c0 + j];
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no, m, n, w, c0](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) da[i * n + c0 + j] += no->adj[i * w + j];
        });
    }
    return out;
}

// Rows [r0, r1) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
    detail::require_rank2(a, "slice_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (r0 >= r1 || r1 > m) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") invalid for " + detail::shape_str(a.shape()));
    }
    const std::size_t h = r1 - r0;
    Tensor<T> out = Tensor<T>::zeros({h, n});
    std::copy(a.data() + r0 * n, a.data() + r1 * n, out.data());
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no, r0, h, n](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < n; ++j) da[(r0 + i) * n + j] += no->adj[i * n + j];
        });
    }
    return out;
}

// Vertical concatenation of rank-2 tensors with equal column counts. The same
// tensor may appear more than once; its adjoint then sums over appearances.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const std::size_t n = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != n) {
            throw ShapeError("concat_rows: column counts differ, " + detail::shape_str(parts[0].shape()) +
                             " vs " + detail::shape_str(p.shape()));
        }
        total += p.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({total, n});
    std::size_t off = 0;
    bool any = false;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + off * n);
        off += p.rows();
        any = any || detail::tracked(p);
    }
    if (any) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::Node<T>>> nodes;
        std::vector<std::size_t> offs;
        std::size_t o = 0;
        for (const auto& p : parts) {
            nodes.push_back(p.requires_grad() ? p.node() : nullptr);
            offs.push_back(o);
            o += p.rows();
        }
        auto no = out.node();
        Tape<T>::instance().record(no, [nodes, offs, no, n](typename Tape<T>::Pass& pass) {
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!nodes[k]) continue;
                const std::size_t h = nodes[k]->shape[0];
                std::vector<T>& da = detail::adj_of(nodes[k], pass);
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += no->adj[(offs[k] + i) * n + j];
            }
        });
    }
    return out;
}

// Horizontal concatenation of rank-2 tensors with equal row counts.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols: row counts differ, " + detail::shape_str(parts[0].shape()) +
                             " vs " + detail::shape_str(p.shape()));
        }
        total += p.cols();
    }
    Tensor<T> out = Tensor<T>::zeros({m, total});
    std::size_t off = 0;
    bool any = false;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out.data()[i * total + off + j] = p.data()[i * w + j];
        off += w;
        any = any || detail::tracked(p);
    }
    if (any) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::Node<T>>> nodes;
        std::vector<std::size_t> offs;
        std::size_t o = 0;
        for (const auto& p : parts) {
            nodes.push_back(p.requires_grad() ? p.node() : nullptr);
            offs.push_back(o);
            o += p.cols();
        }
        auto no = out.node();
        Tape<T>::instance().record(no, [nodes, offs, no, m, total](typename Tape<T>::Pass& pass) {
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!nodes[k]) continue;
                const std::size_t w = nodes[k]->shape[1];
                std::vector<T>& da = detail::adj_of(nodes[k], pass);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) da[i * w + j] += no->adj[i * total + offs[k] + j];
            }
        });
    }
    return out;
}

// Stacks row vectors (shape [1,n] or [n]) into an [k,n] matrix.
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows_in) {
    if (rows_in.empty()) throw ShapeError("stack_rows: no operands");
    const std::size_t n = rows_in[0].size();
    for (const auto& r : rows_in) {
        if (r.size() != n || r.rows() * r.cols() != r.size()) {
            throw ShapeError("stack_rows: operand " + detail::shape_str(r.shape()) +
                             " is not a row of width " + std::to_string(n));
        }
    }
    const std::size_t k = rows_in.size();
    Tensor<T> out = Tensor<T>::zeros({k, n});
    bool any = false;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = rows_in[i].data()[j];
        any = any || detail::tracked(rows_in[i]);
    }
    if (any) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::Node<T>>> nodes;
        for (const auto& r : rows_in) nodes.push_back(r.requires_grad() ? r.node() : nullptr);
        auto no = out.node();
        Tape<T>::instance().record(no, [nodes, no, n](typename Tape<T>::Pass& pass) {
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (!nodes[i]) continue;
                std::vector<T>& da = detail::adj_of(nodes[i], pass);
                for (std::size_t j = 0; j < n; ++j) da[j] += no->adj[i * n + j];
            }
        });
    }
    return out;
}

// Sum of all elements -> scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (auto& v : da) v += no->adj[0];
        });
    }
    return out;
}

// Pointwise |x|; subgradient 0 at the kink.
template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::abs(a.data()[i]);
    if (detail::tracked(a)) {
        out.set_requires_grad(true);
        auto na = a.node(), no = out.node();
        Tape<T>::instance().record(no, [na, no](typename Tape<T>::Pass& pass) {
            std::vector<T>& da = detail::adj_of(na, pass);
            for (std::size_t i = 0; i < da.size(); ++i) {
                const T x = na->value[i];
                da[i] += no->adj[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
            }
        });
    }
    return out;
}

// y[i,j] = x[i,j] * s[j]; gradients flow to both factors.
template <typename T>
Tensor<T> scale_cols(const Tensor<T>& x, const Tensor<T>& s) {
    detail::require_rank2(x, "scale_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (s.size() != n) {
        throw ShapeError("scale_cols: scale " + detail::shape_str(s.shape()) + " does not match columns of " +
                         detail::shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] * s.data()[j];
    const bool need_x = detail::tracked(x), need_s = detail::tracked(s);
    if (need_x || need_s) {
        out.set_requires_grad(true);
        auto nx = x.node(), ns = s.node(), no = out.node();
        Tape<T>::instance().record(no, [nx, ns, no, m, n, need_x, need_s](typename Tape<T>::Pass& pass) {
            if (need_x) {
                std::vector<T>& dx = detail::adj_of(nx, pass);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += no->adj[i * n + j] * ns->value[j];
            }
            if (need_s) {
                std::vector<T>& ds = detail::adj_of(ns, pass);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ds[j] += no->adj[i * n + j] * nx->value[i * n + j];
            }
        });
    }
    return out;
}

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double global_grad_clip(const std::vector<Tensor<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (const auto& p : params) {
            if (!p.has_grad()) continue;
            for (T& g : const_cast<std::vector<T>&>(p.grad())) g *= scale;
        }
    }
    return norm;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dlra
