#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/rng.hpp"
#include "dlra/tensor.hpp"

namespace dlra {

struct PruneReport {
    std::string layer;
    std::vector<std::size_t> pruned;
    std::size_t surviving = 0;
    double max_abs_w_pruned = 0.0;
    // scale * sum over pruned i of |w_i| * ||b_i|| * ||a_i||; upper-bounds the
    // operator-norm change of delta_w (triangle inequality on rank-1 terms).
    double perturbation_bound = 0.0;
};

// One adapted weight matrix: frozen base [d_out x d_in] plus r_max rank-1
// direction triples. Direction i is row i of `a` [r_max x d_in], row i of
// `b` [r_max x d_out], and scalar w[i]. Inactive directions keep their slots
// (shapes never change) but carry w == 0 and a zero mask entry, so they
// contribute nothing to forward and receive no gradient.
template <typename T>
struct DynLoraAdapter {
    std::string name;
    Tensor<T> base;
    Tensor<T> a;
    Tensor<T> b;
    Tensor<T> w;
    std::vector<std::uint8_t> active;
    T alpha = T(16);
    std::size_t r_max = 8;

    T scale() const { return alpha / static_cast<T>(r_max); }

    std::size_t d_out() const { return base.rows(); }
    std::size_t d_in() const { return base.cols(); }

    std::size_t active_rank() const {
        std::size_t k = 0;
        for (auto f : active) k += f ? 1 : 0;
        return k;
    }

    // 0/1 column mask over directions, kept in sync with `active`.
    const Tensor<T>& mask() const { return mask_; }

    void rebuild_mask() {
        mask_ = Tensor<T>::zeros({r_max});
        for (std::size_t i = 0; i < r_max; ++i) mask_.values()[i] = active[i] ? T(1) : T(0);
    }

    std::vector<Tensor<T>> trainable() { return {a, b, w}; }

private:
    Tensor<T> mask_;
};

template <typename T>
DynLoraAdapter<T> init_adapter(Tensor<T> base, std::size_t r_max, T alpha, std::uint64_t seed,
                               std::string name = "") {
    if (base.rank() != 2) throw ShapeError("adapter base must be 2-D, got " + std::to_string(base.rank()) + "-D");
    if (r_max < 1) throw ConfigError("adapter rank must be at least 1");
    DynLoraAdapter<T> ad;
    ad.name = std::move(name);
    ad.base = std::move(base);
    ad.base.set_requires_grad(false);
    ad.alpha = alpha;
    ad.r_max = r_max;
    Rng rng(seed);
    const T std_a = T(1) / std::sqrt(static_cast<T>(ad.d_in()));
    ad.a = Tensor<T>::randn({r_max, ad.d_in()}, rng, std_a).set_requires_grad(true);
    ad.b = Tensor<T>::zeros({r_max, ad.d_out()}).set_requires_grad(true);
    ad.w = Tensor<T>::filled({r_max}, T(1)).set_requires_grad(true);
    ad.active.assign(r_max, 1);
    ad.rebuild_mask();
    return ad;
}

// (alpha / r_max) * sum over active i of w_i * outer(b_i, a_i).
// Materialized form for merge and verification; not used in the forward path.
template <typename T>
Tensor<T> delta_w(const DynLoraAdapter<T>& ad) {
    const std::size_t dout = ad.d_out(), din = ad.d_in();
    Tensor<T> dw = Tensor<T>::zeros({dout, din});
    const T s = ad.scale();
    for (std::size_t i = 0; i < ad.r_max; ++i) {
        if (!ad.active[i]) continue;
        const T wi = ad.w.values()[i];
        if (wi == T(0)) continue;
        const T* bi = ad.b.data() + i * dout;
        const T* ai = ad.a.data() + i * din;
        for (std::size_t j = 0; j < dout; ++j) {
            const T c = s * wi * bi[j];
            if (c == T(0)) continue;
            T* row = dw.data() + j * din;
            for (std::size_t k = 0; k < din; ++k) row[k] += c * ai[k];
        }
    }
    return dw;
}

// x [B x d_in] -> x*W0^T + scale * ((x*a^T) . w . mask) * b, all factored.
// Gradients reach a, b, w only; the mask zeroes both the contribution and the
// gradient of pruned directions.
template <typename T>
Tensor<T> forward_adapted(DynLoraAdapter<T>& ad, const Tensor<T>& x) {
    if (x.rank() != 2 || x.cols() != ad.d_in()) {
        throw ShapeError("adapter input " + detail::shape_str(x.shape()) + " does not match base " +
                         detail::shape_str(ad.base.shape()));
    }
    Tensor<T> y = matmul(x, transpose(ad.base));
    Tensor<T> u = matmul(x, transpose(ad.a));           // [B x r]
    u = scale_cols(u, ad.w);
    u = scale_cols(u, ad.mask());
    Tensor<T> dy = matmul(u, ad.b);                     // [B x d_out]
    return add(y, mul_scalar(dy, ad.scale()));
}

// Proximal step for the l1 penalty: w_i <- sign(w_i) * max(|w_i| - tau, 0)
// on active directions. Returns how many weights this call moved to exactly 0.
template <typename T>
std::size_t soft_shrink_weights(DynLoraAdapter<T>& ad, T tau) {
    if (tau < T(0)) throw ConfigError("shrinkage threshold must be nonnegative");
    std::size_t zeroed = 0;
    for (std::size_t i = 0; i < ad.r_max; ++i) {
        if (!ad.active[i]) continue;
        T& wi = ad.w.values()[i];
        if (wi == T(0)) continue;
        const T mag = std::abs(wi) - tau;
        if (mag <= T(0)) {
            wi = T(0);
            ++zeroed;
        } else {
            wi = wi > T(0) ? mag : -mag;
        }
    }
    return zeroed;
}

template <typename T>
PruneReport prune(DynLoraAdapter<T>& ad, T epsilon) {
    if (epsilon < T(0)) throw ConfigError("prune threshold must be nonnegative");
    PruneReport rep;
    rep.layer = ad.name;
    const std::size_t dout = ad.d_out(), din = ad.d_in();
    for (std::size_t i = 0; i < ad.r_max; ++i) {
        if (!ad.active[i]) continue;
        T& wi = ad.w.values()[i];
        if (std::abs(wi) <= epsilon) {
            double na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < din; ++k) {
                const double v = static_cast<double>(ad.a.values()[i * din + k]);
                na += v * v;
            }
            for (std::size_t j = 0; j < dout; ++j) {
                const double v = static_cast<double>(ad.b.values()[i * dout + j]);
                nb += v * v;
            }
            rep.pruned.push_back(i);
            rep.max_abs_w_pruned = std::max(rep.max_abs_w_pruned, static_cast<double>(std::abs(wi)));
            rep.perturbation_bound +=
                static_cast<double>(ad.scale()) * std::abs(static_cast<double>(wi)) * std::sqrt(nb) * std::sqrt(na);
            wi = T(0);
            ad.active[i] = 0;
        }
    }
    rep.surviving = ad.active_rank();
    ad.rebuild_mask();
    return rep;
}

template <typename T>
Tensor<T> merge(const DynLoraAdapter<T>& ad) {
    Tensor<T> dw = delta_w(ad);
    Tensor<T> merged = Tensor<T>::zeros(ad.base.shape());
    for (std::size_t i = 0; i < merged.size(); ++i)
        merged.values()[i] = ad.base.values()[i] + dw.values()[i];
    return merged;
}

}  // namespace dlra
