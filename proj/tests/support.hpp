#pragma once

// Shared test oracles. Everything here recomputes expected values through
// plain loops or finite differences, never through the library's backward
// implementations.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "dlra/tensor.hpp"

namespace testsup {

struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t checked = 0;
};

// Central finite-difference gradient check in 64-bit.
//
// make_loss must rebuild the computation from the current parameter values
// and return a scalar. For every element of every parameter the analytic
// gradient (one tape backward) is compared against (f(x+h)-f(x-h))/(2h).
// Per-element differences are normalized by the largest magnitude seen in
// that parameter's analytic or numeric gradient, floored at 1e-4 so an
// all-zero gradient tensor tolerates noise at the FD roundoff scale instead
// of dividing by zero.
inline FdReport fd_check(std::vector<dlra::TensorD> params,
                         const std::function<dlra::TensorD()>& make_loss, double h = 1e-5) {
    using dlra::TensorD;
    auto& tape = dlra::Tape<double>::instance();

    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    tape.clear();
    TensorD loss = make_loss();
    dlra::backward(loss);
    tape.clear();

    FdReport rep;
    dlra::NoGrad<double> off;
    for (auto& p : params) {
        std::vector<double> numeric(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p.values()[i];
            p.values()[i] = keep + h;
            const double fp = make_loss().item();
            p.values()[i] = keep - h;
            const double fm = make_loss().item();
            p.values()[i] = keep;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        double denom = 1e-4;
        for (std::size_t i = 0; i < p.size(); ++i) {
            denom = std::max(denom, std::abs(numeric[i]));
            denom = std::max(denom, std::abs(p.grad()[i]));
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double diff = std::abs(numeric[i] - p.grad()[i]);
            rep.max_abs_err = std::max(rep.max_abs_err, diff);
            rep.max_rel_err = std::max(rep.max_rel_err, diff / denom);
            ++rep.checked;
        }
    }
    return rep;
}

// Largest singular value by power iteration on A^T A. Plain loops, no library
// code. Deterministic start vector.
inline double spectral_norm(const std::vector<double>& a, std::size_t m, std::size_t n,
                            int iters = 300) {
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
    std::vector<double> av(m);
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * v[j];
            av[i] = s;
        }
        sigma = 0.0;
        for (double x : av) sigma += x * x;
        sigma = std::sqrt(sigma);
        if (sigma == 0.0) return 0.0;
        std::vector<double> next(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) next[j] += a[i * n + j] * av[i];
        double nn = 0.0;
        for (double x : next) nn += x * x;
        nn = std::sqrt(nn);
        if (nn == 0.0) return 0.0;
        for (std::size_t j = 0; j < n; ++j) v[j] = next[j] / nn;
    }
    return sigma;
}

// Reference for global clipping: concatenate, measure, scale.
inline double clip_concat_oracle(std::vector<std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (double& x : g) x *= s;
    }
    return norm;
}

}  // namespace testsup
