#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/tensor.hpp"

namespace dlra {

// AdamW with decoupled weight decay and bias correction. Decay applies only
// to slots registered with decay=true; importance weights and normalization
// parameters are registered without it. step() consumes and zeroes gradients.
template <typename T>
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr <= 0) throw ConfigError("learning rate must be positive");
    }

    void add_param(Tensor<T> p, bool decay) {
        Slot s;
        s.param = std::move(p);
        s.decay = decay;
        s.m.assign(s.param.size(), 0.0);
        s.v.assign(s.param.size(), 0.0);
        slots_.push_back(std::move(s));
    }

    std::uint64_t steps() const { return step_; }
    double lr() const { return lr_; }

    std::vector<Tensor<T>> params() const {
        std::vector<Tensor<T>> ps;
        for (const auto& s : slots_) ps.push_back(s.param);
        return ps;
    }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (auto& s : slots_) {
            auto& g = s.param.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!std::isfinite(static_cast<double>(g[i])))
                    throw NumericError("non-finite gradient at optimizer step " + std::to_string(step_));
            auto& val = s.param.values();
            if (s.decay && wd_ != 0.0) {
                const T keep = static_cast<T>(1.0 - lr_ * wd_);
                for (auto& v : val) v *= keep;
            }
            for (std::size_t i = 0; i < val.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                val[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
            s.param.zero_grad();
        }
    }

private:
    struct Slot {
        Tensor<T> param;
        bool decay = false;
        std::vector<double> m, v;  // moments kept in double at both precisions
    };

    std::vector<Slot> slots_;
    double lr_, wd_, beta1_, beta2_, eps_;
    std::uint64_t step_ = 0;
};

}  // namespace dlra
