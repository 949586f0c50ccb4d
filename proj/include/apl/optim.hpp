#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/tensor.hpp"

namespace apl {

// A named learnable tensor plus its AdamW moment buffers.
struct Parameter {
    std::string name;
    Tensor tensor;
    std::vector<double> moment1;
    std::vector<double> moment2;

    Parameter(std::string n, Tensor t)
        : name(std::move(n)),
          tensor(std::move(t)),
          moment1(tensor.numel(), 0.0),
          moment2(tensor.numel(), 0.0) {
        if (!tensor.requires_grad()) {
            throw std::invalid_argument("parameter '" + name + "' must require grad");
        }
    }
};

struct AdamWConfig {
    double lr = 5e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One AdamW update with decoupled weight decay (decay applied directly to the
// weights, not through the moments). t counts from 1. Gradients are left
// untouched; the caller zeroes them.
inline void adamw_step(std::span<Parameter> params, const AdamWConfig& cfg, std::size_t t) {
    if (t < 1) throw std::invalid_argument("adamw_step: t must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (Parameter& p : params) {
        auto w = p.tensor.data_mut();
        auto g = p.tensor.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] -= cfg.lr * cfg.weight_decay * w[i];
            p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g[i];
            p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = p.moment1[i] / bc1;
            const double vhat = p.moment2[i] / bc2;
            w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// Stateful wrapper tracking the step counter.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    void step(std::span<Parameter> params) { adamw_step(params, cfg_, ++t_); }
    std::size_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::size_t t_ = 0;
};

inline void zero_grads(std::span<Parameter> params) {
    for (Parameter& p : params) p.tensor.zero_grad();
}

}  // namespace apl
