#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/tensor.hpp"

namespace apl {

inline constexpr double kProbFloor = 1e-12;

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Per-case survival quantities derived from bin logits: discrete hazards
// h_t = sigmoid(logit_t), survival S(t) = prod_{j<=t}(1-h_j), and the scalar
// risk -sum_t S(t) (higher risk, shorter predicted survival).
struct SurvivalOutput {
    std::vector<double> logits;
    std::vector<double> hazards;
    std::vector<double> survival;
    double risk = 0.0;
};

inline SurvivalOutput survival_from_logits(std::span<const double> logits) {
    SurvivalOutput out;
    out.logits.assign(logits.begin(), logits.end());
    out.hazards.resize(logits.size());
    out.survival.resize(logits.size());
    double s = 1.0;
    double acc = 0.0;
    for (std::size_t t = 0; t < logits.size(); ++t) {
        out.hazards[t] = sigmoid_scalar(logits[t]);
        s *= 1.0 - out.hazards[t];
        out.survival[t] = s;
        acc += s;
    }
    out.risk = -acc;
    return out;
}

inline double risk_score(std::span<const double> logits) {
    return survival_from_logits(logits).risk;
}

// Discrete-time censored negative log-likelihood on one case, differentiable
// through the logits. With h = sigmoid(logits) and S(t) = prod_{j<=t}(1-h_j),
// S(-1) = 1:
//   event observed: -[log S(bin-1) + log h_bin]
//   censored:       -(1-alpha) * log S(bin)
// Probabilities are clamped to >= 1e-12 before the log.
inline Tensor nll_survival_loss(const Tensor& logits, std::size_t bin, bool event,
                                double alpha = 0.0) {
    if (logits.rank() != 1) {
        throw std::invalid_argument("nll_survival_loss: logits must be rank-1, got " +
                                    shape_str(logits.shape()));
    }
    const std::size_t n_bins = logits.numel();
    if (bin >= n_bins) {
        throw std::invalid_argument("nll_survival_loss: bin " + std::to_string(bin) +
                                    " out of range for " + std::to_string(n_bins) + " bins");
    }
    Tensor hazards = sigmoid(logits);
    Tensor keep = sub(Tensor::full({n_bins}, 1.0), hazards);  // 1 - h_t

    auto survival_at = [&](std::size_t t) {  // S(t), t < n_bins
        Tensor s = select(keep, 0);
        for (std::size_t j = 1; j <= t; ++j) s = mul(s, select(keep, j));
        return s;
    };

    if (event) {
        Tensor log_h = log(clamp_min(select(hazards, bin), kProbFloor));
        if (bin == 0) return mul_scalar(log_h, -1.0);  // S(-1) = 1
        Tensor log_s = log(clamp_min(survival_at(bin - 1), kProbFloor));
        return mul_scalar(add(log_s, log_h), -1.0);
    }
    Tensor log_s = log(clamp_min(survival_at(bin), kProbFloor));
    return mul_scalar(log_s, -(1.0 - alpha));
}

// Harrell's concordance. A pair (i,j) is comparable iff time_i < time_j and
// case i had an observed event; it is concordant iff risk_i > risk_j; tied
// risks count one half.
struct ConcordanceReport {
    bool defined = false;  // false when no comparable pairs exist
    double c_index = 0.0;
    std::size_t comparable_pairs = 0;
    std::size_t concordant = 0;
    std::size_t tied = 0;
};

inline ConcordanceReport c_index(std::span<const double> risks, std::span<const double> times,
                                 const std::vector<bool>& events) {
    if (risks.size() != times.size() || risks.size() != events.size()) {
        throw std::invalid_argument("c_index: input lengths disagree");
    }
    if (risks.size() < 2) throw std::invalid_argument("c_index: need at least 2 cases");
    ConcordanceReport rep;
    const std::size_t n = risks.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (!events[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (!(times[i] < times[j])) continue;
            ++rep.comparable_pairs;
            if (risks[i] > risks[j]) {
                ++rep.concordant;
            } else if (risks[i] == risks[j]) {
                ++rep.tied;
            }
        }
    }
    if (rep.comparable_pairs > 0) {
        rep.defined = true;
        rep.c_index = (static_cast<double>(rep.concordant) + 0.5 * static_cast<double>(rep.tied)) /
                      static_cast<double>(rep.comparable_pairs);
    }
    return rep;
}

}  // namespace apl
