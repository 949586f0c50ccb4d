#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/data.hpp"
#include "apl/optim.hpp"
#include "apl/rng.hpp"
#include "apl/tensor.hpp"

namespace apl {

inline constexpr double kAlphaDropoutProb = 0.25;
inline constexpr double kInitStddev = 0.02;

// Table-2 switches: the baseline (all off) mean-pools the unimodal features;
// prototypes and self-attention fusion are added on top.
struct AblationConfig {
    bool use_hist_prototypes = true;
    bool use_gene_prototypes = true;
    bool use_self_attention = true;

    bool operator==(const AblationConfig&) const = default;
};

struct AplConfig {
    std::size_t d_in = 1024;        // patch embedding input width
    std::size_t d_model = 256;      // shared embedding width C
    std::size_t snn_hidden = 512;   // pathway encoder hidden width
    std::size_t n_hist_queries = 300;
    std::size_t n_gene_queries = 128;
    std::size_t n_bins = 4;
    AblationConfig ablation;
    bool self_attention_residual = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (d_in < 1 || d_model < 1 || snn_hidden < 1 || n_bins < 1 || n_hist_queries < 1 ||
            n_gene_queries < 1) {
            throw std::invalid_argument("model config: all dimensions must be >= 1");
        }
        if (ablation.use_self_attention && !ablation.use_hist_prototypes &&
            !ablation.use_gene_prototypes) {
            throw std::invalid_argument(
                "model config: self-attention fusion requires at least one prototype branch");
        }
    }
};

struct LinearLayer {
    Tensor weight;  // in x out
    Tensor bias;    // out
};

// y = x W + b for rank-2 x.
inline Tensor apply_linear(const LinearLayer& l, const Tensor& x) {
    return add_row_broadcast(matmul(x, l.weight), l.bias);
}

struct CrossAttentionResult {
    Tensor output;     // n_q x d_model
    Tensor attention;  // n_q x n_tokens, rows sum to 1
};

// Learnable queries attend over a token set: softmax(F_q(Q) F_k(X)^T / sqrt(C)) F_v(X).
inline CrossAttentionResult cross_attention_prototypes(const Tensor& queries,
                                                       const Tensor& tokens,
                                                       const LinearLayer& f_q,
                                                       const LinearLayer& f_k,
                                                       const LinearLayer& f_v,
                                                       std::size_t c_dim) {
    if (tokens.rank() != 2 || tokens.rows() == 0) {
        throw std::invalid_argument("cross_attention: attention over an empty token set");
    }
    const Tensor q = apply_linear(f_q, queries);
    const Tensor k = apply_linear(f_k, tokens);
    const Tensor v = apply_linear(f_v, tokens);
    const Tensor scores = mul_scalar(matmul_transposed(q, k),
                                     1.0 / std::sqrt(static_cast<double>(c_dim)));
    CrossAttentionResult out;
    out.attention = softmax_rows(scores);
    out.output = matmul(out.attention, v);
    return out;
}

// Single-head self-attention over all rows jointly, no modality masking.
inline Tensor mixed_self_attention(const Tensor& m, const LinearLayer& f_q,
                                   const LinearLayer& f_k, const LinearLayer& f_v,
                                   std::size_t c_dim, Tensor* attention_out = nullptr) {
    if (m.rank() != 2 || m.rows() == 0) {
        throw std::invalid_argument("mixed_self_attention: empty prototype sequence");
    }
    const Tensor q = apply_linear(f_q, m);
    const Tensor k = apply_linear(f_k, m);
    const Tensor v = apply_linear(f_v, m);
    const Tensor scores =
        mul_scalar(matmul_transposed(q, k), 1.0 / std::sqrt(static_cast<double>(c_dim)));
    const Tensor attn = softmax_rows(scores);
    if (attention_out) *attention_out = attn;
    return matmul(attn, v);
}

// All learnable state of the network: patch projector, one SNN encoder per
// pathway, the two query banks with their cross-attention projections, the
// fusion self-attention projections, and the predictor.
class AplModel {
public:
    AplModel(AplConfig config, std::vector<std::size_t> pathway_gene_counts)
        : cfg_(config), gene_counts_(std::move(pathway_gene_counts)) {
        cfg_.validate();
        if (gene_counts_.empty()) {
            throw std::invalid_argument("model: need at least one pathway");
        }
        Rng rng(cfg_.seed);
        patch_proj_ = add_linear("patch_proj", cfg_.d_in, cfg_.d_model, rng);
        snn_fc1_.reserve(gene_counts_.size());
        snn_fc2_.reserve(gene_counts_.size());
        for (std::size_t p = 0; p < gene_counts_.size(); ++p) {
            const std::string base = "pathway_encoder." + std::to_string(p);
            snn_fc1_.push_back(add_linear(base + ".fc1", gene_counts_[p], cfg_.snn_hidden, rng));
            snn_fc2_.push_back(add_linear(base + ".fc2", cfg_.snn_hidden, cfg_.d_model, rng));
        }
        if (cfg_.ablation.use_hist_prototypes) {
            hist_queries_ = add_bank("hist_queries", cfg_.n_hist_queries, rng);
            hist_q_ = add_linear("hist_attn.query", cfg_.d_model, cfg_.d_model, rng);
            hist_k_ = add_linear("hist_attn.key", cfg_.d_model, cfg_.d_model, rng);
            hist_v_ = add_linear("hist_attn.value", cfg_.d_model, cfg_.d_model, rng);
        }
        if (cfg_.ablation.use_gene_prototypes) {
            gene_queries_ = add_bank("gene_queries", cfg_.n_gene_queries, rng);
            gene_q_ = add_linear("gene_attn.query", cfg_.d_model, cfg_.d_model, rng);
            gene_k_ = add_linear("gene_attn.key", cfg_.d_model, cfg_.d_model, rng);
            gene_v_ = add_linear("gene_attn.value", cfg_.d_model, cfg_.d_model, rng);
        }
        if (cfg_.ablation.use_self_attention) {
            self_q_ = add_linear("self_attn.query", cfg_.d_model, cfg_.d_model, rng);
            self_k_ = add_linear("self_attn.key", cfg_.d_model, cfg_.d_model, rng);
            self_v_ = add_linear("self_attn.value", cfg_.d_model, cfg_.d_model, rng);
        }
        const std::size_t pred_in =
            cfg_.ablation.use_self_attention ? cfg_.d_model : 2 * cfg_.d_model;
        predictor_ = add_linear("predictor", pred_in, cfg_.n_bins, rng);
    }

    const AplConfig& config() const { return cfg_; }
    const std::vector<std::size_t>& pathway_gene_counts() const { return gene_counts_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    struct CaseInputs {
        Tensor patches;                // n_patches x d_in
        std::vector<Tensor> pathways;  // rank-1, one per pathway, length g_i
    };

    struct ForwardResult {
        Tensor logits;  // rank-1, n_bins
        Tensor hist_attention;  // n_hist_queries x n_patches (when branch enabled)
        Tensor gene_attention;  // n_gene_queries x n_pathways
        Tensor self_attention;  // fused x fused (when enabled)
    };

    // Affine projection of each patch row (no activation).
    Tensor encode_patches(const Tensor& patches) const {
        if (patches.rank() != 2 || patches.cols() != cfg_.d_in) {
            throw std::invalid_argument("encode_patches: expected [n," +
                                        std::to_string(cfg_.d_in) + "], got " +
                                        shape_str(patches.shape()));
        }
        return apply_linear(patch_proj_, patches);
    }

    // Each pathway through its own SNN (linear, SELU, alpha-dropout in train
    // mode, linear) to one d_model token; tokens stacked in pathway order.
    Tensor encode_pathways(const std::vector<Tensor>& pathway_inputs, bool train_mode,
                           Rng* dropout_rng) const {
        if (pathway_inputs.size() != gene_counts_.size()) {
            throw std::invalid_argument(
                "encode_pathways: got " + std::to_string(pathway_inputs.size()) +
                " pathway vectors, model has " + std::to_string(gene_counts_.size()));
        }
        std::vector<Tensor> tokens;
        tokens.reserve(pathway_inputs.size());
        for (std::size_t p = 0; p < pathway_inputs.size(); ++p) {
            const Tensor& x = pathway_inputs[p];
            if (x.rank() != 1 || x.numel() != gene_counts_[p]) {
                throw std::invalid_argument("encode_pathways: pathway " + std::to_string(p) +
                                            " expects length " +
                                            std::to_string(gene_counts_[p]) + ", got " +
                                            shape_str(x.shape()));
            }
            Tensor h = selu(apply_linear(snn_fc1_[p], reshape(x, {1, x.numel()})));
            if (train_mode) {
                if (!dropout_rng) {
                    throw std::invalid_argument("encode_pathways: train mode needs a dropout rng");
                }
                h = alpha_dropout(h, kAlphaDropoutProb, *dropout_rng);
            }
            tokens.push_back(reshape(apply_linear(snn_fc2_[p], h), {cfg_.d_model}));
        }
        return stack_rows(tokens);
    }

    ForwardResult forward(const CaseInputs& in, bool train_mode, Rng* dropout_rng = nullptr,
                          bool want_attention = false) const {
        ForwardResult result;
        const Tensor x_h = encode_patches(in.patches);
        const Tensor x_g = encode_pathways(in.pathways, train_mode, dropout_rng);

        Tensor hist_proto, gene_proto;
        if (cfg_.ablation.use_hist_prototypes) {
            auto ca = cross_attention_prototypes(hist_queries_, x_h, hist_q_, hist_k_, hist_v_,
                                                 cfg_.d_model);
            hist_proto = ca.output;
            if (want_attention) result.hist_attention = ca.attention;
        }
        if (cfg_.ablation.use_gene_prototypes) {
            auto ca = cross_attention_prototypes(gene_queries_, x_g, gene_q_, gene_k_, gene_v_,
                                                 cfg_.d_model);
            gene_proto = ca.output;
            if (want_attention) result.gene_attention = ca.attention;
        }

        Tensor feature;
        if (cfg_.ablation.use_self_attention) {
            Tensor fused_in;
            if (hist_proto.defined() && gene_proto.defined()) {
                fused_in = concat_rows(hist_proto, gene_proto);
            } else {
                fused_in = hist_proto.defined() ? hist_proto : gene_proto;
            }
            Tensor attn;
            Tensor fused = mixed_self_attention(fused_in, self_q_, self_k_, self_v_,
                                                cfg_.d_model, want_attention ? &attn : nullptr);
            if (cfg_.self_attention_residual) fused = add(fused, fused_in);
            if (want_attention) result.self_attention = attn;
            feature = mean_rows(fused);
        } else {
            const Tensor h_feat =
                cfg_.ablation.use_hist_prototypes ? mean_rows(hist_proto) : mean_rows(x_h);
            const Tensor g_feat =
                cfg_.ablation.use_gene_prototypes ? mean_rows(gene_proto) : mean_rows(x_g);
            feature = concat_vec(h_feat, g_feat);
        }
        result.logits = reshape(
            apply_linear(predictor_, reshape(feature, {1, feature.numel()})), {cfg_.n_bins});
        return result;
    }

private:
    LinearLayer add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        LinearLayer l;
        l.weight = Tensor::randn({in, out}, rng, kInitStddev, true);
        l.bias = Tensor::zeros({out}, true);
        params_.emplace_back(name + ".weight", l.weight);
        params_.emplace_back(name + ".bias", l.bias);
        return l;
    }

    Tensor add_bank(const std::string& name, std::size_t n_queries, Rng& rng) {
        Tensor bank = Tensor::randn({n_queries, cfg_.d_model}, rng, kInitStddev, true);
        params_.emplace_back(name, bank);
        return bank;
    }

    AplConfig cfg_;
    std::vector<std::size_t> gene_counts_;
    std::vector<Parameter> params_;

    LinearLayer patch_proj_;
    std::vector<LinearLayer> snn_fc1_, snn_fc2_;
    Tensor hist_queries_, gene_queries_;
    LinearLayer hist_q_, hist_k_, hist_v_;
    LinearLayer gene_q_, gene_k_, gene_v_;
    LinearLayer self_q_, self_k_, self_v_;
    LinearLayer predictor_;
};

}  // namespace apl
