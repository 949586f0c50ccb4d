#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "apl/checkpoint.hpp"
#include "apl/data.hpp"
#include "apl/jsonio.hpp"
#include "apl/model.hpp"
#include "apl/optim.hpp"
#include "apl/survival.hpp"

namespace apl {

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 1e-3;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t folds = 5;
    double alpha_censor = 0.0;
    std::size_t threads = 0;  // 0 = one thread per fold, capped by hardware

    void validate() const {
        if (lr <= 0.0 || weight_decay < 0.0 || epochs < 1 || batch_size < 1 || folds < 2 ||
            beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0 || eps <= 0.0) {
            throw std::invalid_argument("train config: invalid values");
        }
        if (alpha_censor < 0.0 || alpha_censor > 1.0) {
            throw std::invalid_argument("train config: alpha_censor must be in [0,1]");
        }
    }
};

inline Json to_json(const TrainConfig& c) {
    return Json{{"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"eps", c.eps},
                {"seed", c.seed},
                {"folds", c.folds},
                {"alpha_censor", c.alpha_censor},
                {"threads", c.threads}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& context) {
    reject_unknown_keys(j,
                        {"lr", "weight_decay", "epochs", "batch_size", "beta1", "beta2", "eps",
                         "seed", "folds", "alpha_censor", "threads"},
                        context);
    TrainConfig c;
    c.lr = json_get_or(j, "lr", c.lr);
    c.weight_decay = json_get_or(j, "weight_decay", c.weight_decay);
    c.epochs = json_get_or<std::size_t>(j, "epochs", c.epochs);
    c.batch_size = json_get_or<std::size_t>(j, "batch_size", c.batch_size);
    c.beta1 = json_get_or(j, "beta1", c.beta1);
    c.beta2 = json_get_or(j, "beta2", c.beta2);
    c.eps = json_get_or(j, "eps", c.eps);
    c.seed = json_get_or<std::uint64_t>(j, "seed", c.seed);
    c.folds = json_get_or<std::size_t>(j, "folds", c.folds);
    c.alpha_censor = json_get_or(j, "alpha_censor", c.alpha_censor);
    c.threads = json_get_or<std::size_t>(j, "threads", c.threads);
    c.validate();
    return c;
}

// Normalized per-case inputs for one fold.
inline AplModel::CaseInputs make_inputs(const CaseRecord& rec, const Preprocess& prep) {
    AplModel::CaseInputs in;
    in.patches = Tensor::from({rec.n_patches, rec.d_in},
                              std::vector<double>(rec.patch_embeddings.begin(),
                                                  rec.patch_embeddings.end()));
    in.pathways.reserve(rec.pathway_inputs.size());
    for (std::size_t p = 0; p < rec.pathway_inputs.size(); ++p) {
        auto v = normalize_pathway(prep, p, rec.pathway_inputs[p]);
        in.pathways.push_back(Tensor::from({v.size()}, std::move(v)));
    }
    return in;
}

struct TrainHistory {
    std::vector<double> epoch_loss;  // mean per-case loss per epoch
};

// Trains one model on a fixed split. "Batch size 32" is realized as the mean
// of 32 per-case losses followed by one backward pass and one optimizer step
// (cases have variable token counts, so there is no padded tensor batching).
// Aborts with diagnostics on a non-finite loss.
inline TrainHistory train_model(AplModel& model, std::span<const CaseRecord> train_cases,
                                const Preprocess& prep, const TrainConfig& tc,
                                std::uint64_t stream_seed) {
    if (train_cases.empty()) throw std::invalid_argument("train_model: empty training split");
    std::vector<AplModel::CaseInputs> inputs;
    inputs.reserve(train_cases.size());
    for (const auto& c : train_cases) inputs.push_back(make_inputs(c, prep));

    AdamW optimizer({.lr = tc.lr,
                     .weight_decay = tc.weight_decay,
                     .beta1 = tc.beta1,
                     .beta2 = tc.beta2,
                     .eps = tc.eps});
    Rng shuffle_rng = Rng(stream_seed).fork(1);
    Rng dropout_rng = Rng(stream_seed).fork(2);

    TrainHistory history;
    std::vector<std::size_t> order(train_cases.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t stop = std::min(order.size(), start + tc.batch_size);
            Tensor batch_sum;
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t idx = order[b];
                const auto& rec = train_cases[idx];
                auto fwd = model.forward(inputs[idx], /*train_mode=*/true, &dropout_rng);
                Tensor loss = nll_survival_loss(fwd.logits, static_cast<std::size_t>(rec.bin),
                                                rec.event, tc.alpha_censor);
                batch_sum = batch_sum.defined() ? add(batch_sum, loss) : loss;
            }
            Tensor batch_loss =
                mul_scalar(batch_sum, 1.0 / static_cast<double>(stop - start));
            const double loss_value = batch_loss.value();
            if (!std::isfinite(loss_value)) {
                throw std::runtime_error(
                    "non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(start / tc.batch_size) + ", first case " +
                    train_cases[order[start]].case_id);
            }
            epoch_loss_sum += loss_value * static_cast<double>(stop - start);
            backward(batch_loss);
            optimizer.step(model.parameters());
            zero_grads(model.parameters());
        }
        history.epoch_loss.push_back(epoch_loss_sum / static_cast<double>(order.size()));
    }
    return history;
}

// Eval-mode risks for a set of cases plus the concordance against their labels.
struct EvalResult {
    ConcordanceReport concordance;
    std::vector<double> risks;
};

inline EvalResult evaluate(const AplModel& model, std::span<const CaseRecord> cases,
                           const Preprocess& prep) {
    EvalResult res;
    res.risks.reserve(cases.size());
    std::vector<double> times;
    std::vector<bool> events;
    for (const auto& rec : cases) {
        auto fwd = model.forward(make_inputs(rec, prep), /*train_mode=*/false);
        res.risks.push_back(risk_score(fwd.logits.data()));
        times.push_back(rec.survival_months);
        events.push_back(rec.event);
    }
    res.concordance = c_index(res.risks, times, events);
    return res;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldResult {
    std::size_t fold = 0;
    bool c_defined = false;
    double c_index = 0.0;
    std::size_t n_test = 0;
    std::size_t n_train = 0;
    double final_train_loss = 0.0;
    std::vector<double> bin_edges;
};

struct FoldReport {
    std::vector<FoldResult> folds;
    double mean_c_index = 0.0;
    double std_c_index = 0.0;  // population std over the defined fold values
    Json config_echo;
    double wall_seconds = 0.0;  // console-only; not serialized into the report files
};

namespace detail {

inline void aggregate(FoldReport& report) {
    std::vector<double> cs;
    for (const auto& f : report.folds) {
        if (f.c_defined) cs.push_back(f.c_index);
    }
    if (cs.empty()) {
        report.mean_c_index = std::numeric_limits<double>::quiet_NaN();
        report.std_c_index = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    double mean = 0.0;
    for (double c : cs) mean += c;
    mean /= static_cast<double>(cs.size());
    double var = 0.0;
    for (double c : cs) var += (c - mean) * (c - mean);
    var /= static_cast<double>(cs.size());
    report.mean_c_index = mean;
    report.std_c_index = std::sqrt(var);
}

}  // namespace detail

struct CvOutputOptions {
    std::filesystem::path out_dir;  // empty: nothing written
    bool write_checkpoints = true;
    bool write_predictions = true;
    std::string prefix;  // prepended to fold artifact names (ablation rows)
};

// Per-fold stream seed: decorrelates model init, shuffling and dropout across
// folds while keeping everything reproducible from one config seed.
inline std::uint64_t fold_seed(std::uint64_t base, std::size_t fold) {
    return mix64(base ^ mix64(0xF01D5EEDull + fold));
}

// One cross-validation fold end to end: fit preprocessing on the training
// split only, train, evaluate on the held-out split.
inline FoldResult run_fold(const Cohort& cohort, const FoldAssignment& folds, std::size_t k,
                           const AplConfig& mc, const TrainConfig& tc,
                           const CvOutputOptions& out) {
    std::vector<CaseRecord> train_cases, test_cases;
    for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
        (folds.fold[i] == k ? test_cases : train_cases).push_back(cohort.cases[i]);
    }
    if (train_cases.empty() || test_cases.empty()) {
        throw std::runtime_error("fold " + std::to_string(k) + " has an empty split");
    }

    const Preprocess prep = fit_preprocess(train_cases, mc.n_bins);
    assign_bins(train_cases, prep.bin_edges);
    assign_bins(test_cases, prep.bin_edges);

    AplConfig fold_mc = mc;
    fold_mc.seed = fold_seed(mc.seed, k);
    AplModel model(fold_mc, cohort.pathway_gene_counts());
    const TrainHistory history =
        train_model(model, train_cases, prep, tc, fold_seed(tc.seed, k));
    const EvalResult eval = evaluate(model, test_cases, prep);

    FoldResult res;
    res.fold = k;
    res.c_defined = eval.concordance.defined;
    res.c_index = eval.concordance.c_index;
    res.n_test = test_cases.size();
    res.n_train = train_cases.size();
    res.final_train_loss = history.epoch_loss.back();
    res.bin_edges = prep.bin_edges;

    if (!out.out_dir.empty()) {
        if (out.write_checkpoints) {
            save_checkpoint(out.out_dir / (out.prefix + "fold_" + std::to_string(k) + ".aplc"),
                            model, cohort.pathways, prep);
        }
        if (out.write_predictions) {
            AtomicFile pred(out.out_dir /
                            (out.prefix + "predictions_fold_" + std::to_string(k) + ".csv"));
            pred.stream() << "case_id,risk,survival_months,event\n";
            for (std::size_t i = 0; i < test_cases.size(); ++i) {
                pred.stream() << test_cases[i].case_id << "," << fmt_double(eval.risks[i]) << ","
                              << fmt_double(test_cases[i].survival_months) << ","
                              << (test_cases[i].event ? 1 : 0) << "\n";
            }
            pred.commit();
        }
    }
    return res;
}

inline Json report_to_json(const FoldReport& report) {
    Json folds = Json::array();
    for (const auto& f : report.folds) {
        Json jf{{"fold", f.fold},
                {"n_test", f.n_test},
                {"n_train", f.n_train},
                {"final_train_loss", f.final_train_loss},
                {"bin_edges", f.bin_edges}};
        if (f.c_defined) {
            jf["c_index"] = f.c_index;
        } else {
            jf["c_index"] = nullptr;
        }
        folds.push_back(std::move(jf));
    }
    return Json{{"config", report.config_echo},
                {"folds", folds},
                {"mean_c_index", report.mean_c_index},
                {"std_c_index", report.std_c_index}};
}

inline void write_fold_report(const FoldReport& report, const std::filesystem::path& out_dir,
                              const std::string& prefix = "") {
    {
        AtomicFile json_file(out_dir / (prefix + "report.json"));
        json_file.stream() << canonical_json(report_to_json(report)) << "\n";
        json_file.commit();
    }
    AtomicFile csv(out_dir / (prefix + "report.csv"));
    csv.stream() << "fold,n_test,c_index\n";
    for (const auto& f : report.folds) {
        csv.stream() << f.fold << "," << f.n_test << ","
                     << (f.c_defined ? fmt_double(f.c_index) : "undefined") << "\n";
    }
    csv.stream() << "mean,," << fmt_double(report.mean_c_index) << "\n";
    csv.stream() << "std,," << fmt_double(report.std_c_index) << "\n";
    csv.commit();
}

// K-fold cross-validation. Folds are independent (own model, own tape) and
// may run on separate threads; results are aggregated in fold order, so the
// report does not depend on scheduling.
inline FoldReport run_cv(const Cohort& cohort, const AplConfig& mc, const TrainConfig& tc,
                         const CvOutputOptions& out = {}) {
    mc.validate();
    tc.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const FoldAssignment folds = make_folds(cohort.cases, tc.folds, tc.seed);

    FoldReport report;
    report.folds.resize(tc.folds);
    std::size_t n_threads = tc.threads;
    if (n_threads == 0) {
        const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
        n_threads = std::min<std::size_t>(tc.folds, hw);
    }
    if (n_threads <= 1) {
        for (std::size_t k = 0; k < tc.folds; ++k) {
            report.folds[k] = run_fold(cohort, folds, k, mc, tc, out);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(tc.folds);
        std::atomic<std::size_t> next{0};
        for (std::size_t t = 0; t < n_threads; ++t) {
            pool.emplace_back([&]() {
                for (std::size_t k = next.fetch_add(1); k < tc.folds; k = next.fetch_add(1)) {
                    try {
                        report.folds[k] = run_fold(cohort, folds, k, mc, tc, out);
                    } catch (...) {
                        errors[k] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    detail::aggregate(report);
    report.config_echo = Json{{"model", to_json(mc)}, {"train", to_json(tc)}};
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out.out_dir.empty()) {
        write_fold_report(report, out.out_dir, out.prefix);
    }
    return report;
}

inline Json report_to_json(const FoldReport& report) {
    Json folds = Json::array();
    for (const auto& f : report.folds) {
        Json jf{{"fold", f.fold},
                {"n_test", f.n_test},
                {"n_train", f.n_train},
                {"final_train_loss", f.final_train_loss},
                {"bin_edges", f.bin_edges}};
        if (f.c_defined) {
            jf["c_index"] = f.c_index;
        } else {
            jf["c_index"] = nullptr;
        }
        folds.push_back(std::move(jf));
    }
    return Json{{"config", report.config_echo},
                {"folds", folds},
                {"mean_c_index", report.mean_c_index},
                {"std_c_index", report.std_c_index}};
}

inline void write_fold_report(const FoldReport& report, const std::filesystem::path& out_dir,
                              const std::string& prefix = "") {
    {
        AtomicFile json_file(out_dir / (prefix + "report.json"));
        json_file.stream() << canonical_json(report_to_json(report)) << "\n";
        json_file.commit();
    }
    AtomicFile csv(out_dir / (prefix + "report.csv"));
    csv.stream() << "fold,n_test,c_index\n";
    for (const auto& f : report.folds) {
        csv.stream() << f.fold << "," << f.n_test << ","
                     << (f.c_defined ? fmt_double(f.c_index) : "undefined") << "\n";
    }
    csv.stream() << "mean,," << fmt_double(report.mean_c_index) << "\n";
    csv.stream() << "std,," << fmt_double(report.std_c_index) << "\n";
    csv.commit();
}

// The four Table-2 rows, trained with shared folds and seeds: baseline
// concatenation, +histology prototypes, +genomic prototypes, +self-attention.
inline std::vector<AblationConfig> ablation_rows() {
    return {{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
}

struct AblationReport {
    std::vector<FoldReport> rows;  // one per ablation row, Table-2 order
};

inline AblationReport run_ablation(const Cohort& cohort, const AplConfig& mc,
                                   const TrainConfig& tc, const CvOutputOptions& out = {}) {
    AblationReport rep;
    const auto rows = ablation_rows();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        AplConfig row_mc = mc;
        row_mc.ablation = rows[r];
        CvOutputOptions row_out = out;
        if (!out.out_dir.empty()) row_out.prefix = out.prefix + "row" + std::to_string(r) + "_";
        rep.rows.push_back(run_cv(cohort, row_mc, tc, row_out));
    }
    if (!out.out_dir.empty()) {
        AtomicFile csv(out.out_dir / (out.prefix + "ablation.csv"));
        csv.stream() << "hist,geno,self_attn";
        for (std::size_t k = 0; k < tc.folds; ++k) csv.stream() << ",fold_" << k;
        csv.stream() << ",mean,std\n";
        for (std::size_t r = 0; r < rows.size(); ++r) {
            csv.stream() << (rows[r].use_hist_prototypes ? 1 : 0) << ","
                         << (rows[r].use_gene_prototypes ? 1 : 0) << ","
                         << (rows[r].use_self_attention ? 1 : 0);
            for (const auto& f : rep.rows[r].folds) {
                csv.stream() << "," << (f.c_defined ? fmt_double(f.c_index) : "undefined");
            }
            csv.stream() << "," << fmt_double(rep.rows[r].mean_c_index) << ","
                         << fmt_double(rep.rows[r].std_c_index) << "\n";
        }
        csv.commit();
    }
    return rep;
}

}  // namespace apl
