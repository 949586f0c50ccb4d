#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/data.hpp"
#include "apl/io_util.hpp"
#include "apl/rng.hpp"
#include "apl/survival.hpp"

namespace apl {

// Planted-signal cohort: each case's latent risk is a weighted sum of (a) the
// fraction of its patches drawn from a designated malignant embedding cluster
// and (b) the expression level of a designated pathway subset. Survival times
// are exponential with rate increasing in latent risk.
//
// Benign patches are drawn from a small per-case palette out of a large bank
// of centers, so the cohort-level benign composition noise spans the whole
// embedding space: reading the malignant fraction out of the mean embedding
// is noisy, while selecting malignant-cluster patches is not.
struct SyntheticSpec {
    std::size_t n_cases = 200;
    std::size_t patches_min = 16;
    std::size_t patches_max = 48;
    std::size_t d_in = 32;
    std::size_t n_pathways = 10;
    std::size_t genes_min = 6;
    std::size_t genes_max = 16;
    double signal_strength = 1.0;
    double censor_rate = 0.25;
    std::uint64_t seed = 1;

    // planted-structure constants
    std::size_t n_risk_pathways = 2;
    std::size_t n_benign_centers = 48;
    std::size_t benign_per_case = 4;
    double patch_noise = 0.3;
    double gene_noise = 0.5;
    double hazard_slope = 3.0;       // log-hazard = slope * signal * latent risk
    double base_median_months = 24.0;

    void validate() const {
        if (n_cases < 2) throw std::invalid_argument("synthetic: need at least 2 cases");
        if (patches_min < 1 || patches_min > patches_max) {
            throw std::invalid_argument("synthetic: bad patch range");
        }
        if (genes_min < 1 || genes_min > genes_max) {
            throw std::invalid_argument("synthetic: bad gene range");
        }
        if (d_in < 1 || n_pathways < 1) throw std::invalid_argument("synthetic: bad sizes");
        if (signal_strength < 0.0) throw std::invalid_argument("synthetic: negative signal");
        if (censor_rate < 0.0 || censor_rate >= 1.0) {
            throw std::invalid_argument("synthetic: censor rate must be in [0,1)");
        }
        if (n_risk_pathways > n_pathways) {
            throw std::invalid_argument("synthetic: more risk pathways than pathways");
        }
    }
};

// Ground truth kept next to the generated files so the generator can be
// scored against its own latent risk.
struct SyntheticTruth {
    std::vector<std::string> case_ids;
    std::vector<double> latent_risk;
    std::vector<double> malignant_fraction;
    std::vector<double> gene_score;
    std::vector<std::vector<bool>> patch_malignant;
    double oracle_c_index = 0.0;
};

namespace detail {

inline std::string zero_pad(std::size_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

inline void standardize(std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double sd = std::sqrt(std::max(var, 1e-24));
    for (double& x : v) x = (x - mean) / sd;
}

}  // namespace detail

// Generates the cohort files under out_dir (manifest.csv, expression.csv,
// pathways.tsv, emb/*.pemb, truth/*.csv) and returns the ground truth.
// out_dir must not already exist; the tree is staged and renamed into place.
inline SyntheticTruth generate_synthetic(const SyntheticSpec& spec,
                                         const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    spec.validate();
    if (fs::exists(out_dir)) {
        throw std::runtime_error("output directory " + out_dir.string() + " already exists");
    }

    Rng rng(spec.seed);

    // cohort-level structure
    std::vector<std::size_t> gene_counts(spec.n_pathways);
    for (auto& g : gene_counts) {
        g = static_cast<std::size_t>(
            rng.range(static_cast<std::int64_t>(spec.genes_min),
                      static_cast<std::int64_t>(spec.genes_max)));
    }
    std::vector<double> c_mal(spec.d_in);
    for (double& v : c_mal) v = rng.normal();
    std::vector<std::vector<double>> c_ben(spec.n_benign_centers,
                                           std::vector<double>(spec.d_in));
    for (auto& c : c_ben) {
        for (double& v : c) v = rng.normal();
    }

    // per-case draws
    SyntheticTruth truth;
    truth.case_ids.reserve(spec.n_cases);
    std::vector<std::vector<double>> embeddings(spec.n_cases);
    std::vector<std::size_t> patch_counts(spec.n_cases);
    std::vector<std::vector<std::vector<double>>> expressions(spec.n_cases);
    for (std::size_t i = 0; i < spec.n_cases; ++i) {
        truth.case_ids.push_back("case_" + detail::zero_pad(i, 4));
        const double rho = rng.uniform(0.05, 0.95);
        const std::size_t n_p = static_cast<std::size_t>(
            rng.range(static_cast<std::int64_t>(spec.patches_min),
                      static_cast<std::int64_t>(spec.patches_max)));
        patch_counts[i] = n_p;
        std::vector<std::size_t> palette(spec.benign_per_case);
        for (auto& p : palette) p = rng.index(spec.n_benign_centers);
        std::vector<bool> flags(n_p);
        std::vector<double>& emb = embeddings[i];
        emb.resize(n_p * spec.d_in);
        std::size_t n_mal = 0;
        for (std::size_t j = 0; j < n_p; ++j) {
            const bool malignant = rng.bernoulli(rho);
            flags[j] = malignant;
            n_mal += malignant ? 1 : 0;
            const std::vector<double>& center =
                malignant ? c_mal : c_ben[palette[rng.index(spec.benign_per_case)]];
            for (std::size_t d = 0; d < spec.d_in; ++d) {
                double v = center[d] + spec.patch_noise * rng.normal();
                // embeddings are stored as float32; keep the in-memory truth
                // identical to what a loader will see
                emb[j * spec.d_in + d] = static_cast<double>(static_cast<float>(v));
            }
        }
        truth.patch_malignant.push_back(std::move(flags));
        truth.malignant_fraction.push_back(static_cast<double>(n_mal) /
                                           static_cast<double>(n_p));

        const double s = rng.normal();
        truth.gene_score.push_back(s);
        auto& expr = expressions[i];
        expr.resize(spec.n_pathways);
        for (std::size_t p = 0; p < spec.n_pathways; ++p) {
            expr[p].resize(gene_counts[p]);
            for (auto& v : expr[p]) {
                v = p < spec.n_risk_pathways ? s + spec.gene_noise * rng.normal()
                                             : rng.normal();
            }
        }
    }

    // latent risk and survival labels
    std::vector<double> zf = truth.malignant_fraction;
    std::vector<double> zs = truth.gene_score;
    detail::standardize(zf);
    detail::standardize(zs);
    truth.latent_risk.resize(spec.n_cases);
    for (std::size_t i = 0; i < spec.n_cases; ++i) {
        truth.latent_risk[i] = 0.5 * (zf[i] + zs[i]);
    }
    const double lam0 = std::log(2.0) / spec.base_median_months;
    std::vector<double> months(spec.n_cases);
    std::vector<bool> events(spec.n_cases);
    for (std::size_t i = 0; i < spec.n_cases; ++i) {
        const double lam =
            lam0 * std::exp(spec.hazard_slope * spec.signal_strength * truth.latent_risk[i]);
        const double t_event = rng.exponential(lam);
        const bool censored = rng.bernoulli(spec.censor_rate);
        events[i] = !censored;
        months[i] = censored ? t_event * rng.uniform() : t_event;
    }

    // stage the tree, then rename into place
    const fs::path stage = out_dir.string() + ".staging";
    fs::remove_all(stage);
    fs::create_directories(stage / "emb");
    fs::create_directories(stage / "truth");

    {
        AtomicFile manifest(stage / "manifest.csv");
        manifest.stream() << "case_id,embedding_path,survival_months,event\n";
        for (std::size_t i = 0; i < spec.n_cases; ++i) {
            manifest.stream() << truth.case_ids[i] << ",emb/" << truth.case_ids[i] << ".pemb,"
                              << fmt_double(months[i]) << "," << (events[i] ? 1 : 0) << "\n";
        }
        manifest.commit();
    }
    for (std::size_t i = 0; i < spec.n_cases; ++i) {
        write_patch_embeddings(stage / "emb" / (truth.case_ids[i] + ".pemb"), embeddings[i],
                               patch_counts[i], spec.d_in);
    }
    {
        AtomicFile pw(stage / "pathways.tsv");
        std::size_t gene_offset = 0;
        for (std::size_t p = 0; p < spec.n_pathways; ++p) {
            pw.stream() << "pathway_" << detail::zero_pad(p, 2) << "\t";
            for (std::size_t g = 0; g < gene_counts[p]; ++g) {
                if (g) pw.stream() << ",";
                pw.stream() << "G" << detail::zero_pad(gene_offset + g, 4);
            }
            pw.stream() << "\n";
            gene_offset += gene_counts[p];
        }
        pw.commit();
    }
    {
        AtomicFile ex(stage / "expression.csv");
        ex.stream() << "gene_id";
        for (const auto& id : truth.case_ids) ex.stream() << "," << id;
        ex.stream() << "\n";
        std::size_t gene_offset = 0;
        for (std::size_t p = 0; p < spec.n_pathways; ++p) {
            for (std::size_t g = 0; g < gene_counts[p]; ++g) {
                ex.stream() << "G" << detail::zero_pad(gene_offset + g, 4);
                for (std::size_t i = 0; i < spec.n_cases; ++i) {
                    ex.stream() << "," << fmt_double(expressions[i][p][g]);
                }
                ex.stream() << "\n";
            }
            gene_offset += gene_counts[p];
        }
        ex.commit();
    }
    {
        AtomicFile tc(stage / "truth" / "cases.csv");
        tc.stream() << "case_id,latent_risk,malignant_fraction,gene_score\n";
        for (std::size_t i = 0; i < spec.n_cases; ++i) {
            tc.stream() << truth.case_ids[i] << "," << fmt_double(truth.latent_risk[i]) << ","
                        << fmt_double(truth.malignant_fraction[i]) << ","
                        << fmt_double(truth.gene_score[i]) << "\n";
        }
        tc.commit();
    }
    {
        AtomicFile pl(stage / "truth" / "patch_labels.csv");
        pl.stream() << "case_id,patch_index,malignant\n";
        for (std::size_t i = 0; i < spec.n_cases; ++i) {
            for (std::size_t j = 0; j < patch_counts[i]; ++j) {
                pl.stream() << truth.case_ids[i] << "," << j << ","
                            << (truth.patch_malignant[i][j] ? 1 : 0) << "\n";
            }
        }
        pl.commit();
    }
    fs::rename(stage, out_dir);

    const auto rep = c_index(truth.latent_risk, months, events);
    truth.oracle_c_index = rep.defined ? rep.c_index : std::numeric_limits<double>::quiet_NaN();
    return truth;
}

// Reads truth/cases.csv and truth/patch_labels.csv back from a generated
// cohort directory (used by the oracle self-check and interpretation tests).
struct LoadedTruth {
    std::vector<std::string> case_ids;
    std::vector<double> latent_risk;
    std::vector<double> malignant_fraction;
    std::vector<double> gene_score;
    std::unordered_map<std::string, std::vector<bool>> patch_malignant;
};

inline LoadedTruth load_truth(const std::filesystem::path& cohort_dir) {
    LoadedTruth t;
    auto rows = read_csv(cohort_dir / "truth" / "cases.csv");
    for (std::size_t r = 1; r < rows.size(); ++r) {
        t.case_ids.push_back(rows[r].at(0));
        t.latent_risk.push_back(parse_double(rows[r].at(1), "latent_risk"));
        t.malignant_fraction.push_back(parse_double(rows[r].at(2), "malignant_fraction"));
        t.gene_score.push_back(parse_double(rows[r].at(3), "gene_score"));
    }
    auto prows = read_csv(cohort_dir / "truth" / "patch_labels.csv");
    for (std::size_t r = 1; r < prows.size(); ++r) {
        auto& v = t.patch_malignant[prows[r].at(0)];
        const std::size_t idx = static_cast<std::size_t>(
            parse_double(prows[r].at(1), "patch_index"));
        if (v.size() <= idx) v.resize(idx + 1, false);
        v[idx] = prows[r].at(2) == "1";
    }
    return t;
}

}  // namespace apl
