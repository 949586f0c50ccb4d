#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "apl/io_util.hpp"
#include "apl/rng.hpp"

namespace apl {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct PathwayDefinition {
    std::string name;
    std::vector<std::string> gene_ids;
};

// One patient: a variable-size bag of patch embeddings, one expression vector
// per pathway, and the survival label.
struct CaseRecord {
    std::string case_id;
    std::size_t n_patches = 0;
    std::size_t d_in = 0;
    std::vector<double> patch_embeddings;               // row-major n_patches x d_in
    std::vector<std::vector<double>> pathway_inputs;    // one vector per pathway
    double survival_months = 0.0;
    bool event = false;
    int bin = -1;  // set by discretize_survival / assign_bins
};

struct ManifestEntry {
    std::string case_id;
    std::filesystem::path embedding_path;
    double survival_months;
    bool event;
};

// Parsed manifest plus the sibling expression matrix and pathway file. The
// manifest CSV lives in a directory that also contains expression.csv and
// pathways.tsv.
struct CohortManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path expression_path;
    std::filesystem::path pathway_path;
};

struct Cohort {
    std::vector<CaseRecord> cases;
    // Pathways with gene lists reduced to the genes actually present in the
    // expression matrix (the vectors in pathway_inputs align with these).
    std::vector<PathwayDefinition> pathways;

    std::vector<std::size_t> pathway_gene_counts() const {
        std::vector<std::size_t> out;
        out.reserve(pathways.size());
        for (const auto& p : pathways) out.push_back(p.gene_ids.size());
        return out;
    }
};

struct FoldAssignment {
    std::size_t n_folds = 0;
    std::vector<std::size_t> fold;  // per-case fold index in [0, n_folds)
};

// ---------------------------------------------------------------------------
// Patch-embedding files: "PEMB", version u32 LE, n_patches u32 LE, dim u32 LE,
// then n_patches*dim float32 LE values, row-major.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

inline void write_patch_embeddings(const std::filesystem::path& path,
                                   std::span<const double> values, std::size_t n_patches,
                                   std::size_t dim) {
    if (values.size() != n_patches * dim) {
        throw std::invalid_argument("write_patch_embeddings: value count mismatch");
    }
    AtomicFile file(path, /*binary=*/true);
    file.stream().write("PEMB", 4);
    write_u32_le(file.stream(), kEmbeddingFormatVersion);
    write_u32_le(file.stream(), static_cast<std::uint32_t>(n_patches));
    write_u32_le(file.stream(), static_cast<std::uint32_t>(dim));
    for (double v : values) write_f32_le(file.stream(), static_cast<float>(v));
    file.commit();
}

// Reads one embedding file, promoting float32 to float64.
inline void read_patch_embeddings(const std::filesystem::path& path, std::vector<double>& out,
                                  std::size_t& n_patches, std::size_t& dim) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open embedding file " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "PEMB") {
        throw std::runtime_error("bad magic in embedding file " + path.string());
    }
    const std::uint32_t version = read_u32_le(is);
    if (version != kEmbeddingFormatVersion) {
        throw std::runtime_error("unsupported embedding format version " +
                                 std::to_string(version) + " in " + path.string());
    }
    n_patches = read_u32_le(is);
    dim = read_u32_le(is);
    if (n_patches == 0 || dim == 0) {
        throw std::runtime_error("embedding file " + path.string() + " has empty dimensions");
    }
    out.resize(n_patches * dim);
    for (double& v : out) v = static_cast<double>(read_f32_le(is));
    char extra;
    if (is.read(&extra, 1)) {
        throw std::runtime_error("trailing bytes in embedding file " + path.string());
    }
}

// ---------------------------------------------------------------------------
// Text inputs
// ---------------------------------------------------------------------------

// Manifest CSV: header case_id,embedding_path,survival_months,event.
// expression.csv and pathways.tsv are expected next to it.
inline CohortManifest read_manifest(const std::filesystem::path& manifest_path) {
    auto rows = read_csv(manifest_path);
    if (rows.empty() || rows[0] != std::vector<std::string>{"case_id", "embedding_path",
                                                            "survival_months", "event"}) {
        throw std::runtime_error("manifest " + manifest_path.string() +
                                 ": expected header case_id,embedding_path,survival_months,event");
    }
    CohortManifest m;
    const auto dir = manifest_path.parent_path();
    std::set<std::string> ids;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != 4) {
            throw std::runtime_error("manifest " + manifest_path.string() + " line " +
                                     std::to_string(r + 1) + ": expected 4 fields");
        }
        ManifestEntry e;
        e.case_id = rows[r][0];
        e.embedding_path = dir / rows[r][1];
        e.survival_months = parse_double(rows[r][2], "manifest survival_months");
        if (rows[r][3] != "0" && rows[r][3] != "1") {
            throw std::runtime_error("manifest " + manifest_path.string() + " line " +
                                     std::to_string(r + 1) + ": event must be 0 or 1");
        }
        e.event = rows[r][3] == "1";
        if (e.survival_months < 0.0) {
            throw std::runtime_error("manifest case " + e.case_id + ": negative survival time");
        }
        if (!ids.insert(e.case_id).second) {
            throw std::runtime_error("manifest: duplicate case_id " + e.case_id);
        }
        m.entries.push_back(std::move(e));
    }
    m.expression_path = dir / "expression.csv";
    m.pathway_path = dir / "pathways.tsv";
    for (const auto& p : {manifest_path, m.expression_path, m.pathway_path}) {
        if (!std::filesystem::exists(p)) {
            throw std::runtime_error("missing cohort file " + p.string());
        }
    }
    for (const auto& e : m.entries) {
        if (!std::filesystem::exists(e.embedding_path)) {
            throw std::runtime_error("missing embedding file " + e.embedding_path.string() +
                                     " for case " + e.case_id);
        }
    }
    return m;
}

// Expression matrix CSV: first column gene_id, one column per case_id.
struct ExpressionMatrix {
    std::vector<std::string> case_ids;
    std::unordered_map<std::string, std::size_t> case_col;
    std::unordered_map<std::string, std::vector<double>> gene_rows;  // gene -> per-case values
};

inline ExpressionMatrix read_expression_matrix(const std::filesystem::path& path) {
    auto rows = read_csv(path);
    if (rows.empty() || rows[0].empty() || rows[0][0] != "gene_id") {
        throw std::runtime_error("expression matrix " + path.string() +
                                 ": first header column must be gene_id");
    }
    ExpressionMatrix m;
    for (std::size_t c = 1; c < rows[0].size(); ++c) {
        m.case_col[rows[0][c]] = c - 1;
        m.case_ids.push_back(rows[0][c]);
    }
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) {
            throw std::runtime_error("expression matrix " + path.string() + " line " +
                                     std::to_string(r + 1) + ": field count mismatch");
        }
        std::vector<double> vals(rows[r].size() - 1);
        for (std::size_t c = 1; c < rows[r].size(); ++c) {
            vals[c - 1] = parse_double(rows[r][c], "expression value for gene " + rows[r][0]);
        }
        if (!m.gene_rows.emplace(rows[r][0], std::move(vals)).second) {
            throw std::runtime_error("expression matrix: duplicate gene " + rows[r][0]);
        }
    }
    return m;
}

// Pathway file: one line per pathway, "name<TAB>gene1,gene2,...".
inline std::vector<PathwayDefinition> read_pathways(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open pathway file " + path.string());
    std::vector<PathwayDefinition> out;
    std::set<std::string> names;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw std::runtime_error("pathway file " + path.string() + " line " +
                                     std::to_string(lineno) + ": missing tab separator");
        }
        PathwayDefinition def;
        def.name = line.substr(0, tab);
        for (const auto& g : split_csv_line(line.substr(tab + 1))) {
            if (!g.empty()) def.gene_ids.push_back(g);
        }
        if (def.gene_ids.empty()) {
            throw std::runtime_error("pathway " + def.name + " has an empty gene list");
        }
        if (!names.insert(def.name).second) {
            throw std::runtime_error("duplicate pathway name " + def.name);
        }
        out.push_back(std::move(def));
    }
    if (out.empty()) throw std::runtime_error("pathway file " + path.string() + " is empty");
    return out;
}

// ---------------------------------------------------------------------------
// Cohort assembly
// ---------------------------------------------------------------------------

// Loads a full cohort. Pathway gene lists are intersected with the expression
// matrix; genes without a matrix row are dropped with a warning, a pathway
// losing all genes is an error.
inline Cohort load_cohort(const std::filesystem::path& manifest_path,
                          std::ostream& warnings = std::cerr) {
    const CohortManifest manifest = read_manifest(manifest_path);
    const ExpressionMatrix expr = read_expression_matrix(manifest.expression_path);
    const auto raw_pathways = read_pathways(manifest.pathway_path);

    Cohort cohort;
    for (const auto& def : raw_pathways) {
        PathwayDefinition used;
        used.name = def.name;
        for (const auto& g : def.gene_ids) {
            if (expr.gene_rows.count(g)) {
                used.gene_ids.push_back(g);
            } else {
                warnings << "warning: pathway " << def.name << ": gene " << g
                         << " absent from expression matrix, dropped\n";
            }
        }
        if (used.gene_ids.empty()) {
            throw std::runtime_error("pathway " + def.name +
                                     " has no genes available in the expression matrix");
        }
        cohort.pathways.push_back(std::move(used));
    }

    std::size_t cohort_dim = 0;
    for (const auto& entry : manifest.entries) {
        const auto col_it = expr.case_col.find(entry.case_id);
        if (col_it == expr.case_col.end()) {
            throw std::runtime_error("case " + entry.case_id +
                                     " has no column in the expression matrix");
        }
        CaseRecord rec;
        rec.case_id = entry.case_id;
        rec.survival_months = entry.survival_months;
        rec.event = entry.event;
        read_patch_embeddings(entry.embedding_path, rec.patch_embeddings, rec.n_patches,
                              rec.d_in);
        if (cohort_dim == 0) {
            cohort_dim = rec.d_in;
        } else if (rec.d_in != cohort_dim) {
            throw std::runtime_error("embedding dimension mismatch for case " + entry.case_id +
                                     ": " + std::to_string(rec.d_in) + " vs " +
                                     std::to_string(cohort_dim));
        }
        rec.pathway_inputs.reserve(cohort.pathways.size());
        for (const auto& pw : cohort.pathways) {
            std::vector<double> v;
            v.reserve(pw.gene_ids.size());
            for (const auto& g : pw.gene_ids) {
                v.push_back(expr.gene_rows.at(g)[col_it->second]);
            }
            rec.pathway_inputs.push_back(std::move(v));
        }
        cohort.cases.push_back(std::move(rec));
    }
    if (cohort.cases.empty()) throw std::runtime_error("cohort has no cases");
    return cohort;
}

// ---------------------------------------------------------------------------
// Survival-time discretization
// ---------------------------------------------------------------------------

// Interior bin edges at the B-quantiles of the uncensored survival times
// (midpoints between the straddling order statistics). bin(t) = number of
// edges <= t, which is monotone in t.
inline std::vector<double> fit_bin_edges(std::span<const CaseRecord> cases, std::size_t n_bins) {
    if (n_bins < 1) throw std::invalid_argument("fit_bin_edges: need at least 1 bin");
    std::vector<double> times;
    for (const auto& c : cases) {
        if (c.event) times.push_back(c.survival_months);
    }
    std::sort(times.begin(), times.end());
    std::size_t distinct = times.empty() ? 0 : 1;
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (times[i] != times[i - 1]) ++distinct;
    }
    if (distinct < n_bins) {
        throw std::runtime_error(
            "discretize_survival: only " + std::to_string(distinct) +
            " distinct uncensored survival times for " + std::to_string(n_bins) +
            " bins; use a smaller bin count");
    }
    std::vector<double> edges;
    edges.reserve(n_bins - 1);
    const std::size_t m = times.size();
    for (std::size_t b = 1; b < n_bins; ++b) {
        const std::size_t hi = b * m / n_bins;
        const std::size_t lo = hi - 1;
        edges.push_back(0.5 * (times[lo] + times[hi]));
    }
    return edges;
}

inline int bin_of(double time, std::span<const double> edges) {
    int b = 0;
    for (double e : edges) {
        if (e <= time) ++b;
    }
    return b;
}

inline void assign_bins(std::span<CaseRecord> cases, std::span<const double> edges) {
    for (auto& c : cases) c.bin = bin_of(c.survival_months, edges);
}

// Fits edges on `cases` and assigns every case (censored cases are binned by
// their censoring time). Returns the edges for reporting.
inline std::vector<double> discretize_survival(std::span<CaseRecord> cases, std::size_t n_bins) {
    auto edges = fit_bin_edges(cases, n_bins);
    assign_bins(cases, edges);
    return edges;
}

// ---------------------------------------------------------------------------
// Per-fold preprocessing state (always fit on the training split only)
// ---------------------------------------------------------------------------

// Bin edges plus per-gene z-scoring statistics for the pathway vectors.
// Evaluation reuses the training-split statistics.
struct Preprocess {
    std::vector<double> bin_edges;
    std::vector<std::vector<double>> gene_mean;    // per pathway, per gene
    std::vector<std::vector<double>> gene_stddev;  // population std; 1 for constant genes
};

inline Preprocess fit_preprocess(std::span<const CaseRecord> train_cases, std::size_t n_bins) {
    if (train_cases.empty()) throw std::invalid_argument("fit_preprocess: empty training split");
    Preprocess prep;
    prep.bin_edges = fit_bin_edges(train_cases, n_bins);
    const std::size_t n_pathways = train_cases[0].pathway_inputs.size();
    const double n = static_cast<double>(train_cases.size());
    prep.gene_mean.resize(n_pathways);
    prep.gene_stddev.resize(n_pathways);
    for (std::size_t p = 0; p < n_pathways; ++p) {
        const std::size_t g = train_cases[0].pathway_inputs[p].size();
        prep.gene_mean[p].assign(g, 0.0);
        prep.gene_stddev[p].assign(g, 0.0);
        for (const auto& c : train_cases) {
            for (std::size_t i = 0; i < g; ++i) prep.gene_mean[p][i] += c.pathway_inputs[p][i];
        }
        for (std::size_t i = 0; i < g; ++i) prep.gene_mean[p][i] /= n;
        for (const auto& c : train_cases) {
            for (std::size_t i = 0; i < g; ++i) {
                const double d = c.pathway_inputs[p][i] - prep.gene_mean[p][i];
                prep.gene_stddev[p][i] += d * d;
            }
        }
        for (std::size_t i = 0; i < g; ++i) {
            const double sd = std::sqrt(prep.gene_stddev[p][i] / n);
            prep.gene_stddev[p][i] = sd > 1e-12 ? sd : 1.0;
        }
    }
    return prep;
}

inline std::vector<double> normalize_pathway(const Preprocess& prep, std::size_t pathway,
                                             const std::vector<double>& values) {
    const auto& mean = prep.gene_mean.at(pathway);
    const auto& sd = prep.gene_stddev.at(pathway);
    if (values.size() != mean.size()) {
        throw std::invalid_argument("normalize_pathway: pathway " + std::to_string(pathway) +
                                    " length mismatch");
    }
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean[i]) / sd[i];
    return out;
}

// ---------------------------------------------------------------------------
// Cross-validation folds
// ---------------------------------------------------------------------------

// Shuffled assignment stratified by event indicator: events and censored
// cases are dealt round-robin (one running counter), so fold sizes and
// per-fold event counts each differ by at most one.
inline FoldAssignment make_folds(const std::vector<bool>& events, std::size_t n_folds,
                                 std::uint64_t seed) {
    const std::size_t n_cases = events.size();
    if (n_cases < n_folds) {
        throw std::runtime_error("make_folds: " + std::to_string(n_cases) + " cases for " +
                                 std::to_string(n_folds) + " folds");
    }
    if (n_folds < 2) throw std::invalid_argument("make_folds: need at least 2 folds");
    std::vector<std::size_t> event_idx, censored_idx;
    for (std::size_t i = 0; i < n_cases; ++i) {
        (events[i] ? event_idx : censored_idx).push_back(i);
    }
    Rng rng(seed);
    rng.shuffle(event_idx);
    rng.shuffle(censored_idx);
    FoldAssignment fa;
    fa.n_folds = n_folds;
    fa.fold.resize(n_cases);
    std::size_t counter = 0;
    for (std::size_t i : event_idx) fa.fold[i] = counter++ % n_folds;
    for (std::size_t i : censored_idx) fa.fold[i] = counter++ % n_folds;
    return fa;
}

inline FoldAssignment make_folds(std::span<const CaseRecord> cases, std::size_t n_folds,
                                 std::uint64_t seed) {
    std::vector<bool> events;
    events.reserve(cases.size());
    for (const auto& c : cases) events.push_back(c.event);
    return make_folds(events, n_folds, seed);
}

}  // namespace apl
