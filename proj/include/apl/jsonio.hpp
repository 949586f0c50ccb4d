#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "apl/model.hpp"

namespace apl {

using Json = nlohmann::json;

// Schema guard: every present key must be in the allowed list.
inline void reject_unknown_keys(const Json& obj, std::initializer_list<const char*> allowed,
                                const std::string& context) {
    if (!obj.is_object()) throw std::runtime_error(context + ": expected a JSON object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw std::runtime_error(context + ": unknown key '" + key + "'");
    }
}

template <class T>
T json_get_or(const Json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const Json::exception&) {
        throw std::runtime_error(std::string("config key '") + key + "' has the wrong type");
    }
}

inline Json to_json(const AblationConfig& a) {
    return Json{{"use_hist_prototypes", a.use_hist_prototypes},
                {"use_gene_prototypes", a.use_gene_prototypes},
                {"use_self_attention", a.use_self_attention}};
}

inline AblationConfig ablation_from_json(const Json& j, const std::string& context) {
    reject_unknown_keys(j, {"use_hist_prototypes", "use_gene_prototypes", "use_self_attention"},
                        context);
    AblationConfig a;
    a.use_hist_prototypes = json_get_or(j, "use_hist_prototypes", a.use_hist_prototypes);
    a.use_gene_prototypes = json_get_or(j, "use_gene_prototypes", a.use_gene_prototypes);
    a.use_self_attention = json_get_or(j, "use_self_attention", a.use_self_attention);
    return a;
}

inline Json to_json(const AplConfig& c) {
    return Json{{"d_in", c.d_in},
                {"d_model", c.d_model},
                {"snn_hidden", c.snn_hidden},
                {"n_hist_queries", c.n_hist_queries},
                {"n_gene_queries", c.n_gene_queries},
                {"n_bins", c.n_bins},
                {"ablation", to_json(c.ablation)},
                {"self_attention_residual", c.self_attention_residual},
                {"seed", c.seed}};
}

inline AplConfig apl_config_from_json(const Json& j, const std::string& context) {
    reject_unknown_keys(j,
                        {"d_in", "d_model", "snn_hidden", "n_hist_queries", "n_gene_queries",
                         "n_bins", "ablation", "self_attention_residual", "seed"},
                        context);
    AplConfig c;
    c.d_in = json_get_or<std::size_t>(j, "d_in", c.d_in);
    c.d_model = json_get_or<std::size_t>(j, "d_model", c.d_model);
    c.snn_hidden = json_get_or<std::size_t>(j, "snn_hidden", c.snn_hidden);
    c.n_hist_queries = json_get_or<std::size_t>(j, "n_hist_queries", c.n_hist_queries);
    c.n_gene_queries = json_get_or<std::size_t>(j, "n_gene_queries", c.n_gene_queries);
    c.n_bins = json_get_or<std::size_t>(j, "n_bins", c.n_bins);
    if (j.contains("ablation")) {
        c.ablation = ablation_from_json(j.at("ablation"), context + ".ablation");
    }
    c.self_attention_residual =
        json_get_or(j, "self_attention_residual", c.self_attention_residual);
    c.seed = json_get_or<std::uint64_t>(j, "seed", c.seed);
    c.validate();
    return c;
}

// Canonical text form: sorted keys (nlohmann objects iterate sorted), no
// whitespace, UTF-8.
inline std::string canonical_json(const Json& j) { return j.dump(); }

}  // namespace apl
