#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/data.hpp"
#include "apl/io_util.hpp"
#include "apl/jsonio.hpp"
#include "apl/model.hpp"

namespace apl {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

// A trained model together with everything needed to reproduce its inputs:
// the pathway gene lists actually used and the training-split preprocessing.
struct Checkpoint {
    AplConfig config;
    std::vector<PathwayDefinition> pathways;
    Preprocess preprocess;
    std::unique_ptr<AplModel> model;
};

namespace detail {

inline Json preprocess_to_json(const Preprocess& p) {
    return Json{{"bin_edges", p.bin_edges},
                {"gene_mean", p.gene_mean},
                {"gene_std", p.gene_stddev}};
}

inline Preprocess preprocess_from_json(const Json& j) {
    reject_unknown_keys(j, {"bin_edges", "gene_mean", "gene_std"}, "checkpoint.preprocess");
    Preprocess p;
    p.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    p.gene_mean = j.at("gene_mean").get<std::vector<std::vector<double>>>();
    p.gene_stddev = j.at("gene_std").get<std::vector<std::vector<double>>>();
    return p;
}

}  // namespace detail

// Layout: magic "APLC", version u32 LE, config JSON (canonical UTF-8,
// u32 length prefix), then every parameter in registry order as
// u32 name length, name bytes, u32 rank, u32 extents, float64 LE values.
inline void save_checkpoint(const std::filesystem::path& path, const AplModel& model,
                            const std::vector<PathwayDefinition>& pathways,
                            const Preprocess& preprocess) {
    Json pw = Json::array();
    for (const auto& p : pathways) {
        pw.push_back(Json{{"name", p.name}, {"genes", p.gene_ids}});
    }
    const Json meta{{"model", to_json(model.config())},
                    {"pathways", pw},
                    {"preprocess", detail::preprocess_to_json(preprocess)}};
    const std::string meta_text = canonical_json(meta);

    AtomicFile file(path, /*binary=*/true);
    auto& os = file.stream();
    os.write("APLC", 4);
    write_u32_le(os, kCheckpointFormatVersion);
    write_u32_le(os, static_cast<std::uint32_t>(meta_text.size()));
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    for (const Parameter& p : model.parameters()) {
        write_u32_le(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u32_le(os, static_cast<std::uint32_t>(p.tensor.shape().size()));
        for (std::size_t e : p.tensor.shape()) {
            write_u32_le(os, static_cast<std::uint32_t>(e));
        }
        for (double v : p.tensor.data()) write_f64_le(os, v);
    }
    file.commit();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "APLC") {
        throw std::runtime_error("bad magic in checkpoint " + path.string());
    }
    const std::uint32_t version = read_u32_le(is);
    if (version != kCheckpointFormatVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t meta_len = read_u32_le(is);
    std::string meta_text(meta_len, '\0');
    is.read(meta_text.data(), meta_len);
    if (!is) throw std::runtime_error("truncated checkpoint metadata in " + path.string());
    Json meta;
    try {
        meta = Json::parse(meta_text);
    } catch (const Json::exception& e) {
        throw std::runtime_error("invalid checkpoint metadata: " + std::string(e.what()));
    }
    reject_unknown_keys(meta, {"model", "pathways", "preprocess"}, "checkpoint");

    Checkpoint ckpt;
    ckpt.config = apl_config_from_json(meta.at("model"), "checkpoint.model");
    for (const auto& pj : meta.at("pathways")) {
        reject_unknown_keys(pj, {"name", "genes"}, "checkpoint.pathways[]");
        PathwayDefinition def;
        def.name = pj.at("name").get<std::string>();
        def.gene_ids = pj.at("genes").get<std::vector<std::string>>();
        ckpt.pathways.push_back(std::move(def));
    }
    ckpt.preprocess = detail::preprocess_from_json(meta.at("preprocess"));

    std::vector<std::size_t> gene_counts;
    for (const auto& p : ckpt.pathways) gene_counts.push_back(p.gene_ids.size());
    ckpt.model = std::make_unique<AplModel>(ckpt.config, gene_counts);

    for (Parameter& p : ckpt.model->parameters()) {
        const std::uint32_t name_len = read_u32_le(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("truncated checkpoint at parameter " + p.name);
        if (name != p.name) {
            throw std::runtime_error("checkpoint parameter order mismatch: expected '" + p.name +
                                     "', found '" + name + "'");
        }
        const std::uint32_t rank = read_u32_le(is);
        Shape shape(rank);
        for (auto& e : shape) e = read_u32_le(is);
        if (shape != p.tensor.shape()) {
            throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                                     shape_str(shape) + ", model expects " +
                                     shape_str(p.tensor.shape()));
        }
        for (double& v : p.tensor.data_mut()) v = read_f64_le(is);
    }
    char extra;
    if (is.read(&extra, 1)) {
        throw std::runtime_error("trailing bytes in checkpoint " + path.string());
    }
    return ckpt;
}

}  // namespace apl
