#pragma once

// JSON checkpoints. Top-level keys:
//   format       "protoalign-checkpoint"
//   version      1
//   epoch        number of completed epochs
//   rng_state    textual state of the target-order generator
//   architecture full BackboneConfig (including num_classes and input_shape)
//   config       echo of the resolved run configuration (may be null)
//   parameters   { "<stable name>": { "rows": r, "cols": c, "data": [row-major values] } }

#include "common.hpp"
#include "config.hpp"
#include "model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace protoalign {

inline constexpr const char* kCheckpointFormat = "protoalign-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    YNet model;
    int epoch = 0;
    std::string rng_state;
    json config;
};

inline BackboneConfig backbone_from_json(const json& j) {
    BackboneConfig m;
    try {
        m.input_kind = parse_input_kind(j.at("input_kind").get<std::string>());
        m.stage_sizes = j.at("stage_sizes").get<std::vector<int>>();
        m.split_stage = j.at("split_stage").get<int>();
        m.hidden_dim_f = j.at("hidden_dim_f").get<int>();
        m.proj_dim = j.at("proj_dim").get<int>();
        m.disc_hidden = j.at("disc_hidden").get<int>();
        m.same_private_init = j.at("same_private_init").get<bool>();
        m.num_classes = j.at("num_classes").get<int>();
        const auto shape = j.at("input_shape").get<std::vector<int>>();
        if (shape.size() != 3) throw ConfigError("checkpoint architecture.input_shape must have 3 entries");
        m.input_shape = {shape[0], shape[1], shape[2]};
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint architecture is malformed: ") + e.what());
    }
    m.validate();
    return m;
}

inline json checkpoint_to_json(const YNet& model, int epoch, const std::string& rng_state, const json& config_echo) {
    json params = json::object();
    for (const Parameter* p : model.parameters()) {
        std::vector<double> data(p->value.data(), p->value.data() + p->value.size());
        params[p->name] = {{"rows", p->value.rows()}, {"cols", p->value.cols()}, {"data", std::move(data)}};
    }
    return {{"format", kCheckpointFormat},
            {"version", kCheckpointVersion},
            {"epoch", epoch},
            {"rng_state", rng_state},
            {"architecture", backbone_to_json_full(model.config())},
            {"config", config_echo},
            {"parameters", std::move(params)}};
}

// Written to a sibling temporary and renamed so a failed write leaves no partial file.
inline void save_checkpoint(const std::filesystem::path& path, const YNet& model, int epoch, const std::string& rng_state,
                            const json& config_echo = nullptr) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + tmp.string());
        out << checkpoint_to_json(model, epoch, rng_state, config_echo).dump(1) << '\n';
        if (!out) throw DataError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint checkpoint_from_json(const json& j) {
    if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat)
        throw ConfigError("not a protoalign checkpoint (field 'format')");
    if (j.value("version", -1) != kCheckpointVersion)
        throw ConfigError("unsupported checkpoint version (field 'version')");
    const BackboneConfig arch = backbone_from_json(j.at("architecture"));
    Checkpoint c{YNet(arch, 0), j.at("epoch").get<int>(), j.at("rng_state").get<std::string>(), j.at("config")};

    const json& params = j.at("parameters");
    for (Parameter* p : c.model.parameters()) {
        if (!params.contains(p->name)) throw ConfigError("checkpoint is missing parameter '" + p->name + "'");
        const json& e = params.at(p->name);
        const auto rows = e.at("rows").get<Eigen::Index>();
        const auto cols = e.at("cols").get<Eigen::Index>();
        if (rows != p->value.rows() || cols != p->value.cols())
            throw ConfigError("parameter '" + p->name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                              " in the checkpoint, architecture expects " + std::to_string(p->value.rows()) + "x" +
                              std::to_string(p->value.cols()));
        const auto data = e.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != rows * cols)
            throw ConfigError("parameter '" + p->name + "' has " + std::to_string(data.size()) + " values, expected " +
                              std::to_string(rows * cols));
        std::copy(data.begin(), data.end(), p->value.data());
    }
    if (params.size() != c.model.parameters().size())
        for (auto it = params.begin(); it != params.end(); ++it)
            if (!c.model.find_parameter(it.key())) throw ConfigError("checkpoint has unexpected parameter '" + it.key() + "'");
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

// Throws a ConfigError naming the first architecture field on which the
// checkpoint and the requested configuration disagree.
inline void require_same_architecture(const BackboneConfig& checkpoint, const BackboneConfig& requested) {
    const json a = backbone_to_json(checkpoint);
    const json b = backbone_to_json(requested);
    for (auto it = a.begin(); it != a.end(); ++it)
        if (b.at(it.key()) != it.value())
            throw ConfigError("checkpoint/config mismatch in model." + it.key() + ": checkpoint has " + it.value().dump() +
                              ", config has " + b.at(it.key()).dump());
}

}  // namespace protoalign
