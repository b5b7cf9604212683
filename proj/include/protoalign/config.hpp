#pragma once

// Run configuration: a JSON document whose every key has a default. Values are
// resolved as command-line override > PROTOALIGN_* environment variable >
// config file > built-in default. Unknown keys are rejected at every level.

#include "common.hpp"
#include "data.hpp"
#include "eda.hpp"
#include "model.hpp"
#include "transfer.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

extern char** environ;

namespace protoalign {

using json = nlohmann::json;

inline constexpr const char* kEnvPrefix = "PROTOALIGN_";

struct DataConfig {
    // Empty paths mean "generate the synthetic benchmark from `synthetic`".
    std::string train_manifest;
    std::string aux_manifest;
    std::string test_manifest;
    double train_fraction = 0.8;   // target train share when splitting a single manifest
    double target_fraction = 1.0;  // class-stratified share of the target train set actually used
    bool use_aux = true;
};

struct EvalConfig {
    int positive_class = 1;
};

struct RunConfig {
    std::string output_dir = "run";
    DataConfig data;
    SyntheticSpec synthetic;
    BackboneConfig model;
    TrainConfig train;
    int checkpoint_every = 0;  // epochs between intermediate checkpoints; 0 = final only
    EvalConfig eval;

    void validate() const {
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        if (!(data.train_fraction > 0 && data.train_fraction < 1)) throw ConfigError("data.train_fraction must lie in (0,1)");
        if (!(data.target_fraction > 0 && data.target_fraction <= 1)) throw ConfigError("data.target_fraction must lie in (0,1]");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
        if (eval.positive_class < 0) throw ConfigError("eval.positive_class must be >= 0");
        synthetic.validate();
        train.validate();
        BackboneConfig m = model;
        m.num_classes = std::max(2, m.num_classes);
        m.validate();
    }
};

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

inline json backbone_to_json(const BackboneConfig& m) {
    return {{"input_kind", m.input_kind == InputKind::Image ? "image" : "vector"},
            {"stage_sizes", m.stage_sizes},
            {"split_stage", m.split_stage},
            {"hidden_dim_f", m.hidden_dim_f},
            {"proj_dim", m.proj_dim},
            {"disc_hidden", m.disc_hidden},
            {"same_private_init", m.same_private_init}};
}

// Full architecture, including the data-derived fields; used by checkpoints.
inline json backbone_to_json_full(const BackboneConfig& m) {
    json j = backbone_to_json(m);
    j["num_classes"] = m.num_classes;
    j["input_shape"] = {m.input_shape.channels, m.input_shape.height, m.input_shape.width};
    return j;
}

inline InputKind parse_input_kind(const std::string& s) {
    if (s == "vector") return InputKind::Vector;
    if (s == "image") return InputKind::Image;
    throw ConfigError("model.input_kind must be 'vector' or 'image', got '" + s + "'");
}

inline json run_config_to_json(const RunConfig& c) {
    const auto& t = c.train;
    const auto& s = c.synthetic;
    const auto& a = t.augment;
    return {
        {"output_dir", c.output_dir},
        {"data",
         {{"train_manifest", c.data.train_manifest},
          {"aux_manifest", c.data.aux_manifest},
          {"test_manifest", c.data.test_manifest},
          {"train_fraction", c.data.train_fraction},
          {"target_fraction", c.data.target_fraction},
          {"use_aux", c.data.use_aux}}},
        {"synthetic",
         {{"num_classes", s.num_classes},
          {"dim", s.dim},
          {"n_target", s.n_target},
          {"n_aux", s.n_aux},
          {"class_separation", s.class_separation},
          {"rotation_deg", s.rotation_deg},
          {"translation", s.translation},
          {"mismatch_rate", s.mismatch_rate},
          {"mismatch_mode", mismatch_mode_name(s.mismatch_mode)},
          {"seed", s.seed}}},
        {"model", backbone_to_json(c.model)},
        {"train",
         {{"alpha", t.alpha},
          {"beta", t.beta},
          {"gamma", t.gamma},
          {"sigma_align", t.sigma_align},
          {"sigma_clf", t.sigma_clf},
          {"warmup_epochs", t.warmup_epochs},
          {"total_epochs", t.total_epochs},
          {"batch_size_target", t.batch_size_target},
          {"batch_size_aux", t.batch_size_aux},
          {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed},
          {"force_eta_one", t.force_eta_one},
          {"debug_checks", t.debug_checks},
          {"diagnostics", t.record_diagnostics},
          {"checkpoint_every", c.checkpoint_every}}},
        {"eda", {{"variant", eda_variant_name(t.eda_variant)}, {"kernel_scales", t.kernel_scales}, {"grl_lambda", t.grl_lambda}}},
        {"psa", {{"temperature", t.temperature}}},
        {"augment",
         {{"p_color_jitter", a.p_color_jitter},
          {"brightness", a.brightness},
          {"contrast", a.contrast},
          {"saturation", a.saturation},
          {"p_grayscale", a.p_grayscale},
          {"p_blur", a.p_blur},
          {"blur_sigma_min", a.blur_sigma_min},
          {"blur_sigma_max", a.blur_sigma_max},
          {"p_hflip", a.p_hflip}}},
        {"eval", {{"positive_class", c.eval.positive_class}}},
    };
}

namespace detail {

template <typename T>
T get_as(const json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + ": wrong type (got " + std::string(j.type_name()) + ")");
    }
}

inline bool same_kind(const json& def, const json& v) {
    if (def.is_number()) return v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    if (def.is_object()) return v.is_object();
    return false;
}

// Overlays `src` onto `dst`, rejecting keys `dst` does not have.
inline void overlay(json& dst, const json& src, const std::string& path) {
    if (!src.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        json& d = dst[it.key()];
        if (d.is_object()) {
            overlay(d, it.value(), key);
        } else {
            if (!same_kind(d, it.value()))
                throw ConfigError(key + ": expected " + std::string(d.type_name()) + ", got " + std::string(it.value().type_name()));
            d = it.value();
        }
    }
}

inline void collect_leaves(const json& j, const std::string& path, std::vector<std::string>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (it.value().is_object())
            collect_leaves(it.value(), key, out);
        else
            out.push_back(key);
    }
}

inline json* find_path(json& root, const std::string& dotted) {
    json* cur = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!cur->is_object() || !cur->contains(part)) return nullptr;
        cur = &(*cur)[part];
        if (dot == std::string::npos) return cur;
        start = dot + 1;
    }
}

inline std::string env_name(const std::string& dotted) {
    std::string out = kEnvPrefix;
    for (char c : dotted) out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out;
}

// Parses a textual value using the type of the default it replaces.
inline json parse_value_like(const json& def, const std::string& text, const std::string& where) {
    if (def.is_string()) return text;
    json v;
    try {
        v = json::parse(text);
    } catch (const json::exception&) {
        throw ConfigError(where + ": cannot parse '" + text + "'");
    }
    if (!same_kind(def, v)) throw ConfigError(where + ": expected " + std::string(def.type_name()) + ", got '" + text + "'");
    return v;
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    const auto num = [&](const char* sec, const char* key) { return detail::get_as<double>(j.at(sec).at(key), std::string(sec) + "." + key); };
    const auto integer = [&](const char* sec, const char* key) {
        const double v = num(sec, key);
        if (v != std::floor(v)) throw ConfigError(std::string(sec) + "." + key + " must be an integer");
        return static_cast<long long>(v);
    };
    const auto boolean = [&](const char* sec, const char* key) { return detail::get_as<bool>(j.at(sec).at(key), std::string(sec) + "." + key); };
    const auto str = [&](const char* sec, const char* key) { return detail::get_as<std::string>(j.at(sec).at(key), std::string(sec) + "." + key); };

    c.output_dir = detail::get_as<std::string>(j.at("output_dir"), "output_dir");
    c.data.train_manifest = str("data", "train_manifest");
    c.data.aux_manifest = str("data", "aux_manifest");
    c.data.test_manifest = str("data", "test_manifest");
    c.data.train_fraction = num("data", "train_fraction");
    c.data.target_fraction = num("data", "target_fraction");
    c.data.use_aux = boolean("data", "use_aux");

    auto& s = c.synthetic;
    s.num_classes = static_cast<int>(integer("synthetic", "num_classes"));
    s.dim = static_cast<int>(integer("synthetic", "dim"));
    s.n_target = static_cast<int>(integer("synthetic", "n_target"));
    s.n_aux = static_cast<int>(integer("synthetic", "n_aux"));
    s.class_separation = num("synthetic", "class_separation");
    s.rotation_deg = num("synthetic", "rotation_deg");
    s.translation = num("synthetic", "translation");
    s.mismatch_rate = num("synthetic", "mismatch_rate");
    s.mismatch_mode = parse_mismatch_mode(str("synthetic", "mismatch_mode"));
    s.seed = static_cast<std::uint64_t>(integer("synthetic", "seed"));

    auto& m = c.model;
    m.input_kind = parse_input_kind(str("model", "input_kind"));
    m.stage_sizes = detail::get_as<std::vector<int>>(j.at("model").at("stage_sizes"), "model.stage_sizes");
    m.split_stage = static_cast<int>(integer("model", "split_stage"));
    m.hidden_dim_f = static_cast<int>(integer("model", "hidden_dim_f"));
    m.proj_dim = static_cast<int>(integer("model", "proj_dim"));
    m.disc_hidden = static_cast<int>(integer("model", "disc_hidden"));
    m.same_private_init = boolean("model", "same_private_init");

    auto& t = c.train;
    t.alpha = num("train", "alpha");
    t.beta = num("train", "beta");
    t.gamma = num("train", "gamma");
    t.sigma_align = num("train", "sigma_align");
    t.sigma_clf = num("train", "sigma_clf");
    t.warmup_epochs = static_cast<int>(integer("train", "warmup_epochs"));
    t.total_epochs = static_cast<int>(integer("train", "total_epochs"));
    t.batch_size_target = static_cast<int>(integer("train", "batch_size_target"));
    t.batch_size_aux = static_cast<int>(integer("train", "batch_size_aux"));
    t.learning_rate = num("train", "learning_rate");
    t.weight_decay = num("train", "weight_decay");
    t.seed = static_cast<std::uint64_t>(integer("train", "seed"));
    t.force_eta_one = boolean("train", "force_eta_one");
    t.debug_checks = boolean("train", "debug_checks");
    t.record_diagnostics = boolean("train", "diagnostics");
    c.checkpoint_every = static_cast<int>(integer("train", "checkpoint_every"));

    t.eda_variant = parse_eda_variant(str("eda", "variant"));
    t.kernel_scales = detail::get_as<std::vector<double>>(j.at("eda").at("kernel_scales"), "eda.kernel_scales");
    t.grl_lambda = num("eda", "grl_lambda");
    t.temperature = num("psa", "temperature");

    auto& a = t.augment;
    a.p_color_jitter = num("augment", "p_color_jitter");
    a.brightness = num("augment", "brightness");
    a.contrast = num("augment", "contrast");
    a.saturation = num("augment", "saturation");
    a.p_grayscale = num("augment", "p_grayscale");
    a.p_blur = num("augment", "p_blur");
    a.blur_sigma_min = num("augment", "blur_sigma_min");
    a.blur_sigma_max = num("augment", "blur_sigma_max");
    a.p_hflip = num("augment", "p_hflip");

    c.eval.positive_class = static_cast<int>(integer("eval", "positive_class"));
    return c;
}

// One "dotted.key=value" override from the command line.
struct Override {
    std::string key;
    std::string value;
};

inline Override parse_override(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' must look like key.path=value");
    return {s.substr(0, eq), s.substr(eq + 1)};
}

struct ConfigSources {
    json base;                        // optional document layered over the defaults first
    std::string file;                 // optional JSON config file
    bool use_environment = true;
    std::vector<Override> overrides;  // applied last, in order
};

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

inline json resolve_config_json(const ConfigSources& src) {
    json merged = run_config_to_json(RunConfig{});
    const json defaults = merged;
    if (!src.base.is_null()) detail::overlay(merged, src.base, "");
    if (!src.file.empty()) detail::overlay(merged, read_json_file(src.file), "");

    std::vector<std::string> leaves;
    detail::collect_leaves(defaults, "", leaves);
    if (src.use_environment) {
        std::vector<std::string> known;
        for (const auto& leaf : leaves) {
            const std::string name = detail::env_name(leaf);
            known.push_back(name);
            if (const char* v = std::getenv(name.c_str()))
                *detail::find_path(merged, leaf) = detail::parse_value_like(*detail::find_path(merged, leaf), v, name);
        }
        for (char** e = environ; e && *e; ++e) {
            const std::string kv = *e;
            if (kv.rfind(kEnvPrefix, 0) != 0) continue;
            const std::string name = kv.substr(0, kv.find('='));
            if (std::find(known.begin(), known.end(), name) == known.end())
                throw ConfigError("unknown environment override " + name);
        }
    }
    for (const auto& o : src.overrides) {
        json* slot = detail::find_path(merged, o.key);
        if (!slot || slot->is_object()) throw ConfigError("unknown config key '" + o.key + "'");
        *slot = detail::parse_value_like(*slot, o.value, o.key);
    }
    return merged;
}

inline RunConfig resolve_config(const ConfigSources& src) {
    RunConfig c = run_config_from_json(resolve_config_json(src));
    c.validate();
    return c;
}

}  // namespace protoalign
