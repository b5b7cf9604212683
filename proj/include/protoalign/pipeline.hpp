#pragma once

// Glue between a RunConfig and the library: data preparation, model
// construction, one train+evaluate run, and sweep axes.

#include "config.hpp"
#include "data.hpp"
#include "evalsuite.hpp"
#include "transfer.hpp"

#include <optional>
#include <string>

namespace protoalign {

struct PreparedData {
    DomainDataset train;
    DomainDataset aux;   // empty when auxiliary data is disabled or absent
    DomainDataset test;  // may be empty
    std::vector<std::string> class_names;
    std::optional<SyntheticDomains> synthetic;
};

struct SyntheticSplit {
    SyntheticDomains domains;
    DatasetManifest target_train;
    DatasetManifest target_test;
};

inline SyntheticSplit make_synthetic_split(const SyntheticSpec& spec, double train_fraction) {
    SyntheticSplit s{generate_synthetic_domains(spec), {}, {}};
    const Split sp = split_indices(s.domains.target, train_fraction, mix_seed(spec.seed, seed_salt::kSplit));
    s.target_train = select_records(s.domains.target, sp.train);
    s.target_test = select_records(s.domains.target, sp.test);
    return s;
}

inline DomainDataset empty_like(const DomainDataset& ref, Domain domain) {
    DomainDataset d;
    d.domain = domain;
    d.kind = ref.kind;
    d.shape = ref.shape;
    d.num_classes = ref.num_classes;
    d.features.resize(0, ref.features.cols());
    return d;
}

inline PreparedData prepare_data(const RunConfig& c) {
    PreparedData p;
    DatasetManifest train_m, test_m, aux_m;
    bool have_test = false, have_aux = false;
    if (c.data.train_manifest.empty()) {
        auto s = make_synthetic_split(c.synthetic, c.data.train_fraction);
        train_m = std::move(s.target_train);
        test_m = std::move(s.target_test);
        aux_m = s.domains.aux;
        have_test = have_aux = true;
        p.synthetic = std::move(s.domains);
    } else {
        train_m = read_manifest(c.data.train_manifest);
        if (!c.data.test_manifest.empty()) {
            test_m = read_manifest(c.data.test_manifest);
            have_test = true;
        }
        if (!c.data.aux_manifest.empty()) {
            aux_m = read_manifest(c.data.aux_manifest);
            have_aux = true;
        }
    }
    if (train_m.domain != Domain::Target) throw DataError("training manifest is not tagged as the target domain");
    if (train_m.records.empty()) throw DataError("target training manifest is empty");
    p.class_names = train_m.class_names;
    p.train = materialize(train_m);
    if (c.data.target_fraction < 1.0) {
        const auto idx = stratified_fraction_indices(p.train.labels, p.train.num_classes, c.data.target_fraction,
                                                     mix_seed(c.train.seed, seed_salt::kFraction));
        p.train = p.train.subset(idx);
    }
    if (have_aux && c.data.use_aux) {
        if (aux_m.domain != Domain::Auxiliary) throw DataError("auxiliary manifest is not tagged as the auxiliary domain");
        if (aux_m.num_classes() != train_m.num_classes())
            throw DataError("auxiliary manifest has " + std::to_string(aux_m.num_classes()) + " classes, target has " +
                            std::to_string(train_m.num_classes()));
        p.aux = materialize(aux_m);
    } else {
        p.aux = empty_like(p.train, Domain::Auxiliary);
    }
    p.test = have_test ? materialize(test_m) : empty_like(p.train, Domain::Target);
    return p;
}

inline BackboneConfig backbone_for(const RunConfig& c, const DomainDataset& train) {
    BackboneConfig m = c.model;
    if (m.input_kind != train.kind)
        throw ConfigError(std::string("model.input_kind is '") + (m.input_kind == InputKind::Image ? "image" : "vector") +
                          "' but the data holds " + (train.kind == InputKind::Image ? "images" : "vectors"));
    m.num_classes = train.num_classes;
    m.input_shape = train.shape;
    m.validate();
    return m;
}

struct RunOutcome {
    TrainResult result;
    std::optional<MetricsReport> test_metrics;
};

inline RunOutcome train_and_evaluate(const RunConfig& c, const PreparedData& data, bool validate_each_epoch = false,
                                     const TrainHooks& hooks = {}) {
    const DomainDataset* val = validate_each_epoch && !data.test.empty() ? &data.test : nullptr;
    RunOutcome out{train(data.train, data.aux, backbone_for(c, data.train), c.train, val, hooks), std::nullopt};
    if (!data.test.empty()) out.test_metrics = evaluate(out.result.model, data.test, c.eval.positive_class, c.train.seed);
    return out;
}

inline const std::vector<std::string>& sweep_axes() {
    static const std::vector<std::string> axes{"sigma_align", "sigma_clf", "target_fraction"};
    return axes;
}

inline void apply_sweep_axis(RunConfig& c, const std::string& axis, double value) {
    if (axis == "sigma_align")
        c.train.sigma_align = value;
    else if (axis == "sigma_clf")
        c.train.sigma_clf = value;
    else if (axis == "target_fraction")
        c.data.target_fraction = value;
    else
        throw ConfigError("unknown sweep axis '" + axis + "' (expected sigma_align, sigma_clf or target_fraction)");
}

// Test accuracy of one run at (axis = value, seed); the seed drives the
// training stream only, the data are those of the base configuration.
inline double sweep_point_accuracy(const RunConfig& base, const std::string& axis, double value, std::uint64_t seed) {
    RunConfig c = base;
    apply_sweep_axis(c, axis, value);
    c.train.seed = seed;
    c.validate();
    const PreparedData data = prepare_data(c);
    if (data.test.empty()) throw DataError("sweeps need a test set (data.test_manifest or the synthetic split)");
    return train_and_evaluate(c, data).test_metrics->accuracy;
}

}  // namespace protoalign
