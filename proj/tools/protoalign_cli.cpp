#include "protoalign/protoalign.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace protoalign;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Records every file a command writes, then emits produced_files.txt.
class ProducedFiles {
public:
    explicit ProducedFiles(fs::path root) : root_(std::move(root)) {}

    void add(const fs::path& p) { files_.push_back(p); }

    void write() const {
        const fs::path listing = root_ / "produced_files.txt";
        auto out = open_report(listing);
        out << "# path\tfnv1a64\n";
        for (const auto& f : files_) {
            std::ifstream in(f, std::ios::binary);
            std::ostringstream buf;
            buf << in.rdbuf();
            out << fs::relative(f, root_).generic_string() << '\t' << hex64(fnv1a64(buf.str())) << '\n';
        }
        std::cout << "wrote " << listing.string() << " (" << files_.size() << " files)\n";
    }

private:
    fs::path root_;
    std::vector<fs::path> files_;
};

std::string histogram_text(const DatasetManifest& m) {
    std::ostringstream s;
    const auto h = m.histogram();
    for (std::size_t k = 0; k < h.size(); ++k) s << (k ? " " : "") << m.class_names[k] << "=" << h[k];
    return s.str();
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
    std::vector<double> out;
    for (const auto& tok : split_string(text, ','))
        if (!tok.empty()) {
            try {
                out.push_back(parse_double(tok));
            } catch (const std::exception&) {
                throw ConfigError(std::string(what) + ": cannot parse '" + tok + "'");
            }
        }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

struct GlobalOptions {
    std::string config_file;
    std::vector<std::string> sets;
    bool no_env = false;
};

// Flags shared by train and sweep, each mapped to one config key.
struct TrainFlags {
    std::vector<Override> overrides;

    void bind(CLI::App* cmd) {
        add(cmd, "--eda", "eda.variant", "domain alignment variant: adversarial, mkmmd or off")
            ->check(CLI::IsMember({"adversarial", "mkmmd", "off"}));
        add(cmd, "--alpha", "train.alpha", "weight of the domain alignment loss");
        add(cmd, "--beta", "train.beta", "weight of the prototypical alignment loss");
        add(cmd, "--gamma", "train.gamma", "weight of the auxiliary classification loss");
        add(cmd, "--sigma-align", "train.sigma_align", "consistency threshold for contrastive alignment");
        add(cmd, "--sigma-clf", "train.sigma_clf", "consistency threshold for auxiliary classification");
        add(cmd, "--epochs", "train.total_epochs", "number of epochs");
        add(cmd, "--warmup", "train.warmup_epochs", "warm-up epochs without the alignment loss");
        add(cmd, "--lr", "train.learning_rate", "learning rate");
        add(cmd, "--weight-decay", "train.weight_decay", "decoupled weight decay");
        add(cmd, "--temperature", "psa.temperature", "contrastive temperature");
        add(cmd, "--seed", "train.seed", "training seed");
        add(cmd, "--target-fraction", "data.target_fraction", "share of the target training set to use");
        add(cmd, "--train-manifest", "data.train_manifest", "target training manifest (default: synthetic benchmark)");
        add(cmd, "--aux-manifest", "data.aux_manifest", "auxiliary manifest");
        add(cmd, "--test-manifest", "data.test_manifest", "target test manifest");
        add(cmd, "--output-dir", "output_dir", "run directory");
        cmd->add_option_function<int>("--batch-size", [this](int v) {
            overrides.push_back({"train.batch_size_target", std::to_string(v)});
            overrides.push_back({"train.batch_size_aux", std::to_string(v)});
        }, "mini-batch size for both domains");
        cmd->add_flag_callback("--no-psa", [this] { overrides.push_back({"train.beta", "0"}); },
                               "disable the prototypical alignment loss (beta = 0)");
        cmd->add_flag_callback("--no-aux", [this] { overrides.push_back({"data.use_aux", "false"}); },
                               "train on the target domain only");
        cmd->add_flag_callback("--no-filter", [this] {
            overrides.push_back({"train.sigma_clf", "0"});
            overrides.push_back({"train.force_eta_one", "true"});
        }, "use every auxiliary sample with eta = 1");
        cmd->add_flag_callback("--diagnostics", [this] { overrides.push_back({"train.diagnostics", "true"}); },
                               "write per-epoch auxiliary filtering diagnostics");
        cmd->add_flag_callback("--debug-checks", [this] { overrides.push_back({"train.debug_checks", "true"}); },
                               "assert the filtering invariants on every batch");
    }

private:
    CLI::Option* add(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
        return cmd->add_option_function<std::string>(flag, [this, key](const std::string& v) { overrides.push_back({key, v}); },
                                                     help + " [" + key + "]");
    }
};

ConfigSources make_sources(const GlobalOptions& g, const std::vector<Override>& flags) {
    ConfigSources src;
    src.file = g.config_file;
    src.use_environment = !g.no_env;
    for (const auto& s : g.sets) src.overrides.push_back(parse_override(s));
    src.overrides.insert(src.overrides.end(), flags.begin(), flags.end());
    return src;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& c) {
    const SyntheticSplit s = make_synthetic_split(c.synthetic, c.data.train_fraction);
    const fs::path root = fs::path(c.output_dir);
    ProducedFiles produced(root);
    const std::vector<std::pair<std::string, const DatasetManifest*>> files{
        {"target.manifest", &s.domains.target},
        {"aux.manifest", &s.domains.aux},
        {"target_train.manifest", &s.target_train},
        {"target_test.manifest", &s.target_test},
    };
    for (const auto& [name, m] : files) {
        const fs::path p = root / name;
        write_manifest(p, *m);
        produced.add(p);
        std::cout << p.string() << "  n=" << m->size() << "  histogram: " << histogram_text(*m) << '\n';
    }
    std::cout << "auxiliary label flips: " << s.domains.flips << " (" << mismatch_mode_name(c.synthetic.mismatch_mode)
              << ", rate " << format_double(c.synthetic.mismatch_rate) << ")\n";
    produced.write();
    return kOk;
}

int cmd_train(const RunConfig& c, const json& resolved) {
    const PreparedData data = prepare_data(c);
    const fs::path root = fs::path(c.output_dir);
    ProducedFiles produced(root);

    TrainHooks hooks;
    const std::size_t per_epoch = batches_per_epoch(data.train.size(), c.train.batch_size_target);
    if (c.checkpoint_every > 0)
        hooks.after_step = [&](int epoch, int batch, const YNet& model) {
            if (static_cast<std::size_t>(batch) + 1 != per_epoch || (epoch + 1) % c.checkpoint_every != 0) return;
            char name[64];
            std::snprintf(name, sizeof name, "checkpoints/epoch_%03d.json", epoch + 1);
            save_checkpoint(root / name, model, epoch + 1, "", resolved);
            produced.add(root / name);
        };

    std::cout << "training: target " << data.train.size() << ", auxiliary " << data.aux.size() << ", test " << data.test.size()
              << " samples; " << c.train.total_epochs << " epochs\n";
    const RunOutcome run = train_and_evaluate(c, data, true, hooks);

    {
        auto out = open_report(root / "config.json");
        out << resolved.dump(2) << '\n';
        produced.add(root / "config.json");
    }
    write_history_csv(root / "history.csv", run.result.history);
    produced.add(root / "history.csv");
    save_checkpoint(root / "checkpoint.json", run.result.model, c.train.total_epochs, run.result.rng_state, resolved);
    produced.add(root / "checkpoint.json");
    for (std::size_t e = 0; e < run.result.diagnostics.size(); ++e) {
        char name[64];
        std::snprintf(name, sizeof name, "diagnostics/epoch_%03zu.csv", e);
        write_diagnostics_csv(root / name, run.result.diagnostics[e]);
        produced.add(root / name);
    }
    for (const auto& r : run.result.history)
        std::cout << "epoch " << r.epoch << "  total " << format_double(r.total) << "  L_clf " << format_double(r.l_clf)
                  << "  L_eda " << format_double(r.l_eda) << "  L_psa " << format_double(r.l_psa)
                  << (r.val_accuracy ? "  test_acc " + format_double(*r.val_accuracy) : std::string()) << '\n';
    produced.write();
    return kOk;
}

int cmd_eval(const RunConfig& c, Checkpoint& ck, const std::string& manifest_path, const std::string& group_by) {
    require_same_architecture(ck.model.config(), c.model);

    DomainDataset ds;
    std::vector<int> groups;
    if (!manifest_path.empty()) {
        const DatasetManifest m = read_manifest(manifest_path);
        if (m.records.empty()) throw DataError("evaluation manifest " + manifest_path + " has no samples");
        ds = materialize(m);
        if (ds.num_classes != ck.model.config().num_classes)
            throw DataError("num_classes mismatch: checkpoint has " + std::to_string(ck.model.config().num_classes) +
                            ", dataset has " + std::to_string(ds.num_classes));
        if (group_by == "group") {
            std::map<std::string, int> ids;
            for (const auto& r : m.records) groups.push_back(ids.try_emplace(r.group, static_cast<int>(ids.size())).first->second);
        }
    } else {
        ds = prepare_data(c).test;
        if (ds.empty()) throw DataError("no evaluation set: pass --manifest or configure a test set");
        if (ds.num_classes != ck.model.config().num_classes)
            throw DataError("num_classes mismatch: checkpoint has " + std::to_string(ck.model.config().num_classes) +
                            ", dataset has " + std::to_string(ds.num_classes));
    }
    if (ds.features.cols() != ck.model.config().input_shape.size())
        throw DataError("sample size mismatch: checkpoint expects " + std::to_string(ck.model.config().input_shape.size()) +
                        " values per sample, dataset has " + std::to_string(ds.features.cols()));
    if (groups.empty()) groups = ds.labels;

    // Everything is computed before the first file is written.
    const Mat probs = predict_proba(ck.model, ds);
    const MetricsReport report = compute_metrics<double>(probs, ds.labels, c.eval.positive_class, c.train.seed);
    const int pos = c.eval.positive_class;
    std::vector<double> pos_scores(static_cast<std::size_t>(probs.rows()));
    std::vector<bool> is_pos(pos_scores.size());
    for (std::size_t i = 0; i < pos_scores.size(); ++i) {
        pos_scores[i] = probs(static_cast<Eigen::Index>(i), pos);
        is_pos[i] = ds.labels[i] == pos;
    }
    const auto roc = report.num_classes == 2 ? roc_curve(pos_scores, is_pos) : std::nullopt;
    const PredictionDistribution dist = prediction_distribution(pos_scores, groups);

    const fs::path root = fs::path(c.output_dir);
    ProducedFiles produced(root);
    {
        json j = metrics_to_json(report);
        j["checkpoint_epoch"] = ck.epoch;
        auto out = open_report(root / "metrics.json");
        out << j.dump(2) << '\n';
        produced.add(root / "metrics.json");
    }
    if (roc) {
        write_roc_csv(root / "roc.csv", *roc);
        produced.add(root / "roc.csv");
    }
    write_distribution_csv(root / "prediction_distribution.csv", dist);
    produced.add(root / "prediction_distribution.csv");
    for (const auto& n : dist.notes) std::cerr << "note: " << n << '\n';

    std::cout << "accuracy " << format_double(report.accuracy) << "  precision " << format_double(report.precision)
              << "  recall " << format_double(report.recall) << "  f1 " << format_double(report.f1) << "  roc_auc "
              << (report.roc_auc ? format_double(*report.roc_auc) : std::string("undefined")) << '\n';
    produced.write();
    return kOk;
}

int cmd_sweep(const RunConfig& c, const std::string& axis, const std::string& grid_text, const std::string& seeds_text, int jobs) {
    if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end())
        throw ConfigError("unknown sweep axis '" + axis + "' (expected sigma_align, sigma_clf or target_fraction)");
    const auto grid = parse_double_list(grid_text, "--grid");
    std::vector<std::uint64_t> seeds;
    for (double s : parse_double_list(seeds_text, "--seeds")) {
        if (s < 0 || s != std::floor(s)) throw ConfigError("--seeds must be non-negative integers");
        seeds.push_back(static_cast<std::uint64_t>(s));
    }
    if (jobs < 1) throw ConfigError("--jobs must be >= 1");
    for (double v : grid) {
        RunConfig probe = c;
        apply_sweep_axis(probe, axis, v);
        probe.validate();
    }

    const SweepTable t = threshold_sweep(
        axis, grid, seeds, [&](double v, std::uint64_t seed) { return sweep_point_accuracy(c, axis, v, seed); }, jobs);

    const fs::path root = fs::path(c.output_dir);
    ProducedFiles produced(root);
    write_sweep_csv(root / "sweep.csv", t);
    produced.add(root / "sweep.csv");
    write_sweep_summary_csv(root / "sweep_summary.csv", t);
    produced.add(root / "sweep_summary.csv");
    for (const auto& s : t.summary)
        std::cout << axis << "=" << format_double(s.value) << "  accuracy " << format_double(s.mean) << " +/- "
                  << format_double(s.sd) << "  (n=" << s.n << ")\n";
    std::cout << "best " << axis << " = " << format_double(t.summary[t.argmax].value) << '\n';
    produced.write();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-domain transfer with prototype-filtered auxiliary supervision.\n"
                 "Configuration precedence: command-line flags and --set > PROTOALIGN_* environment variables\n"
                 "> --config file > built-in defaults. Environment names are the upper-cased dotted key with\n"
                 "dots replaced by underscores, e.g. PROTOALIGN_TRAIN_LEARNING_RATE=0.001.",
                 "protoalign"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--config", g.config_file, "JSON run configuration file");
    app.add_option("--set", g.sets, "override any config key, e.g. --set train.alpha=0.2 (repeatable)");
    app.add_flag("--no-env", g.no_env, "ignore PROTOALIGN_* environment variables");
    bool print_config = false;
    app.add_flag("--print-config", print_config, "print the resolved configuration and exit");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-domain benchmark and its target split");
    std::vector<Override> gen_flags;
    for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{{"--seed", "synthetic.seed"},
                                                                                    {"--mismatch-rate", "synthetic.mismatch_rate"},
                                                                                    {"--mismatch-mode", "synthetic.mismatch_mode"},
                                                                                    {"--n-target", "synthetic.n_target"},
                                                                                    {"--n-aux", "synthetic.n_aux"},
                                                                                    {"--output-dir", "output_dir"}})
        gen->add_option_function<std::string>(flag, [&gen_flags, key](const std::string& v) { gen_flags.push_back({key, v}); },
                                              "[" + key + "]");

    auto* tr = app.add_subcommand("train", "train a model and write history.csv and checkpoint.json");
    TrainFlags train_flags;
    train_flags.bind(tr);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint: metrics.json, roc.csv, prediction_distribution.csv");
    std::string ck_path, eval_manifest, group_by = "label";
    std::vector<Override> eval_flags;
    ev->add_option("--checkpoint", ck_path, "checkpoint.json written by train")->required();
    ev->add_option("--manifest", eval_manifest, "dataset manifest to evaluate (default: the configured test set)");
    ev->add_option("--group-by", group_by, "grouping for the prediction distribution")->check(CLI::IsMember({"label", "group"}));
    ev->add_option_function<std::string>("--output-dir", [&](const std::string& v) { eval_flags.push_back({"output_dir", v}); },
                                         "report directory [output_dir]");

    auto* sw = app.add_subcommand("sweep", "train one model per (grid value, seed) and tabulate test accuracy");
    TrainFlags sweep_flags;
    sweep_flags.bind(sw);
    std::string axis, grid_text, seeds_text = "0,1,2";
    int jobs = 1;
    sw->add_option("--axis", axis, "sigma_align, sigma_clf or target_fraction")->required();
    sw->add_option("--grid", grid_text, "comma-separated values, e.g. 0,0.5,0.9")->required();
    sw->add_option("--seeds", seeds_text, "comma-separated training seeds")->capture_default_str();
    sw->add_option("--jobs", jobs, "parallel training jobs")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen || *tr || *sw) {
            const auto& flags = *gen ? gen_flags : *tr ? train_flags.overrides : sweep_flags.overrides;
            const json resolved = resolve_config_json(make_sources(g, flags));
            RunConfig c = run_config_from_json(resolved);
            c.validate();
            if (print_config) {
                std::cout << resolved.dump(2) << '\n';
                return kOk;
            }
            if (*gen) return cmd_gen_data(c);
            if (*tr) return cmd_train(c, resolved);
            return cmd_sweep(c, axis, grid_text, seeds_text, jobs);
        }
        Checkpoint ck = load_checkpoint(ck_path);
        ConfigSources src = make_sources(g, eval_flags);
        if (!ck.config.is_null()) src.base = ck.config;
        bool has_output = false;
        for (const auto& o : src.overrides) has_output |= o.key == "output_dir";
        if (!has_output) src.overrides.push_back({"output_dir", (fs::path(ck_path).parent_path() / "eval").string()});
        const json resolved = resolve_config_json(src);
        RunConfig c = run_config_from_json(resolved);
        c.validate();
        if (print_config) {
            std::cout << resolved.dump(2) << '\n';
            return kOk;
        }
        return cmd_eval(c, ck, eval_manifest, group_by);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error at " << e.where() << ": " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
}
