// Acceptance run: prints one PASS/FAIL line per criterion.
//
//   acceptance [--only 2,3] [--expect-fail 6,7]
//
// Exit status is 0 when every criterion passes, except those listed in
// --expect-fail, whose FAIL lines are still printed.

#include "protoalign/protoalign.hpp"

#include "../oracles.hpp"
#include "../support.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace protoalign;
using testsupport::fd_gradient;
using testsupport::random_mat;
using testsupport::rel_error;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::vector<int> random_labels(Rng& rng, std::size_t n, int k) {
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
    return y;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// ---------------------------------------------------------------------------

Outcome reproducibility_statement() {
    const fs::path readme = fs::path(PROTOALIGN_SOURCE_DIR) / "README.md";
    const std::string text = slurp(readme);
    if (text.empty()) return {false, "README.md not found at " + readme.string()};
    const bool stated = text.find("not reproducible at desk scale") != std::string::npos;
    const bool names_numbers = text.find("86.55") != std::string::npos && text.find("87.96") != std::string::npos;
    return {stated && names_numbers, stated && names_numbers ? "README documents the desk-scale limitation"
                                                             : "README lacks the desk-scale reproducibility statement"};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::string worst_name;
    auto record = [&](const std::string& name, double err) {
        if (err > worst || worst_name.empty()) {
            worst = err;
            worst_name = name;
        }
    };
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 7));
        Mat p(n, 1);
        std::vector<int> d(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            p(i, 0) = uniform_real(rng, 0.05, 0.95);
            d[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, 2));
        }
        const Vec g = adversarial_eda_loss<double>(Vec(p.col(0)), d).grad;
        const Mat fd = fd_gradient([&] { return adversarial_eda_loss<double>(Vec(p.col(0)), d).value; }, p);
        record("adversarial_eda_loss", rel_error(g, Vec(fd.col(0))));
    }
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 7));
        const int dim = 1 + static_cast<int>(uniform_index(rng, 8));
        Mat x = random_mat(n, dim, rng), y = random_mat(n, dim, rng);
        y.array() += 0.5;
        const auto bank = median_heuristic_bandwidths<double>(stack_rows<double>(x, y), default_kernel_scales());
        const auto r = mkmmd<double>(x, y, bank);
        record("mkmmd/x", rel_error(r.grad_x, fd_gradient([&] { return mkmmd<double>(x, y, bank, false).value; }, x)));
        record("mkmmd/y", rel_error(r.grad_y, fd_gradient([&] { return mkmmd<double>(x, y, bank, false).value; }, y)));
    }
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 7));
        Mat z = random_mat(n, 8, rng);
        const auto y = random_labels(rng, static_cast<std::size_t>(n), 2);
        const double tau = trial % 2 ? 1.0 : 0.5;
        const Mat g = supcon_batch<double>(z, y, tau).grad;
        record("supcon_loss", rel_error(g, fd_gradient([&] { return supcon_batch<double>(z, y, tau).sum; }, z)));
    }
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1 + static_cast<int>(uniform_index(rng, 8));
        const int k = 2 + static_cast<int>(uniform_index(rng, 7));
        Mat logits = random_mat(n, k, rng, 2.0);
        const auto y = random_labels(rng, static_cast<std::size_t>(n), k);
        std::vector<double> eta(static_cast<std::size_t>(n));
        for (auto& e : eta) e = uniform_real(rng, 0.0, 1.0);
        const Mat gi = intra_clf_loss<double>(logits, y).grad;
        record("intra_clf_loss", rel_error(gi, fd_gradient([&] { return intra_clf_loss<double>(logits, y).value; }, logits)));
        const Mat ge = inter_clf_loss<double>(logits, y, eta, 0.3, 0.1).grad;
        record("inter_clf_loss",
               rel_error(ge, fd_gradient([&] { return inter_clf_loss<double>(logits, y, eta, 0.3, 0.1).value; }, logits)));
    }
    const double secs = seconds_since(t0);
    const bool ok = worst <= 1e-4 && secs < 30;
    return {ok, "worst relative error " + sci(worst) + " (" + worst_name + "), " + fmt(secs, 2) + " s"};
}

Outcome oracle_equivalence() {
    Rng rng(31);
    double supcon_err = 0, psa_err = 0;
    for (int batch = 0; batch < 50; ++batch) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 15));
        const Mat z = random_mat(n, 6, rng);
        const auto y = random_labels(rng, static_cast<std::size_t>(n), 3);
        const double tau = batch % 2 ? 1.0 : 0.1;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto a = supcon_loss<double>(i, z, y, tau);
            const auto b = testsupport::naive_supcon(i, z, y, tau);
            if (a.has_value() != b.has_value()) return {false, "supcon_loss disagrees with the oracle on anchor validity"};
            if (a) supcon_err = std::max(supcon_err, std::abs(*a - *b));
        }

        const int nt = 1 + static_cast<int>(uniform_index(rng, 8));
        const int na = static_cast<int>(uniform_index(rng, 9));
        const Mat zt = random_mat(nt, 6, rng), za = random_mat(na, 6, rng);
        const auto yt = random_labels(rng, static_cast<std::size_t>(nt), 2);
        const auto ya = random_labels(rng, static_cast<std::size_t>(na), 2);
        std::vector<double> eta(static_cast<std::size_t>(na));
        for (auto& e : eta) e = uniform_real(rng, 0.0, 1.0);
        const double sigma = uniform_real(rng, 0.0, 1.0);
        const double v = psa_loss<double>(zt, yt, za, ya, eta, sigma, tau).value;
        psa_err = std::max(psa_err, std::abs(v - testsupport::naive_psa(zt, yt, za, ya, eta, sigma, tau)));
    }

    double proto_err = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 2 + static_cast<int>(uniform_index(rng, 5));
        const Mat f = random_mat(200, 7, rng, 3.0);
        auto y = random_labels(rng, 200, k);
        for (int c = 0; c < k; ++c) y[static_cast<std::size_t>(c)] = c;
        const Mat got = compute_prototypes<double>(f, y, k).prototypes;
        proto_err = std::max(proto_err, (got - testsupport::naive_prototypes(f, y, k)).cwiseAbs().maxCoeff());
    }

    double auc_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + uniform_index(rng, 80);
        std::vector<double> s(n);
        std::vector<bool> pos(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = trial % 3 ? uniform_real(rng, 0.0, 1.0) : static_cast<double>(uniform_index(rng, 5));
            pos[i] = uniform_index(rng, 2) == 1;
        }
        pos[0] = true;
        pos[1] = false;
        auc_err = std::max(auc_err, std::abs(*rank_auc(s, pos) - trapezoid_area(*roc_curve(s, pos))));
    }

    const bool ok = supcon_err <= 1e-6 && psa_err <= 1e-6 && proto_err <= 1e-12 && auc_err <= 1e-10;
    std::ostringstream d;
    d << "max |diff| supcon " << supcon_err << ", psa " << psa_err << ", prototypes " << proto_err << ", auc " << auc_err;
    return {ok, d.str()};
}

Outcome filtering_invariants() {
    Rng rng(404);
    int simplex = 0, range = 0, monotone = 0, boundary = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = 2 + static_cast<int>(uniform_index(rng, 7));
        const int dim = 1 + static_cast<int>(uniform_index(rng, 8));
        PrototypeTable<double> table;
        table.prototypes = random_mat(k, dim, rng, uniform_real(rng, 0.1, 5.0));
        table.class_counts.assign(static_cast<std::size_t>(k), 1);
        const Vec f = random_mat(1, dim, rng, uniform_real(rng, 0.1, 5.0)).row(0).transpose();
        const int label = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
        const Vec u = soft_assign(f, table);
        const double eta = consistency_score(u, label);

        if (std::abs(u.sum() - 1.0) > 1e-6 || u.minCoeff() < 0) ++simplex;
        if (!(eta >= 0.0 && eta <= 1.0)) ++range;

        double s1 = uniform_real(rng, 0.0, 1.0), s2 = uniform_real(rng, 0.0, 1.0);
        if (s1 > s2) std::swap(s1, s2);
        const std::vector<double> one{eta};
        if (filter_mask<double>(one, s2)[0] && !filter_mask<double>(one, s1)[0]) ++monotone;

        const bool at = filter_mask<double>(one, eta)[0];
        const double above = std::nextafter(eta, 2.0);
        const bool over = above <= 1.0 ? filter_mask<double>(one, above)[0] : false;
        if (!at || over) ++boundary;
    }
    const bool ok = simplex == 0 && range == 0 && monotone == 0 && boundary == 0;
    std::ostringstream d;
    d << "1000 pairs, violations: simplex " << simplex << ", range " << range << ", monotonicity " << monotone << ", boundary "
      << boundary;
    return {ok, d.str()};
}

Outcome mmd_statistical_check() {
    double worst_ratio = 1e300;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(mix_seed(seed, 0x4d4d44));
        const Mat a = random_mat(512, 8, rng), same = random_mat(512, 8, rng);
        Mat shifted = random_mat(512, 8, rng);
        shifted.array() += 1.0;
        const auto scales = default_kernel_scales();
        const double v_same = mkmmd<double>(a, same, median_heuristic_bandwidths<double>(stack_rows<double>(a, same), scales), false).value;
        const double v_shift =
            mkmmd<double>(a, shifted, median_heuristic_bandwidths<double>(stack_rows<double>(a, shifted), scales), false).value;
        worst_ratio = std::min(worst_ratio, v_same > 0 ? v_shift / v_same : 1e300);
    }
    return {worst_ratio >= 5, "smallest shifted/unshifted ratio over 5 seeds " + fmt(worst_ratio, 1)};
}

// ---------------------------------------------------------------------------
// Synthetic benchmark shared by criteria 6 and 7.

// Single-core desk schedule; applied identically to every variant.
constexpr double kDeskLearningRate = 1e-3;
constexpr int kDeskBatch = 32;

enum class Variant { Full, TargetOnly, Joint };

RunConfig benchmark_config(Variant v, std::uint64_t seed, double fraction) {
    RunConfig c;
    c.synthetic.seed = seed;
    c.train.seed = seed;
    c.train.learning_rate = kDeskLearningRate;
    c.train.batch_size_target = c.train.batch_size_aux = kDeskBatch;
    c.data.target_fraction = fraction;
    switch (v) {
        case Variant::Full: break;
        case Variant::TargetOnly:
            c.data.use_aux = false;
            c.train.alpha = c.train.beta = c.train.gamma = 0;
            break;
        case Variant::Joint:
            c.train.sigma_clf = 0;
            c.train.force_eta_one = true;
            c.train.beta = 0;
            break;
    }
    c.validate();
    return c;
}

class Benchmark {
public:
    double accuracy(Variant v, std::uint64_t seed, double fraction) {
        const auto key = std::make_tuple(static_cast<int>(v), seed, fraction);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        const auto t0 = Clock::now();
        const RunConfig c = benchmark_config(v, seed, fraction);
        const double acc = train_and_evaluate(c, prepare_data(c)).test_metrics->accuracy;
        cpu_seconds_ += seconds_since(t0);
        return cache_[key] = acc;
    }
    double median(Variant v, double fraction) {
        std::vector<double> a;
        for (std::uint64_t s = 0; s < kSeeds; ++s) a.push_back(accuracy(v, s, fraction));
        std::sort(a.begin(), a.end());
        return a[a.size() / 2];
    }
    double seconds() const { return cpu_seconds_; }

    static constexpr std::uint64_t kSeeds = 3;

private:
    std::map<std::tuple<int, std::uint64_t, double>, double> cache_;
    double cpu_seconds_ = 0;
};

Outcome synthetic_benchmark(Benchmark& b) {
    const double full = b.median(Variant::Full, 1.0), target = b.median(Variant::TargetOnly, 1.0), joint = b.median(Variant::Joint, 1.0);
    const bool ok = full > target && full > joint && b.seconds() <= 600;
    return {ok, "median test accuracy: full " + fmt(full) + ", target-only " + fmt(target) + ", joint " + fmt(joint) + " (" +
                    fmt(b.seconds(), 1) + " s)"};
}

Outcome fraction_trend(Benchmark& b) {
    const std::vector<double> fractions{0.1, 0.2, 0.5, 1.0};
    std::vector<double> gain;
    std::ostringstream d;
    d << "full minus target-only:";
    for (double f : fractions) {
        gain.push_back(b.median(Variant::Full, f) - b.median(Variant::TargetOnly, f));
        d << " " << f << "→" << (gain.back() >= 0 ? "+" : "") << fmt(gain.back());
    }
    bool ok = std::all_of(gain.begin(), gain.end(), [](double g) { return g > 0; });
    for (std::size_t i = 1; i < gain.size(); ++i) ok = ok && gain[0] > gain[i];
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------

Outcome warmup_contract() {
    RunConfig c = benchmark_config(Variant::Full, 0, 1.0);
    const PreparedData data = prepare_data(c);
    const BackboneConfig arch = backbone_for(c, data.train);
    YNet initial(arch, c.train.seed);
    std::vector<Mat> start;
    for (auto* q : initial.projection_parameters()) start.push_back(q->value);

    long warm_steps = 0, changed = 0;
    TrainHooks hooks;
    hooks.after_step = [&](int epoch, int, const YNet& m) {
        if (epoch >= c.train.warmup_epochs) return;
        ++warm_steps;
        std::size_t i = 0;
        for (const Parameter* q : m.parameters())
            if (q->name.rfind("proj.", 0) == 0 && (q->touched || q->value != start[i++])) ++changed;
    };
    const RunOutcome out = train_and_evaluate(c, data, false, hooks);
    int nonzero = 0;
    for (int e = 0; e < c.train.warmup_epochs; ++e)
        if (out.result.history[static_cast<std::size_t>(e)].l_psa != 0.0) ++nonzero;
    const bool live = out.result.history.back().l_psa > 0;
    const bool ok = c.train.warmup_epochs == 5 && warm_steps > 0 && changed == 0 && nonzero == 0 && live;
    std::ostringstream d;
    d << "warm-up " << c.train.warmup_epochs << " epochs, " << warm_steps << " steps checked, " << changed
      << " projection changes, " << nonzero << " non-zero L_psa entries";
    return {ok, d.str()};
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = "'" + std::string(PROTOALIGN_CLI_PATH) + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    const fs::path dir = fs::temp_directory_path() / ("protoalign_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string args = "--no-env train --seed 11 --output-dir ";
    const int a = run_cli(args + "'" + (dir / "a").string() + "'", dir / "a.log");
    const int b = run_cli(args + "'" + (dir / "b").string() + "'", dir / "b.log");
    const std::string ha = slurp(dir / "a" / "history.csv"), hb = slurp(dir / "b" / "history.csv");
    Outcome o;
    if (a != 0 || b != 0)
        o = {false, "train exited with " + std::to_string(a) + " and " + std::to_string(b)};
    else
        o = {!ha.empty() && ha == hb, ha == hb ? "history.csv identical (" + std::to_string(ha.size()) + " bytes)" : "history.csv differs"};
    fs::remove_all(dir);
    return o;
}

std::set<int> parse_list(const std::string& s) {
    std::set<int> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.insert(std::stoi(item));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only, expect_fail;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if ((a == "--only" || a == "--expect-fail") && i + 1 < argc)
            (a == "--only" ? only : expect_fail) = parse_list(argv[++i]);
        else {
            std::cerr << "usage: acceptance [--only N,M] [--expect-fail N,M]\n";
            return 2;
        }
    }

    Benchmark bench;
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, reproducibility_statement},
        {2, gradient_suite},
        {3, oracle_equivalence},
        {4, filtering_invariants},
        {5, mmd_statistical_check},
        {6, [&] { return synthetic_benchmark(bench); }},
        {7, [&] { return fraction_trend(bench); }},
        {8, warmup_contract},
        {9, determinism},
    };

    int unexpected = 0;
    for (const auto& [id, check] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const bool expected = expect_fail.count(id) > 0;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << (!o.pass && expected ? " (expected)" : "")
                  << "  " << o.detail << std::endl;
        if (!o.pass && !expected) ++unexpected;
    }
    return unexpected == 0 ? 0 : 1;
}
