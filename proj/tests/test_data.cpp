#include <catch_amalgamated.hpp>

#include "protoalign/data.hpp"
#include "protoalign/eda.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace protoalign;
namespace fs = std::filesystem;

namespace {

std::string manifest_text(const DatasetManifest& m) {
    std::ostringstream s;
    write_manifest(s, m);
    return s.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("protoalign_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Image pattern(int c, int h, int w, float base) {
    Image img(c, h, w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) img.at(ch, y, x) = std::fmod(base + 0.07f * ch + 0.05f * y + 0.11f * x, 1.0f);
    return img;
}

}  // namespace

TEST_CASE("generate_synthetic_domains: deterministic and byte-identical", "[data]") {
    SyntheticSpec spec;
    spec.n_target = 100;
    spec.n_aux = 300;
    spec.seed = 11;
    const auto a = generate_synthetic_domains(spec);
    const auto b = generate_synthetic_domains(spec);
    CHECK(manifest_text(a.target) == manifest_text(b.target));
    CHECK(manifest_text(a.aux) == manifest_text(b.aux));
    spec.seed = 12;
    CHECK(manifest_text(generate_synthetic_domains(spec).aux) != manifest_text(a.aux));
    CHECK(a.target.domain == Domain::Target);
    CHECK(a.aux.domain == Domain::Auxiliary);
    CHECK(a.target.provenance.rfind("synthetic:fnv1a64=", 0) == 0);
}

TEST_CASE("generate_synthetic_domains: geometry and clean target labels", "[data]") {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.n_target = 600;
    spec.n_aux = 30;
    spec.class_separation = 6.0;
    const auto sd = generate_synthetic_domains(spec);
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) CHECK((sd.class_means.row(i) - sd.class_means.row(j)).norm() == Catch::Approx(6.0).epsilon(1e-12));

    const DomainDataset t = materialize(sd.target);
    CHECK(t.features.cols() == 16);
    CHECK(sd.target.histogram() == std::vector<std::size_t>{200, 200, 200});
    // Each target sample carries the index of the cluster it was drawn from:
    // the per-label mean recovers that cluster's centre.
    for (int k = 0; k < 3; ++k) {
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(16);
        int n = 0;
        for (std::size_t i = 0; i < t.size(); ++i)
            if (t.labels[i] == k) {
                mean += t.features.row(static_cast<Eigen::Index>(i));
                ++n;
            }
        mean /= n;
        CHECK((mean - sd.class_means.row(k)).norm() < 0.5);
    }
}

TEST_CASE("generate_synthetic_domains: identity shift gives matching distributions", "[data]") {
    SyntheticSpec same;
    same.n_target = 400;
    same.n_aux = 400;
    same.rotation_deg = 0;
    same.translation = 0;
    same.mismatch_rate = 0;
    SyntheticSpec shifted = same;
    shifted.rotation_deg = 25;
    shifted.translation = 1.0;

    auto mmd_of = [](const SyntheticSpec& s) {
        const auto sd = generate_synthetic_domains(s);
        const Mat t = materialize(sd.target).features, a = materialize(sd.aux).features;
        return mkmmd<double>(t, a, median_heuristic_bandwidths<double>(stack_rows<double>(t, a), default_kernel_scales()), false).value;
    };
    const double v_same = mmd_of(same), v_shift = mmd_of(shifted);
    CHECK(v_same < 0.02);
    CHECK(v_shift > 5 * v_same);

    const auto sd = generate_synthetic_domains(same);
    CHECK(sd.flips == 0);
    for (std::size_t i = 0; i < sd.aux.size(); ++i) CHECK(sd.aux.records[i].label == sd.aux_clean_labels[i]);
}

TEST_CASE("generate_synthetic_domains: uniform mismatch of 1 inverts binary labels", "[data]") {
    SyntheticSpec spec;
    spec.n_target = 20;
    spec.n_aux = 101;
    spec.mismatch_rate = 1.0;
    spec.mismatch_mode = MismatchMode::Uniform;
    const auto sd = generate_synthetic_domains(spec);
    CHECK(sd.flips == 101);
    for (std::size_t i = 0; i < sd.aux.size(); ++i) CHECK(sd.aux.records[i].label == 1 - sd.aux_clean_labels[i]);
    for (const auto& r : sd.target.records) CHECK(r.id.front() == 't');
}

TEST_CASE("generate_synthetic_domains: boundary mismatch flips the lowest margins", "[data]") {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        SyntheticSpec spec;
        spec.n_target = 20;
        spec.n_aux = 997;
        spec.seed = seed;
        spec.num_classes = seed == 2 ? 3 : 2;
        const auto sd = generate_synthetic_domains(spec);
        const std::size_t expected = static_cast<std::size_t>(0.3 * 997);  // 299
        CHECK(sd.flips == expected);

        std::size_t flipped = 0;
        for (std::size_t i = 0; i < sd.aux.size(); ++i) {
            const bool changed = sd.aux.records[i].label != sd.aux_clean_labels[i];
            CHECK(changed == sd.aux_flipped[i]);
            flipped += changed;
        }
        CHECK(flipped == expected);

        // Rank every sample by margin; all flips sit in the lowest third.
        std::vector<std::size_t> rank(sd.aux_margins.size());
        std::iota(rank.begin(), rank.end(), 0);
        std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return sd.aux_margins[a] < sd.aux_margins[b]; });
        std::vector<std::size_t> pos(rank.size());
        for (std::size_t r = 0; r < rank.size(); ++r) pos[rank[r]] = r;
        for (std::size_t i = 0; i < sd.aux.size(); ++i)
            if (sd.aux_flipped[i]) CHECK(pos[i] < sd.aux.size() / 3);
    }

    SyntheticSpec rates;
    rates.n_aux = 100;
    rates.mismatch_rate = 0.29;
    CHECK(rates.flip_count() == 29);
}

TEST_CASE("balanced_subset_indices: balance and determinism", "[data]") {
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) labels.push_back(i < 100 ? 0 : 1);
    const auto s = balanced_subset_indices(labels, 2, 100, 5);
    CHECK_FALSE(s.with_replacement);
    CHECK(s.indices.size() == 100);
    int c0 = 0;
    for (auto i : s.indices) c0 += labels[i] == 0;
    CHECK(c0 == 50);
    CHECK(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size() == 100);
    CHECK(balanced_subset_indices(labels, 2, 100, 5).indices == s.indices);
    CHECK(balanced_subset_indices(labels, 2, 100, 6).indices != s.indices);

    std::vector<int> three;
    for (int i = 0; i < 90; ++i) three.push_back(i % 3);
    for (std::size_t size : {1u, 2u, 7u, 10u, 44u}) {
        const auto t = balanced_subset_indices(three, 3, size, 1);
        std::vector<int> counts(3, 0);
        for (auto i : t.indices) ++counts[static_cast<std::size_t>(three[i])];
        CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
        CHECK(t.indices.size() == size);
    }

    const auto over = balanced_subset_indices(three, 3, 120, 2);
    CHECK(over.with_replacement);
    CHECK(over.indices.size() == 120);

    CHECK_THROWS_AS(balanced_subset_indices(std::vector<int>{0, 0, 0}, 2, 2, 0), DataError);
}

TEST_CASE("balanced_aux_subset: unique ids even with replacement", "[data]") {
    SyntheticSpec spec;
    spec.n_target = 10;
    spec.n_aux = 10;
    const auto sd = generate_synthetic_domains(spec);
    const auto sub = balanced_aux_subset(sd.aux, 30, 4);
    CHECK(sub.with_replacement);
    CHECK(sub.manifest.size() == 30);
    REQUIRE_NOTHROW(sub.manifest.validate());
    const auto h = sub.manifest.histogram();
    CHECK(h[0] == 15);
    CHECK(h[1] == 15);
}

TEST_CASE("split_indices: disjoint, grouped, 4:1 by default", "[data]") {
    DatasetManifest m;
    m.class_names = {"a", "b"};
    for (int i = 0; i < 100; ++i)
        m.records.push_back({"s" + std::to_string(i), i % 2, i < 60 ? "g" + std::to_string(i / 2) : "-", "vec:0"});
    const Split s = split_indices(m, 0.8, 3);
    CHECK(s.train.size() + s.test.size() == 100);
    CHECK(s.train.size() == 80);
    std::set<std::string> train_ids, test_ids, train_groups, test_groups;
    for (auto i : s.train) {
        train_ids.insert(m.records[i].id);
        if (m.records[i].group != "-") train_groups.insert(m.records[i].group);
    }
    for (auto i : s.test) {
        test_ids.insert(m.records[i].id);
        if (m.records[i].group != "-") test_groups.insert(m.records[i].group);
    }
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
    for (const auto& g : test_groups) CHECK(train_groups.count(g) == 0);
    CHECK(split_indices(m, 0.8, 3).train == s.train);
    CHECK_THROWS_AS(split_indices(m, 1.0, 3), ConfigError);
}

TEST_CASE("stratified_fraction_indices: per-class rounding", "[data]") {
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(i < 40 ? 0 : 1);
    const auto idx = stratified_fraction_indices(labels, 2, 0.1, 1);
    int c0 = 0, c1 = 0;
    for (auto i : idx) (labels[i] == 0 ? c0 : c1)++;
    CHECK(c0 == 4);
    CHECK(c1 == 2);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(stratified_fraction_indices(labels, 2, 1.0, 1).size() == 60);
    CHECK(stratified_fraction_indices(labels, 2, 0.001, 1).size() == 2);
    CHECK_THROWS_AS(stratified_fraction_indices(labels, 2, 0.0, 1), ConfigError);
}

TEST_CASE("manifest: write and read round-trip", "[data]") {
    SyntheticSpec spec;
    spec.n_target = 12;
    spec.n_aux = 9;
    const auto sd = generate_synthetic_domains(spec);
    for (const auto* m : {&sd.target, &sd.aux}) {
        std::istringstream in(manifest_text(*m));
        const DatasetManifest back = read_manifest(in);
        CHECK(back == *m);
        const DomainDataset a = materialize(*m), b = materialize(back);
        CHECK(a.features == b.features);
    }
    std::istringstream garbage("not a manifest\n");
    CHECK_THROWS_AS(read_manifest(garbage), DataError);

    DatasetManifest dup;
    dup.class_names = {"a", "b"};
    dup.records = {{"x", 0, "-", "vec:1"}, {"x", 1, "-", "vec:2"}};
    CHECK_THROWS_AS(dup.validate(), DataError);
}

TEST_CASE("ingest_image_folder: labels from sorted folder names", "[data]") {
    TempDir dir("ingest");
    fs::create_directories(dir.path / "normal");
    fs::create_directories(dir.path / "abnormal" / "nested");
    for (int i = 0; i < 3; ++i) write_netpbm(dir.path / "abnormal" / ("sess" + std::to_string(i) + "__a.ppm"), pattern(3, 5, 7, 0.1f * i));
    for (int i = 0; i < 5; ++i) write_netpbm(dir.path / "normal" / ("n" + std::to_string(i) + ".pgm"), pattern(1, 9, 4, 0.05f * i));
    std::ofstream(dir.path / "abnormal" / "nested" / "notes.txt") << "not an image";
    std::ofstream(dir.path / "normal" / "broken.ppm") << "P6 garbage";

    const IngestResult r = ingest_image_folder(dir.path, 8);
    CHECK(r.manifest.class_names == std::vector<std::string>{"abnormal", "normal"});
    CHECK(r.manifest.histogram() == std::vector<std::size_t>{3, 5});
    CHECK(r.warnings == 2);
    CHECK(r.skipped.size() == 2);
    CHECK(r.manifest.records.front().group == "sess0");
    CHECK(r.manifest.records.back().group == "-");

    const IngestResult again = ingest_image_folder(dir.path, 8);
    CHECK(again.manifest == r.manifest);

    const DomainDataset ds = materialize(r.manifest);
    CHECK(ds.kind == InputKind::Image);
    CHECK(ds.features.rows() == 8);
    CHECK(ds.features.cols() == 3 * 8 * 8);

    fs::create_directories(dir.path / "zempty");
    CHECK_THROWS_AS(ingest_image_folder(dir.path, 8), DataError);
}

TEST_CASE("augment: identity, flip involution, determinism", "[data]") {
    const Image img = pattern(3, 6, 5, 0.2f);
    Rng rng(1);
    CHECK(augment(img, AugmentPolicy::none(), rng) == img);

    AugmentPolicy flip = AugmentPolicy::none();
    flip.p_hflip = 1.0;
    Rng r2(2);
    const Image once = augment(img, flip, r2);
    CHECK_FALSE(once == img);
    CHECK(once.at(1, 2, 0) == img.at(1, 2, 4));
    CHECK(augment(once, flip, r2) == img);

    const AugmentPolicy full;
    Rng a(9), b(9);
    for (int i = 0; i < 5; ++i) CHECK(augment(img, full, a) == augment(img, full, b));

    // Vectors pass through untouched.
    Rng r3(3);
    const Mat v = Mat::Constant(2, 4, 0.5);
    CHECK(augment_batch(v, InputKind::Vector, TensorShape{4, 1, 1}, full, r3) == v);
}
