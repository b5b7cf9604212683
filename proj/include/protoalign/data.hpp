#pragma once

// Datasets: manifests and their text format, the synthetic two-domain
// generator, the class-balanced auxiliary sampler, group-aware splitting,
// image-folder ingestion, augmentation and materialization into matrices.

#include "common.hpp"
#include "image_io.hpp"
#include "model.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace protoalign {

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

enum class PayloadKind { Vector, Image };

struct SampleRecord {
    std::string id;
    int label = 0;
    std::string group = "-";  // "-" means ungrouped
    std::string locator;      // "vec:<comma-separated doubles>" or an image path
    bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
    Domain domain = Domain::Target;
    PayloadKind payload = PayloadKind::Vector;
    int image_size = 0;  // square resize target for image payloads
    std::vector<std::string> class_names;
    std::vector<SampleRecord> records;
    std::string provenance;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }

    std::vector<std::size_t> histogram() const {
        std::vector<std::size_t> h(class_names.size(), 0);
        for (const auto& r : records) ++h.at(static_cast<std::size_t>(r.label));
        return h;
    }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(records.size());
        for (const auto& r : records) out.push_back(r.label);
        return out;
    }

    void validate() const {
        if (class_names.size() < 2) throw DataError("manifest needs at least 2 classes");
        std::unordered_set<std::string> seen;
        for (const auto& r : records) {
            if (r.id.empty()) throw DataError("manifest record with empty id");
            if (!seen.insert(r.id).second) throw DataError("duplicate sample id '" + r.id + "'");
            if (r.label < 0 || r.label >= num_classes())
                throw DataError("sample '" + r.id + "' has label " + std::to_string(r.label) + " out of range");
            if (r.id.find_first_of("\t\n") != std::string::npos || r.locator.find_first_of("\t\n") != std::string::npos)
                throw DataError("sample '" + r.id + "': tabs and newlines are not allowed in fields");
        }
        if (payload == PayloadKind::Image && image_size <= 0)
            throw DataError("image manifest needs a positive image_size");
    }

    bool operator==(const DatasetManifest&) const = default;
};

inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw DataError("cannot parse number '" + std::string(s) + "'");
    return v;
}

inline std::string encode_vector(std::span<const double> v) {
    std::string out = "vec:";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out.push_back(',');
        out += format_double(v[i]);
    }
    return out;
}

inline std::vector<double> decode_vector(std::string_view locator) {
    if (locator.substr(0, 4) != "vec:") throw DataError("locator is not an inline vector");
    std::vector<double> out;
    std::string_view rest = locator.substr(4);
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        out.push_back(parse_double(rest.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
    }
    return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return out;
}

inline constexpr const char* kManifestMagic = "# protoalign-manifest v1";

// Header lines "# key: value" in fixed order, then a tab-separated column
// header and one record per line: id, label, group, locator.
inline void write_manifest(std::ostream& out, const DatasetManifest& m) {
    m.validate();
    out << kManifestMagic << "\n";
    out << "# domain: " << domain_name(m.domain) << "\n";
    out << "# payload: " << (m.payload == PayloadKind::Vector ? "vector" : "image") << "\n";
    out << "# image_size: " << m.image_size << "\n";
    out << "# classes: ";
    for (std::size_t i = 0; i < m.class_names.size(); ++i) out << (i ? "," : "") << m.class_names[i];
    out << "\n# histogram: ";
    const auto h = m.histogram();
    for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
    out << "\n# provenance: " << m.provenance << "\n";
    out << "id\tlabel\tgroup\tlocator\n";
    for (const auto& r : m.records) out << r.id << '\t' << r.label << '\t' << r.group << '\t' << r.locator << '\n';
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path.string());
    write_manifest(out, m);
}

inline std::vector<std::string> split_string(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

inline DatasetManifest read_manifest(std::istream& in, const std::string& source = "<stream>") {
    DatasetManifest m;
    std::string line;
    if (!std::getline(in, line) || line != kManifestMagic)
        throw DataError(source + ": not a protoalign manifest");
    std::map<std::string, std::string> header;
    while (std::getline(in, line)) {
        if (line.rfind("# ", 0) != 0) break;
        const auto colon = line.find(": ");
        const std::string key = line.substr(2, colon == std::string::npos ? std::string::npos : colon - 2);
        header[key] = colon == std::string::npos ? "" : line.substr(colon + 2);
    }
    if (line != "id\tlabel\tgroup\tlocator") throw DataError(source + ": missing column header");
    for (const char* key : {"domain", "payload", "image_size", "classes", "provenance"})
        if (!header.count(key)) throw DataError(source + ": missing header field '" + key + "'");
    m.domain = parse_domain(header["domain"]);
    if (header["payload"] == "vector") m.payload = PayloadKind::Vector;
    else if (header["payload"] == "image") m.payload = PayloadKind::Image;
    else throw DataError(source + ": unknown payload '" + header["payload"] + "'");
    m.image_size = static_cast<int>(parse_double(header["image_size"]));
    m.class_names = split_string(header["classes"], ',');
    m.provenance = header["provenance"];
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = split_string(line, '\t');
        if (fields.size() != 4) throw DataError(source + ": record " + std::to_string(lineno) + " needs 4 fields");
        SampleRecord r;
        r.id = fields[0];
        r.label = static_cast<int>(parse_double(fields[1]));
        r.group = fields[2];
        r.locator = fields[3];
        m.records.push_back(std::move(r));
    }
    m.validate();
    if (header.count("histogram")) {
        std::string expect;
        const auto h = m.histogram();
        for (std::size_t i = 0; i < h.size(); ++i) expect += (i ? "," : "") + std::to_string(h[i]);
        if (expect != header["histogram"]) throw DataError(source + ": histogram header disagrees with records");
    }
    return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest " + path.string());
    return read_manifest(in, path.string());
}

inline DatasetManifest select_records(const DatasetManifest& m, std::span<const std::size_t> indices) {
    DatasetManifest out = m;
    out.records.clear();
    out.records.reserve(indices.size());
    for (std::size_t i : indices) out.records.push_back(m.records.at(i));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic two-domain benchmark
// ---------------------------------------------------------------------------

enum class MismatchMode { Uniform, Boundary };

inline MismatchMode parse_mismatch_mode(const std::string& s) {
    if (s == "uniform") return MismatchMode::Uniform;
    if (s == "boundary") return MismatchMode::Boundary;
    throw ConfigError("mismatch_mode must be uniform|boundary, got '" + s + "'");
}

inline const char* mismatch_mode_name(MismatchMode m) {
    return m == MismatchMode::Uniform ? "uniform" : "boundary";
}

struct SyntheticSpec {
    int num_classes = 2;
    int dim = 16;
    int n_target = 800;
    int n_aux = 4000;
    // Distance between any two class means.
    double class_separation = 3.0;
    // Auxiliary shift: rotation (degrees) in the plane spanned by the first
    // class-mean difference and a seeded orthogonal direction, then a
    // translation of this length along a seeded unit direction.
    double rotation_deg = 25.0;
    double translation = 1.0;
    double mismatch_rate = 0.3;
    MismatchMode mismatch_mode = MismatchMode::Boundary;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw ConfigError("synthetic.num_classes must be >= 2");
        if (dim < num_classes) throw ConfigError("synthetic.dim must be >= num_classes");
        if (n_target < num_classes) throw ConfigError("synthetic.n_target must cover every class");
        if (n_aux < 0) throw ConfigError("synthetic.n_aux must be >= 0");
        if (!(class_separation > 0)) throw ConfigError("synthetic.class_separation must be positive");
        if (!(mismatch_rate >= 0 && mismatch_rate <= 1)) throw ConfigError("synthetic.mismatch_rate must lie in [0,1]");
        if (!std::isfinite(rotation_deg) || !std::isfinite(translation)) throw ConfigError("synthetic shift must be finite");
    }

    std::string canonical() const {
        std::ostringstream s;
        s << "K=" << num_classes << ";dim=" << dim << ";nt=" << n_target << ";na=" << n_aux
          << ";sep=" << format_double(class_separation) << ";rot=" << format_double(rotation_deg)
          << ";trans=" << format_double(translation) << ";mis=" << format_double(mismatch_rate)
          << ";mode=" << mismatch_mode_name(mismatch_mode) << ";seed=" << seed;
        return s.str();
    }

    std::size_t flip_count() const {
        // The epsilon keeps products like 0.29 * 100 from flooring to 28.
        return static_cast<std::size_t>(std::floor(mismatch_rate * n_aux + 1e-9));
    }
};

struct SyntheticDomains {
    DatasetManifest target;
    DatasetManifest aux;
    Mat class_means;                   // K x dim, pre-shift
    std::vector<int> aux_clean_labels;
    std::vector<double> aux_margins;   // distance to the nearest class bisector, pre-shift
    std::vector<bool> aux_flipped;
    std::size_t flips = 0;
};

namespace detail {

inline Vec random_unit(Rng& rng, int dim) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = standard_normal(rng);
    return v / v.norm();
}

inline std::vector<std::string> default_class_names(int k) {
    std::vector<std::string> out;
    for (int i = 0; i < k; ++i) out.push_back("class" + std::to_string(i));
    return out;
}

inline std::string padded_id(char prefix, std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(1, prefix) + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

}  // namespace detail

inline SyntheticDomains generate_synthetic_domains(const SyntheticSpec& spec) {
    spec.validate();
    const int K = spec.num_classes;
    const int d = spec.dim;
    Rng rng(spec.seed);

    // Regular simplex with pairwise distance class_separation, embedded by a
    // seeded orthonormal basis.
    Mat gauss(d, K);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < K; ++k) gauss(i, k) = standard_normal(rng);
    const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ() * Eigen::MatrixXd::Identity(d, K);
    Eigen::MatrixXd simplex = Eigen::MatrixXd::Identity(K, K);
    simplex.array() -= 1.0 / K;
    const Mat means = ((basis * simplex) * (spec.class_separation / std::sqrt(2.0))).transpose();

    // Shift parameters.
    const Vec axis_a = (means.row(0) - means.row(1)).transpose().normalized();
    Vec axis_b = detail::random_unit(rng, d);
    axis_b -= axis_b.dot(axis_a) * axis_a;
    axis_b.normalize();
    const Vec shift_dir = detail::random_unit(rng, d);
    const double theta = spec.rotation_deg * M_PI / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);

    auto sample = [&](int label) {
        Vec x = means.row(label).transpose();
        for (int i = 0; i < d; ++i) x(i) += standard_normal(rng);
        return x;
    };

    SyntheticDomains out;
    out.class_means = means;
    const std::string prov = "synthetic:fnv1a64=" + hex64(fnv1a64(spec.canonical()));
    for (DatasetManifest* m : {&out.target, &out.aux}) {
        m->payload = PayloadKind::Vector;
        m->class_names = detail::default_class_names(K);
        m->provenance = prov;
    }
    out.target.domain = Domain::Target;
    out.aux.domain = Domain::Auxiliary;

    for (int i = 0; i < spec.n_target; ++i) {
        const int y = i % K;
        const Vec x = sample(y);
        out.target.records.push_back({detail::padded_id('t', static_cast<std::size_t>(i)), y, "-",
                                      encode_vector(std::span<const double>(x.data(), static_cast<std::size_t>(d)))});
    }

    std::vector<Vec> aux_x;
    std::vector<int> runner_up;
    for (int i = 0; i < spec.n_aux; ++i) {
        const int y = i % K;
        Vec x = sample(y);
        // Margin: distance to the closest bisector between the nearest mean and any other.
        Vec d2(K);
        for (int k = 0; k < K; ++k) d2(k) = (x - means.row(k).transpose()).squaredNorm();
        int nearest = 0;
        d2.minCoeff(&nearest);
        double margin = std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k)
            if (k != nearest)
                margin = std::min(margin, (d2(k) - d2(nearest)) / (2.0 * (means.row(k) - means.row(nearest)).norm()));
        int other = -1;
        for (int k = 0; k < K; ++k)
            if (k != y && (other < 0 || d2(k) < d2(other))) other = k;

        const double pa = x.dot(axis_a), pb = x.dot(axis_b);
        x += (ct - 1.0) * (pa * axis_a + pb * axis_b) + st * (pa * axis_b - pb * axis_a);
        x += spec.translation * shift_dir;

        aux_x.push_back(std::move(x));
        out.aux_clean_labels.push_back(y);
        out.aux_margins.push_back(margin);
        runner_up.push_back(other);
    }

    const std::size_t n_flip = spec.flip_count();
    out.aux_flipped.assign(static_cast<std::size_t>(spec.n_aux), false);
    std::vector<int> labels = out.aux_clean_labels;
    std::vector<std::size_t> order(static_cast<std::size_t>(spec.n_aux));
    std::iota(order.begin(), order.end(), 0);
    if (spec.mismatch_mode == MismatchMode::Uniform) {
        for (std::size_t i = 0; i < n_flip; ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
        for (std::size_t i = 0; i < n_flip; ++i) {
            const std::size_t s = order[i];
            labels[s] = (labels[s] + 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(K - 1)))) % K;
            out.aux_flipped[s] = true;
        }
    } else {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return out.aux_margins[a] < out.aux_margins[b]; });
        for (std::size_t i = 0; i < n_flip; ++i) {
            const std::size_t s = order[i];
            labels[s] = runner_up[s];
            out.aux_flipped[s] = true;
        }
    }
    out.flips = n_flip;

    for (int i = 0; i < spec.n_aux; ++i) {
        const auto& x = aux_x[static_cast<std::size_t>(i)];
        out.aux.records.push_back({detail::padded_id('a', static_cast<std::size_t>(i)), labels[static_cast<std::size_t>(i)], "-",
                                   encode_vector(std::span<const double>(x.data(), static_cast<std::size_t>(d)))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling and splitting
// ---------------------------------------------------------------------------

struct BalancedSubset {
    std::vector<std::size_t> indices;  // into the source, shuffled
    bool with_replacement = false;     // some class had fewer samples than its quota
};

// Class-balanced draw of `size` indices: quotas differ by at most one,
// lower class indices receive the remainder.
inline BalancedSubset balanced_subset_indices(std::span<const int> labels, int num_classes, std::size_t size,
                                              std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
    for (int k = 0; k < num_classes; ++k)
        if (by_class[static_cast<std::size_t>(k)].empty())
            throw DataError("balanced sampler: auxiliary class " + std::to_string(k) + " is empty");

    Rng rng(seed);
    BalancedSubset out;
    for (int k = 0; k < num_classes; ++k) {
        const std::size_t quota = size / static_cast<std::size_t>(num_classes) +
                                  (static_cast<std::size_t>(k) < size % static_cast<std::size_t>(num_classes) ? 1 : 0);
        auto& pool = by_class[static_cast<std::size_t>(k)];
        if (quota <= pool.size()) {
            for (std::size_t i = 0; i < quota; ++i) {
                std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
                out.indices.push_back(pool[i]);
            }
        } else {
            out.with_replacement = true;
            for (std::size_t i = 0; i < quota; ++i) out.indices.push_back(pool[uniform_index(rng, pool.size())]);
        }
    }
    shuffle_in_place(out.indices, rng);
    return out;
}

struct SubsetManifest {
    DatasetManifest manifest;
    bool with_replacement = false;
};

inline SubsetManifest balanced_aux_subset(const DatasetManifest& aux, std::size_t size, std::uint64_t seed) {
    const auto labels = aux.labels();
    const BalancedSubset s = balanced_subset_indices(labels, aux.num_classes(), size, seed);
    SubsetManifest out{select_records(aux, s.indices), s.with_replacement};
    // Repeated draws get a suffix so ids stay unique.
    std::map<std::string, int> seen;
    for (auto& r : out.manifest.records) {
        const int n = seen[r.id]++;
        if (n > 0) r.id += "~r" + std::to_string(n);
    }
    return out;
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Group-aware train/test split. Records sharing a group id stay together;
// ungrouped records ("-" or empty) are their own group.
inline Split split_indices(const DatasetManifest& m, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train fraction must lie in (0,1)");
    std::vector<std::vector<std::size_t>> groups;
    std::map<std::string, std::size_t> group_index;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const std::string& g = m.records[i].group;
        if (g.empty() || g == "-") {
            groups.push_back({i});
            continue;
        }
        auto [it, inserted] = group_index.try_emplace(g, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(i);
    }
    Rng rng(seed);
    shuffle_in_place(groups, rng);
    const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(m.records.size())));
    Split s;
    for (const auto& g : groups) {
        auto& dst = s.train.size() + g.size() <= target ? s.train : s.test;
        dst.insert(dst.end(), g.begin(), g.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

// Class-stratified subsample keeping round(fraction * n_k) (at least one) per class.
inline std::vector<std::size_t> stratified_fraction_indices(std::span<const int> labels, int num_classes,
                                                            double fraction, std::uint64_t seed) {
    if (!(fraction > 0 && fraction <= 1)) throw ConfigError("target fraction must lie in (0,1]");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
    Rng rng(seed);
    std::vector<std::size_t> out;
    for (auto& pool : by_class) {
        if (pool.empty()) continue;
        const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size()))));
        shuffle_in_place(pool, rng);
        out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(keep, pool.size())));
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Image folders
// ---------------------------------------------------------------------------

struct IngestResult {
    DatasetManifest manifest;
    std::size_t warnings = 0;
    std::vector<std::string> skipped;
};

// root/<class_name>/<files...>; classes sorted lexicographically. Files whose
// stem contains "__" use the prefix as their group id (e.g. a session id).
inline IngestResult ingest_image_folder(const std::filesystem::path& root, int image_size, Domain domain = Domain::Target) {
    namespace fs = std::filesystem;
    if (image_size <= 0) throw ConfigError("image_size must be positive");
    if (!fs::is_directory(root)) throw DataError("image folder " + root.string() + " does not exist");
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2) throw DataError("image folder " + root.string() + " needs at least 2 class folders");

    IngestResult out;
    out.manifest.domain = domain;
    out.manifest.payload = PayloadKind::Image;
    out.manifest.image_size = image_size;
    out.manifest.provenance = "folder:" + fs::absolute(root).lexically_normal().string();
    for (std::size_t k = 0; k < class_dirs.size(); ++k) {
        const std::string cls = class_dirs[k].filename().string();
        out.manifest.class_names.push_back(cls);
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(class_dirs[k]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::size_t accepted = 0;
        for (const auto& f : files) {
            if (!load_image(f)) {
                ++out.warnings;
                out.skipped.push_back(f.string());
                continue;
            }
            const std::string rel = fs::relative(f, root).generic_string();
            const std::string stem = f.stem().string();
            const auto sep = stem.find("__");
            out.manifest.records.push_back({rel, static_cast<int>(k), sep == std::string::npos ? "-" : stem.substr(0, sep),
                                            fs::absolute(f).lexically_normal().string()});
            ++accepted;
        }
        if (accepted == 0) throw DataError("class folder '" + cls + "' contains no readable images");
    }
    out.manifest.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    double p_color_jitter = 0.8;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double p_grayscale = 0.2;
    double p_blur = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
    double p_hflip = 0.5;

    static AugmentPolicy none() { return {0, 0.4, 0.4, 0.4, 0, 0, 0.1, 2.0, 0}; }
    bool is_identity() const { return p_color_jitter <= 0 && p_grayscale <= 0 && p_blur <= 0 && p_hflip <= 0; }
};

inline void horizontal_flip(Image& img) {
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width / 2; ++x) std::swap(img.at(c, y, x), img.at(c, y, img.width - 1 - x));
}

inline float luminance(const Image& img, int y, int x) {
    if (img.channels < 3) return img.at(0, y, x);
    return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

inline void to_grayscale(Image& img) {
    if (img.channels < 3) return;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float l = luminance(img, y, x);
            for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = l;
        }
}

inline void color_jitter(Image& img, double brightness, double contrast, double saturation) {
    for (float& v : img.data) v = std::clamp(static_cast<float>(v * brightness), 0.0f, 1.0f);
    double mean = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) mean += luminance(img, y, x);
    mean /= std::max(1, img.height * img.width);
    for (float& v : img.data) v = std::clamp(static_cast<float>((v - mean) * contrast + mean), 0.0f, 1.0f);
    if (img.channels >= 3) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const float l = luminance(img, y, x);
                for (int c = 0; c < img.channels; ++c)
                    img.at(c, y, x) = std::clamp(static_cast<float>((img.at(c, y, x) - l) * saturation + l), 0.0f, 1.0f);
            }
    }
}

// Separable Gaussian blur with clamped borders.
inline void gaussian_blur(Image& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0;
    for (int i = -radius; i <= radius; ++i) total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& k : kernel) k /= total;
    Image tmp = img;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double s = 0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[static_cast<std::size_t>(i + radius)] * img.at(c, y, std::clamp(x + i, 0, img.width - 1));
                tmp.at(c, y, x) = static_cast<float>(s);
            }
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double s = 0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(c, std::clamp(y + i, 0, img.height - 1), x);
                img.at(c, y, x) = static_cast<float>(s);
            }
}

// Color jitter, grayscale, blur and horizontal flip, each with its own
// probability. The rng is advanced the same way regardless of outcomes.
inline Image augment(Image img, const AugmentPolicy& p, Rng& rng) {
    const double u_jitter = uniform_real(rng);
    const double b = uniform_real(rng, 1 - p.brightness, 1 + p.brightness);
    const double c = uniform_real(rng, 1 - p.contrast, 1 + p.contrast);
    const double s = uniform_real(rng, 1 - p.saturation, 1 + p.saturation);
    const double u_gray = uniform_real(rng);
    const double u_blur = uniform_real(rng);
    const double sigma = uniform_real(rng, p.blur_sigma_min, p.blur_sigma_max);
    const double u_flip = uniform_real(rng);
    if (u_jitter < p.p_color_jitter) color_jitter(img, b, c, s);
    if (u_gray < p.p_grayscale) to_grayscale(img);
    if (u_blur < p.p_blur) gaussian_blur(img, sigma);
    if (u_flip < p.p_hflip) horizontal_flip(img);
    return img;
}

// ---------------------------------------------------------------------------
// Materialized datasets
// ---------------------------------------------------------------------------

struct DomainDataset {
    Domain domain = Domain::Target;
    InputKind kind = InputKind::Vector;
    TensorShape shape;
    int num_classes = 0;
    Mat features;  // one row per sample (CHW-flattened for images)
    std::vector<int> labels;
    std::vector<std::string> ids;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    DomainDataset subset(std::span<const std::size_t> idx) const {
        DomainDataset out;
        out.domain = domain;
        out.kind = kind;
        out.shape = shape;
        out.num_classes = num_classes;
        out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
            out.labels.push_back(labels.at(idx[i]));
            out.ids.push_back(ids.at(idx[i]));
        }
        return out;
    }
};

inline Image row_to_image(const Eigen::Ref<const Eigen::RowVectorXd>& row, TensorShape shape) {
    Image img(shape.channels, shape.height, shape.width);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(row(static_cast<Eigen::Index>(i)));
    return img;
}

inline Eigen::RowVectorXd image_to_row(const Image& img) {
    Eigen::RowVectorXd row(static_cast<Eigen::Index>(img.data.size()));
    for (std::size_t i = 0; i < img.data.size(); ++i) row(static_cast<Eigen::Index>(i)) = img.data[i];
    return row;
}

// Vector payloads pass through unchanged.
inline Mat augment_batch(const Mat& batch, InputKind kind, TensorShape shape, const AugmentPolicy& p, Rng& rng) {
    if (kind == InputKind::Vector || p.is_identity()) return batch;
    Mat out(batch.rows(), batch.cols());
    for (Eigen::Index i = 0; i < batch.rows(); ++i)
        out.row(i) = image_to_row(augment(row_to_image(batch.row(i), shape), p, rng));
    return out;
}

inline DomainDataset materialize(const DatasetManifest& m) {
    m.validate();
    DomainDataset ds;
    ds.domain = m.domain;
    ds.num_classes = m.num_classes();
    if (m.payload == PayloadKind::Vector) {
        ds.kind = InputKind::Vector;
        int dim = -1;
        std::vector<std::vector<double>> rows;
        for (const auto& r : m.records) {
            rows.push_back(decode_vector(r.locator));
            if (dim < 0) dim = static_cast<int>(rows.back().size());
            if (static_cast<int>(rows.back().size()) != dim)
                throw DataError("sample '" + r.id + "' has a different vector length");
        }
        ds.shape = TensorShape{std::max(dim, 0), 1, 1};
        ds.features.resize(static_cast<Eigen::Index>(rows.size()), std::max(dim, 0));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < dim; ++j) ds.features(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    } else {
        ds.kind = InputKind::Image;
        ds.shape = TensorShape{3, m.image_size, m.image_size};
        ds.features.resize(static_cast<Eigen::Index>(m.records.size()), ds.shape.size());
        for (std::size_t i = 0; i < m.records.size(); ++i) {
            auto img = load_image(m.records[i].locator);
            if (!img) throw DataError("cannot decode image '" + m.records[i].locator + "'");
            ds.features.row(static_cast<Eigen::Index>(i)) = image_to_row(resize_bilinear(to_rgb(*img), m.image_size, m.image_size));
        }
    }
    for (const auto& r : m.records) {
        ds.labels.push_back(r.label);
        ds.ids.push_back(r.id);
    }
    return ds;
}

}  // namespace protoalign
