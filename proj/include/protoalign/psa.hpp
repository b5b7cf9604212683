#pragma once

// Prototypical semantic alignment: target class prototypes in the FC_1
// feature space, distance-based soft assignment of auxiliary samples, the
// cross-domain label consistency score, threshold filtering and the
// supervised contrastive loss on projection-head outputs.

#include "common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace protoalign {

template <typename Scalar>
struct PrototypeTable {
    RowMatrix<Scalar> prototypes;            // K x d; undefined rows are zero
    std::vector<std::size_t> class_counts;   // target samples per class
    int epoch_stamp = -1;

    int num_classes() const { return static_cast<int>(prototypes.rows()); }
    int dim() const { return static_cast<int>(prototypes.cols()); }
    bool defined(int k) const { return class_counts.at(static_cast<std::size_t>(k)) > 0; }
    bool complete() const {
        for (std::size_t c : class_counts)
            if (c == 0) return false;
        return true;
    }
};

template <typename Scalar>
PrototypeTable<Scalar> compute_prototypes(const RowMatrix<Scalar>& features, std::span<const int> labels,
                                          int num_classes, int epoch = 0) {
    if (static_cast<std::size_t>(features.rows()) != labels.size())
        throw ConfigError("compute_prototypes: features and labels differ in length");
    if (num_classes < 2) throw ConfigError("compute_prototypes: need at least 2 classes");

    PrototypeTable<Scalar> t;
    t.prototypes = RowMatrix<Scalar>::Zero(num_classes, features.cols());
    t.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
    t.epoch_stamp = epoch;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= num_classes)
            throw DataError("compute_prototypes: label " + std::to_string(y) + " out of range");
        t.prototypes.row(y) += features.row(i);
        ++t.class_counts[static_cast<std::size_t>(y)];
    }
    for (int k = 0; k < num_classes; ++k)
        if (t.class_counts[static_cast<std::size_t>(k)] > 0)
            t.prototypes.row(k) /= static_cast<Scalar>(t.class_counts[static_cast<std::size_t>(k)]);
    return t;
}

// U[k] = softmax_k(-|f - P_k|_2), plain (not squared) Euclidean distance.
template <typename Scalar, typename Derived>
ColVector<Scalar> soft_assign(const Eigen::MatrixBase<Derived>& f, const PrototypeTable<Scalar>& table) {
    if (f.size() != table.dim())
        throw ConfigError("soft_assign: feature has " + std::to_string(f.size()) +
                          " dims, prototypes have " + std::to_string(table.dim()));
    const int K = table.num_classes();
    ColVector<Scalar> neg_dist(K);
    for (int k = 0; k < K; ++k) {
        if (!table.defined(k))
            throw DataError("soft_assign: prototype for class " + std::to_string(k) +
                            " is undefined (no target samples of that class)");
        Scalar s = 0;
        for (Eigen::Index c = 0; c < f.size(); ++c) {
            const Scalar d = static_cast<Scalar>(f(c)) - table.prototypes(k, c);
            s += d * d;
        }
        neg_dist(k) = -std::sqrt(s);
    }
    const Scalar m = neg_dist.maxCoeff();
    ColVector<Scalar> u = (neg_dist.array() - m).exp().matrix();
    u /= u.sum();
    return u;
}

template <typename Scalar>
RowMatrix<Scalar> soft_assign_batch(const RowMatrix<Scalar>& features, const PrototypeTable<Scalar>& table) {
    RowMatrix<Scalar> u(features.rows(), table.num_classes());
    for (Eigen::Index i = 0; i < features.rows(); ++i) u.row(i) = soft_assign(features.row(i).transpose(), table).transpose();
    return u;
}

// eta = U . onehot(label)
template <typename Derived>
typename Derived::Scalar consistency_score(const Eigen::MatrixBase<Derived>& u, int label) {
    if (label < 0 || label >= u.size())
        throw DataError("consistency_score: label " + std::to_string(label) + " out of range");
    return u(label);
}

struct ConsistencyRecord {
    std::string sample_id;
    Vec assignment;
    double eta = 1.0;
};

// mask[i] = eta[i] >= sigma (inclusive).
template <typename Scalar>
std::vector<bool> filter_mask(std::span<const Scalar> etas, Scalar sigma) {
    std::vector<bool> mask(etas.size());
    for (std::size_t i = 0; i < etas.size(); ++i) mask[i] = etas[i] >= sigma;
    return mask;
}

namespace detail {

template <typename Scalar>
RowMatrix<Scalar> normalize_rows(const RowMatrix<Scalar>& z, ColVector<Scalar>& norms) {
    norms.resize(z.rows());
    RowMatrix<Scalar> zn(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        norms(i) = z.row(i).norm();
        if (!(norms(i) > 0) || !std::isfinite(static_cast<double>(norms(i))))
            throw NumericError("supcon_loss", "projection row " + std::to_string(i) + " has zero or non-finite norm");
        zn.row(i) = z.row(i) / norms(i);
    }
    return zn;
}

template <typename Scalar>
Scalar log_sum_exp(std::span<const Scalar> v) {
    Scalar m = v[0];
    for (Scalar x : v) m = std::max(m, x);
    Scalar s = 0;
    for (Scalar x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace detail

// Supervised contrastive loss of one anchor over the batch z_all:
//   -log( mean_{p in Q+(i)} exp(sim_ip / tau) / sum_{q in Q(i)} exp(sim_iq / tau) )
// with Q(i) = batch minus i and Q+(i) the same-label members of Q(i).
// Returns nullopt when the anchor has no positive.
template <typename Scalar>
std::optional<Scalar> supcon_loss(Eigen::Index anchor, const RowMatrix<Scalar>& z_all,
                                  std::span<const int> labels, Scalar temperature = 1) {
    if (static_cast<std::size_t>(z_all.rows()) != labels.size())
        throw ConfigError("supcon_loss: projections and labels differ in length");
    if (anchor < 0 || anchor >= z_all.rows()) throw ConfigError("supcon_loss: anchor out of range");
    ColVector<Scalar> norms;
    const RowMatrix<Scalar> zn = detail::normalize_rows(z_all, norms);
    std::vector<Scalar> all, pos;
    for (Eigen::Index q = 0; q < z_all.rows(); ++q) {
        if (q == anchor) continue;
        const Scalar s = zn.row(anchor).dot(zn.row(q)) / temperature;
        all.push_back(s);
        if (labels[static_cast<std::size_t>(q)] == labels[static_cast<std::size_t>(anchor)]) pos.push_back(s);
    }
    if (pos.empty()) return std::nullopt;
    return detail::log_sum_exp<Scalar>(all) - detail::log_sum_exp<Scalar>(pos) +
           std::log(static_cast<Scalar>(pos.size()));
}

template <typename Scalar>
struct SupConResult {
    Scalar sum{};             // sum of per-anchor losses over valid anchors
    int n_valid = 0;          // anchors with at least one positive
    int n_no_positive = 0;
    RowMatrix<Scalar> grad;   // d(sum)/dz
};

// Every row of z_all is an anchor.
template <typename Scalar>
SupConResult<Scalar> supcon_batch(const RowMatrix<Scalar>& z_all, std::span<const int> labels,
                                  Scalar temperature = 1) {
    if (static_cast<std::size_t>(z_all.rows()) != labels.size())
        throw ConfigError("supcon_batch: projections and labels differ in length");
    const Eigen::Index n = z_all.rows();
    SupConResult<Scalar> r;
    r.grad = RowMatrix<Scalar>::Zero(n, z_all.cols());
    if (n == 0) return r;

    ColVector<Scalar> norms;
    const RowMatrix<Scalar> zn = detail::normalize_rows(z_all, norms);
    const RowMatrix<Scalar> logits = (zn * zn.transpose()) / temperature;
    // coeff(i, j) = dL_i / d sim_ij
    RowMatrix<Scalar> coeff = RowMatrix<Scalar>::Zero(n, n);

    for (Eigen::Index i = 0; i < n; ++i) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        Scalar mp = m;
        int npos = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            m = std::max(m, logits(i, j));
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
                mp = std::max(mp, logits(i, j));
                ++npos;
            }
        }
        if (npos == 0) {
            ++r.n_no_positive;
            continue;
        }
        Scalar sa = 0, sp = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            sa += std::exp(logits(i, j) - m);
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)])
                sp += std::exp(logits(i, j) - mp);
        }
        r.sum += (m + std::log(sa)) - (mp + std::log(sp)) + std::log(static_cast<Scalar>(npos));
        ++r.n_valid;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            Scalar c = std::exp(logits(i, j) - m) / sa;
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)])
                c -= std::exp(logits(i, j) - mp) / sp;
            coeff(i, j) = c / temperature;
        }
    }

    // sim_ij = zn_i . zn_j, then back through the row normalization.
    const RowMatrix<Scalar> dzn = coeff * zn + coeff.transpose() * zn;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar radial = dzn.row(i).dot(zn.row(i));
        r.grad.row(i) = (dzn.row(i) - radial * zn.row(i)) / norms(i);
    }
    return r;
}

template <typename Scalar>
struct PsaResult {
    Scalar value{};
    RowMatrix<Scalar> grad_target;  // dL_psa / dz_target
    RowMatrix<Scalar> grad_aux;     // dL_psa / dz_aux; zero rows for filtered-out samples
    int n_aux_used = 0;             // auxiliary samples passing sigma_align
    int n_valid_anchors = 0;
    int n_dropped_anchors = 0;      // anchors without positives
    bool all_dropped = false;
};

// Average supervised contrastive loss over the union of the target batch and
// the sigma_align-filtered auxiliary batch.
template <typename Scalar>
PsaResult<Scalar> psa_loss(const RowMatrix<Scalar>& z_target, std::span<const int> y_target,
                           const RowMatrix<Scalar>& z_aux, std::span<const int> y_aux,
                           std::span<const Scalar> etas, Scalar sigma_align, Scalar temperature = 1) {
    if (z_target.rows() == 0) throw DataError("psa_loss: empty target batch");
    if (static_cast<std::size_t>(z_aux.rows()) != y_aux.size() || y_aux.size() != etas.size())
        throw ConfigError("psa_loss: auxiliary projections, labels and etas differ in length");
    if (z_aux.rows() > 0 && z_aux.cols() != z_target.cols())
        throw ConfigError("psa_loss: projection width mismatch between domains");

    const std::vector<bool> keep = filter_mask<Scalar>(etas, sigma_align);
    std::vector<Eigen::Index> kept;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) kept.push_back(static_cast<Eigen::Index>(i));

    const Eigen::Index nt = z_target.rows();
    RowMatrix<Scalar> z_all(nt + static_cast<Eigen::Index>(kept.size()), z_target.cols());
    std::vector<int> labels(y_target.begin(), y_target.end());
    z_all.topRows(nt) = z_target;
    for (std::size_t k = 0; k < kept.size(); ++k) {
        z_all.row(nt + static_cast<Eigen::Index>(k)) = z_aux.row(kept[k]);
        labels.push_back(y_aux[static_cast<std::size_t>(kept[k])]);
    }

    const SupConResult<Scalar> sc = supcon_batch<Scalar>(z_all, labels, temperature);
    PsaResult<Scalar> r;
    r.n_aux_used = static_cast<int>(kept.size());
    r.n_valid_anchors = sc.n_valid;
    r.n_dropped_anchors = sc.n_no_positive;
    r.grad_target = RowMatrix<Scalar>::Zero(nt, z_target.cols());
    r.grad_aux = RowMatrix<Scalar>::Zero(z_aux.rows(), z_target.cols());
    if (sc.n_valid == 0) {
        r.all_dropped = true;
        return r;
    }
    const Scalar inv = Scalar(1) / static_cast<Scalar>(sc.n_valid);
    r.value = sc.sum * inv;
    r.grad_target = sc.grad.topRows(nt) * inv;
    for (std::size_t k = 0; k < kept.size(); ++k)
        r.grad_aux.row(kept[k]) = sc.grad.row(nt + static_cast<Eigen::Index>(k)) * inv;
    return r;
}

}  // namespace protoalign
