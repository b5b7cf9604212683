#pragma once

// Early domain alignment losses on the pooled private-encoder features:
// the adversarial domain-classification loss (paired with the gradient
// reversal boundary in YNet) and the multi-kernel MMD distance.

#include "common.hpp"

#include <algorithm>
#include <span>
#include <string>
#include <vector>

namespace protoalign {

enum class EdaVariant { Adversarial, Mkmmd, Off };

inline const char* eda_variant_name(EdaVariant v) {
    switch (v) {
        case EdaVariant::Adversarial: return "adversarial";
        case EdaVariant::Mkmmd: return "mkmmd";
        case EdaVariant::Off: return "off";
    }
    return "?";
}

inline EdaVariant parse_eda_variant(const std::string& s) {
    if (s == "adversarial" || s == "adv") return EdaVariant::Adversarial;
    if (s == "mkmmd") return EdaVariant::Mkmmd;
    if (s == "off" || s == "none") return EdaVariant::Off;
    throw ConfigError("eda.variant must be one of adversarial|mkmmd|off, got '" + s + "'");
}

inline const std::vector<double>& default_kernel_scales() {
    static const std::vector<double> scales{0.25, 0.5, 1.0, 2.0, 4.0};
    return scales;
}

// Gaussian kernels k(a, b) = exp(-|a - b|^2 / bandwidth).
struct KernelBank {
    std::vector<double> bandwidths;

    void validate() const {
        if (bandwidths.empty()) throw ConfigError("kernel bank is empty");
        for (double b : bandwidths)
            if (!(b > 0.0)) throw ConfigError("kernel bandwidths must be positive");
    }
};

inline constexpr double kProbClamp = 1e-7;

template <typename Scalar>
struct BceResult {
    Scalar value{};
    ColVector<Scalar> grad;  // dL/dprob
    int clamped = 0;         // probabilities pushed back into [eps, 1 - eps]
};

// Mean binary cross-entropy over the combined batch; label 0 = target, 1 = auxiliary.
template <typename Scalar>
BceResult<Scalar> adversarial_eda_loss(const ColVector<Scalar>& probs, std::span<const int> labels) {
    if (static_cast<std::size_t>(probs.size()) != labels.size())
        throw ConfigError("adversarial_eda_loss: probs and labels differ in length");
    if (probs.size() == 0) throw ConfigError("adversarial_eda_loss: empty batch");

    const auto n = static_cast<Scalar>(probs.size());
    const Scalar eps = static_cast<Scalar>(kProbClamp);
    BceResult<Scalar> r;
    r.grad = ColVector<Scalar>::Zero(probs.size());
    Scalar sum = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        const int y = labels[i];
        if (y != 0 && y != 1) throw DataError("adversarial_eda_loss: domain labels must be 0 or 1");
        Scalar p = probs(i);
        bool clamped = false;
        if (p < eps) {
            p = eps;
            clamped = true;
        } else if (p > 1 - eps) {
            p = 1 - eps;
            clamped = true;
        }
        r.clamped += clamped;
        sum += y == 1 ? std::log(p) : std::log(1 - p);
        if (!clamped) r.grad(i) = (y == 1 ? -1 / p : 1 / (1 - p)) / n;
    }
    r.value = -sum / n;
    return r;
}

template <typename Scalar>
struct MmdResult {
    Scalar value{};
    RowMatrix<Scalar> grad_x;
    RowMatrix<Scalar> grad_y;
};

namespace detail {

template <typename Scalar>
Scalar squared_distance(const RowMatrix<Scalar>& a, Eigen::Index i, const RowMatrix<Scalar>& b,
                        Eigen::Index j) {
    Scalar s = 0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const Scalar d = a(i, c) - b(j, c);
        s += d * d;
    }
    return s;
}

// Adds mean_{i,j} k(a_i, b_j) to `value` and, when requested, its gradient
// (scaled by `weight`) w.r.t. a and b.
template <typename Scalar>
void kernel_block(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b, const KernelBank& bank,
                  Scalar weight, Scalar& value, RowMatrix<Scalar>* ga, RowMatrix<Scalar>* gb) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows() * b.rows());
    Scalar block = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            const Scalar d2 = squared_distance(a, i, b, j);
            Scalar kij = 0;
            Scalar dk_dd2 = 0;
            for (double bw : bank.bandwidths) {
                const Scalar k = std::exp(-d2 / static_cast<Scalar>(bw));
                kij += k;
                dk_dd2 -= k / static_cast<Scalar>(bw);
            }
            block += kij;
            if (ga) {
                // d(d2)/da_i = 2 (a_i - b_j)
                const Scalar c = weight * inv * dk_dd2 * 2;
                for (Eigen::Index col = 0; col < a.cols(); ++col) {
                    const Scalar diff = a(i, col) - b(j, col);
                    (*ga)(i, col) += c * diff;
                    (*gb)(j, col) -= c * diff;
                }
            }
        }
    }
    value += weight * block * inv;
}

}  // namespace detail

// Biased (V-statistic) multi-kernel MMD^2 between two batches.
template <typename Scalar>
MmdResult<Scalar> mkmmd(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& y, const KernelBank& bank,
                        bool with_grad = true) {
    bank.validate();
    if (x.cols() != y.cols())
        throw ConfigError("mkmmd: feature dimension mismatch (" + std::to_string(x.cols()) + " vs " +
                          std::to_string(y.cols()) + ")");
    if (x.rows() < 2 || y.rows() < 2)
        throw DataError("mkmmd: estimator needs at least 2 samples per domain");

    MmdResult<Scalar> r;
    RowMatrix<Scalar>* gx = nullptr;
    RowMatrix<Scalar>* gy = nullptr;
    if (with_grad) {
        r.grad_x = RowMatrix<Scalar>::Zero(x.rows(), x.cols());
        r.grad_y = RowMatrix<Scalar>::Zero(y.rows(), y.cols());
        gx = &r.grad_x;
        gy = &r.grad_y;
    }
    Scalar xx = 0, yy = 0, xy = 0;
    // Same-set blocks: both arguments are the same matrix, so each pair's
    // gradient lands twice on that matrix.
    detail::kernel_block<Scalar>(x, x, bank, 1, xx, gx, gx);
    detail::kernel_block<Scalar>(y, y, bank, 1, yy, gy, gy);
    detail::kernel_block<Scalar>(x, y, bank, -2, xy, gx, gy);
    r.value = xx + yy + xy;
    return r;
}

// Median pairwise squared distance m over the batch; bandwidths m * s.
// Falls back to m = 1 when every point coincides.
template <typename Scalar>
KernelBank median_heuristic_bandwidths(const RowMatrix<Scalar>& pooled, std::span<const double> scales) {
    if (pooled.rows() < 2) throw DataError("median heuristic needs at least 2 samples");
    if (scales.empty()) throw ConfigError("eda.kernel_scales is empty");
    std::vector<double> d2;
    d2.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < pooled.rows(); ++i)
        for (Eigen::Index j = i + 1; j < pooled.rows(); ++j)
            d2.push_back(static_cast<double>(detail::squared_distance(pooled, i, pooled, j)));

    const std::size_t mid = d2.size() / 2;
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
    double median = d2[mid];
    if (d2.size() % 2 == 0) {
        const double lower = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid));
        median = 0.5 * (median + lower);
    }
    if (median <= 0.0) median = 1.0;

    KernelBank bank;
    for (double s : scales) bank.bandwidths.push_back(median * s);
    bank.validate();
    return bank;
}

template <typename Scalar>
RowMatrix<Scalar> stack_rows(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
    RowMatrix<Scalar> out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
}

}  // namespace protoalign
