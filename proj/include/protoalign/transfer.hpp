#pragma once

// Cross-domain knowledge transfer: the target and eta-weighted auxiliary
// classification losses, the total objective, the optimizer and the training
// loop (warm-up, per-epoch prototype refresh, balanced two-domain batching).

#include "common.hpp"
#include "data.hpp"
#include "eda.hpp"
#include "evalsuite.hpp"
#include "model.hpp"
#include "psa.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <algorithm>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace protoalign {

// ---------------------------------------------------------------------------
// Classification losses
// ---------------------------------------------------------------------------

template <typename Scalar>
struct ClfResult {
    Scalar value{};
    RowMatrix<Scalar> grad;  // dL/dlogits
    int n_used = 0;
};

namespace detail {

// Cross-entropy of one row and (softmax - onehot) written into grad_row.
template <typename Scalar, typename GradRow>
Scalar cross_entropy_row(const Eigen::Ref<const RowMatrix<Scalar>>& logits, Eigen::Index i, int label, GradRow&& grad_row) {
    const Scalar m = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - m).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    grad_row = (shifted - lse).exp().matrix();
    grad_row(label) -= 1;
    return lse - shifted(label);
}

template <typename Scalar>
void check_labels(std::span<const int> labels, Eigen::Index num_classes, const char* what) {
    for (int y : labels)
        if (y < 0 || y >= num_classes)
            throw DataError(std::string(what) + ": label " + std::to_string(y) + " out of range [0," +
                            std::to_string(num_classes) + ")");
}

}  // namespace detail

// Mean softmax cross-entropy over the target batch.
template <typename Scalar>
ClfResult<Scalar> intra_clf_loss(const RowMatrix<Scalar>& logits, std::span<const int> labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw ConfigError("intra_clf_loss: logits and labels differ in length");
    if (labels.empty()) throw DataError("intra_clf_loss: empty target batch");
    detail::check_labels<Scalar>(labels, logits.cols(), "intra_clf_loss");
    ClfResult<Scalar> r;
    r.grad = RowMatrix<Scalar>::Zero(logits.rows(), logits.cols());
    const Scalar inv = Scalar(1) / static_cast<Scalar>(labels.size());
    Scalar sum = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        sum += detail::cross_entropy_row<Scalar>(logits, i, labels[static_cast<std::size_t>(i)], r.grad.row(i));
    r.grad *= inv;
    r.value = sum * inv;
    r.n_used = static_cast<int>(labels.size());
    return r;
}

// (gamma / |S~|) * sum_{i in S~} eta_i * CE_i with S~ = {i : eta_i >= sigma_clf};
// zero when S~ is empty. Eta is a constant weight.
template <typename Scalar>
ClfResult<Scalar> inter_clf_loss(const RowMatrix<Scalar>& logits, std::span<const int> labels,
                                 std::span<const Scalar> etas, Scalar sigma_clf, Scalar gamma) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.size() != etas.size())
        throw ConfigError("inter_clf_loss: logits, labels and etas differ in length");
    detail::check_labels<Scalar>(labels, logits.cols(), "inter_clf_loss");
    ClfResult<Scalar> r;
    r.grad = RowMatrix<Scalar>::Zero(logits.rows(), logits.cols());
    const std::vector<bool> keep = filter_mask<Scalar>(etas, sigma_clf);
    for (bool k : keep) r.n_used += k;
    if (r.n_used == 0 || gamma == 0) return r;

    const Scalar scale = gamma / static_cast<Scalar>(r.n_used);
    Scalar sum = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        auto g = r.grad.row(i);
        const Scalar ce = detail::cross_entropy_row<Scalar>(logits, i, labels[static_cast<std::size_t>(i)], g);
        const Scalar eta = etas[static_cast<std::size_t>(i)];
        sum += eta * ce;
        g *= scale * eta;
    }
    r.value = scale * sum;
    return r;
}

// ---------------------------------------------------------------------------
// Configuration and objective
// ---------------------------------------------------------------------------

struct TrainConfig {
    double alpha = 0.1;   // EDA weight
    double beta = 0.01;   // PSA weight
    double gamma = 0.1;   // auxiliary classification weight
    double sigma_align = 0.4;
    double sigma_clf = 0.9;
    int warmup_epochs = 5;
    int total_epochs = 20;
    int batch_size_target = 128;
    int batch_size_aux = 128;
    double learning_rate = 1e-4;
    double weight_decay = 1e-3;
    std::uint64_t seed = 0;
    EdaVariant eda_variant = EdaVariant::Adversarial;
    std::vector<double> kernel_scales = default_kernel_scales();
    double grl_lambda = 1.0;
    double temperature = 1.0;
    // No-filtering ablation: every auxiliary eta is 1 for the whole run.
    bool force_eta_one = false;
    // Assert the filtering invariants on every batch.
    bool debug_checks = false;
    bool record_diagnostics = false;
    AugmentPolicy augment;

    void validate() const {
        for (auto [name, v] : {std::pair{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}})
            if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string("train.") + name + " must be >= 0");
        for (auto [name, v] : {std::pair{"sigma_align", sigma_align}, {"sigma_clf", sigma_clf}})
            if (!(v >= 0 && v <= 1)) throw ConfigError(std::string("train.") + name + " must lie in [0,1]");
        if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be >= 0");
        if (total_epochs <= 0) throw ConfigError("train.total_epochs must be positive");
        if (warmup_epochs >= total_epochs) throw ConfigError("train.warmup_epochs must be < train.total_epochs");
        if (batch_size_target < 2 || batch_size_aux < 2) throw ConfigError("train batch sizes must be >= 2");
        if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
        if (!(temperature > 0)) throw ConfigError("psa.temperature must be positive");
        if (!(grl_lambda >= 0)) throw ConfigError("eda.grl_lambda must be >= 0");
        KernelBank{kernel_scales}.validate();
    }

    bool psa_active(int epoch) const { return epoch >= warmup_epochs; }
};

struct LossTerms {
    double clf = 0;
    double eda = 0;
    double psa = 0;
};

// L = L_clf + alpha * L_eda + beta * L_psa, with L_psa zeroed during warm-up.
inline double total_loss(const LossTerms& t, const TrainConfig& cfg, int epoch) {
    for (auto [name, v] : {std::pair{"L_clf", t.clf}, {"L_eda", t.eda}, {"L_psa", t.psa}})
        if (!std::isfinite(v)) throw NumericError(name, "non-finite loss component");
    const double psa = cfg.psa_active(epoch) ? t.psa : 0.0;
    return t.clf + cfg.alpha * t.eda + cfg.beta * psa;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with decoupled weight decay. Parameters that received no gradient in
// the current step are skipped entirely, including the decay.
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(const std::vector<Parameter*>& params) {
        for (Parameter* p : params) {
            if (!p->touched) continue;
            auto& s = state_[p->name];
            if (s.t == 0) {
                s.m = Mat::Zero(p->value.rows(), p->value.cols());
                s.v = Mat::Zero(p->value.rows(), p->value.cols());
            }
            ++s.t;
            s.m = b1_ * s.m + (1 - b1_) * p->grad;
            s.v = b2_ * s.v + (1 - b2_) * p->grad.cwiseProduct(p->grad);
            const double bc1 = 1 - std::pow(b1_, static_cast<double>(s.t));
            const double bc2 = 1 - std::pow(b2_, static_cast<double>(s.t));
            p->value *= 1 - lr_ * wd_;
            p->value.array() -= lr_ * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
        }
    }

    long steps(const std::string& name) const {
        const auto it = state_.find(name);
        return it == state_.end() ? 0 : it->second.t;
    }

private:
    struct State {
        Mat m, v;
        long t = 0;
    };
    double lr_, wd_, b1_, b2_, eps_;
    std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double l_clf = 0;    // batch means
    double l_eda = 0;
    double l_psa = 0;
    double total = 0;
    long n_aux_used_clf = 0;    // summed over batches
    long n_aux_used_align = 0;
    std::optional<double> val_accuracy;
    std::optional<double> val_auc;
    long numeric_warnings = 0;  // clamped probabilities, positive-less PSA batches
};

struct DiagnosticRow {
    std::string sample_id;
    double eta = 1.0;
    bool kept_align = false;
    bool kept_clf = false;
};

struct TrainResult {
    YNet model;
    std::vector<EpochRecord> history;
    std::vector<std::vector<DiagnosticRow>> diagnostics;  // per epoch, when recorded
    std::string rng_state;                                // target-order stream at the end
};

struct TrainHooks {
    // Called after every optimizer step.
    std::function<void(int epoch, int batch, const YNet&)> after_step;
};

inline Mat softmax_rows(const Mat& logits) { return normalize_scores<double>(logits); }

inline Mat predict_proba(const YNet& model, const DomainDataset& ds) {
    return softmax_rows(model.logits(ds.features, ds.domain));
}

inline MetricsReport evaluate(const YNet& model, const DomainDataset& ds, int positive_class = 1, std::uint64_t seed = 0) {
    if (ds.empty()) throw DataError("evaluation set is empty");
    return compute_metrics<double>(predict_proba(model, ds), ds.labels, positive_class, seed);
}

namespace detail {

inline Mat gather_rows(const Mat& m, std::span<const std::size_t> idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
    return out;
}

inline std::vector<int> gather(std::span<const int> v, std::span<const std::size_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
}

// Cycles through a fixed index pool, reshuffling at every wrap-around.
class CyclingStream {
public:
    CyclingStream(std::vector<std::size_t> pool, Rng& rng) : pool_(std::move(pool)), rng_(&rng) {}

    std::vector<std::size_t> take(std::size_t n) {
        std::vector<std::size_t> out;
        out.reserve(n);
        while (out.size() < n) {
            if (pos_ == pool_.size()) {
                shuffle_in_place(pool_, *rng_);
                pos_ = 0;
            }
            out.push_back(pool_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> pool_;
    Rng* rng_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::size_t batches_per_epoch(std::size_t n_target, int batch_size_target) {
    return (n_target + static_cast<std::size_t>(batch_size_target) - 1) / static_cast<std::size_t>(batch_size_target);
}

// Trains a fresh YNet. `aux` may be empty (target-only training);
// `validation` is evaluated after every epoch when given.
inline TrainResult train(const DomainDataset& target, const DomainDataset& aux, BackboneConfig backbone,
                         const TrainConfig& cfg, const DomainDataset* validation = nullptr, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (target.empty()) throw DataError("target training set is empty");
    const int K = target.num_classes;
    if (backbone.num_classes != K)
        throw ConfigError("model.num_classes (" + std::to_string(backbone.num_classes) + ") != target classes (" +
                          std::to_string(K) + ")");
    if (!aux.empty() && aux.num_classes != K)
        throw DataError("auxiliary dataset has " + std::to_string(aux.num_classes) + " classes, target has " + std::to_string(K));
    if (!aux.empty() && aux.features.cols() != target.features.cols())
        throw DataError("auxiliary and target samples differ in size");
    if (validation && validation->num_classes != K) throw DataError("validation set class count differs from target");

    TrainResult res{YNet(backbone, cfg.seed), {}, {}, {}};
    YNet& model = res.model;
    model.set_grl_lambda(cfg.grl_lambda);
    AdamW opt(cfg.learning_rate, cfg.weight_decay);

    Rng order_rng(mix_seed(cfg.seed, seed_salt::kTargetShuffle));
    Rng aux_rng(mix_seed(cfg.seed, seed_salt::kAuxShuffle));
    Rng aug_rng(mix_seed(cfg.seed, seed_salt::kAugment));
    const bool use_aux = !aux.empty();
    const std::size_t nt = target.size();
    const std::size_t n_batches = batches_per_epoch(nt, cfg.batch_size_target);

    std::vector<std::size_t> order(nt);
    for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
        const bool psa_on = cfg.psa_active(epoch);
        const bool need_eta = use_aux && psa_on && !cfg.force_eta_one;
        const bool need_psa = psa_on && cfg.beta > 0;

        std::optional<PrototypeTable<double>> protos;
        if (need_eta) {
            protos = compute_prototypes<double>(model.features(target.features, Domain::Target), target.labels, K, epoch);
            if (!protos->complete())
                throw DataError("epoch " + std::to_string(epoch) + ": a target class has no training samples, prototypes undefined");
        }

        std::iota(order.begin(), order.end(), 0);
        shuffle_in_place(order, order_rng);
        std::optional<detail::CyclingStream> aux_stream;
        if (use_aux) {
            const auto subset = balanced_subset_indices(aux.labels, K, nt,
                                                        mix_seed(mix_seed(cfg.seed, seed_salt::kAuxSubset), static_cast<std::uint64_t>(epoch)));
            aux_stream.emplace(subset.indices, aux_rng);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        std::vector<DiagnosticRow> diag;
        for (std::size_t b = 0; b < n_batches; ++b) {
            try {
                const std::size_t lo = b * static_cast<std::size_t>(cfg.batch_size_target);
                const std::size_t hi = std::min(nt, lo + static_cast<std::size_t>(cfg.batch_size_target));
                const std::span<const std::size_t> t_idx(order.data() + lo, hi - lo);
                const Mat xt = augment_batch(detail::gather_rows(target.features, t_idx), target.kind, target.shape, cfg.augment, aug_rng);
                const std::vector<int> yt = detail::gather(target.labels, t_idx);

                model.zero_grad();
                const ForwardPass pt = model.forward(xt, Domain::Target);
                OutputGrads gt, ga;

                LossTerms terms;
                const auto intra = intra_clf_loss<double>(pt.out.logits, yt);
                terms.clf = intra.value;
                gt.logits = intra.grad;

                std::optional<ForwardPass> pa;
                std::vector<std::size_t> a_idx;
                std::vector<int> ya;
                std::vector<double> etas;
                if (use_aux) {
                    // Keep |S^a| : |S^t| fixed for a short final target batch.
                    const std::size_t na = std::max<std::size_t>(
                        2, static_cast<std::size_t>(std::llround(static_cast<double>(cfg.batch_size_aux) * static_cast<double>(hi - lo) /
                                                                  static_cast<double>(cfg.batch_size_target))));
                    a_idx = aux_stream->take(na);
                    const Mat xa = augment_batch(detail::gather_rows(aux.features, a_idx), aux.kind, aux.shape, cfg.augment, aug_rng);
                    ya = detail::gather(aux.labels, a_idx);
                    pa = model.forward(xa, Domain::Auxiliary);

                    etas.assign(na, 1.0);
                    if (need_eta)
                        for (std::size_t i = 0; i < na; ++i)
                            etas[i] = consistency_score(soft_assign(pa->out.f.row(static_cast<Eigen::Index>(i)).transpose(), *protos), ya[i]);

                    const auto inter = inter_clf_loss<double>(pa->out.logits, ya, etas, cfg.sigma_clf, cfg.gamma);
                    terms.clf += inter.value;
                    ga.logits = inter.grad;
                    rec.n_aux_used_clf += inter.n_used;

                    if (cfg.alpha > 0 && cfg.eda_variant == EdaVariant::Adversarial) {
                        const Mat pooled = stack_rows<double>(pt.out.pooled_intermediate, pa->out.pooled_intermediate);
                        const DiscriminatorPass dp = model.discriminate(pooled);
                        std::vector<int> dlabels(pooled.rows(), 1);
                        std::fill(dlabels.begin(), dlabels.begin() + pt.out.pooled_intermediate.rows(), 0);
                        const auto bce = adversarial_eda_loss<double>(dp.probs, dlabels);
                        terms.eda = bce.value;
                        rec.numeric_warnings += bce.clamped;
                        const Mat d_pooled = model.discriminator_backward(dp, cfg.alpha * bce.grad);
                        gt.pooled_intermediate = d_pooled.topRows(pt.out.pooled_intermediate.rows());
                        ga.pooled_intermediate = d_pooled.bottomRows(pa->out.pooled_intermediate.rows());
                    } else if (cfg.alpha > 0 && cfg.eda_variant == EdaVariant::Mkmmd) {
                        const KernelBank bank = median_heuristic_bandwidths<double>(
                            stack_rows<double>(pt.out.pooled_intermediate, pa->out.pooled_intermediate), cfg.kernel_scales);
                        const auto mmd = mkmmd<double>(pt.out.pooled_intermediate, pa->out.pooled_intermediate, bank);
                        terms.eda = mmd.value;
                        gt.pooled_intermediate = cfg.alpha * mmd.grad_x;
                        ga.pooled_intermediate = cfg.alpha * mmd.grad_y;
                    }
                }

                if (need_psa) {
                    const Mat za = pa ? pa->out.z : Mat(0, pt.out.z.cols());
                    const auto psa = psa_loss<double>(pt.out.z, yt, za, ya, etas, cfg.sigma_align, cfg.temperature);
                    terms.psa = psa.value;
                    rec.n_aux_used_align += psa.n_aux_used;
                    rec.numeric_warnings += psa.all_dropped;
                    gt.z = cfg.beta * psa.grad_target;
                    if (pa) ga.z = cfg.beta * psa.grad_aux;
                }

                if (cfg.debug_checks && pa) {
                    const auto keep_clf = filter_mask<double>(etas, cfg.sigma_clf);
                    for (std::size_t i = 0; i < etas.size(); ++i) {
                        const bool has_clf_grad = ga.logits.row(static_cast<Eigen::Index>(i)).cwiseAbs().sum() > 0;
                        if (has_clf_grad && !keep_clf[i]) throw Error("filtering invariant: sample below sigma_clf reached inter_clf_loss");
                        if (ga.z.size() > 0 && etas[i] < cfg.sigma_align && ga.z.row(static_cast<Eigen::Index>(i)).cwiseAbs().sum() > 0)
                            throw Error("filtering invariant: sample below sigma_align reached psa_loss");
                    }
                }

                const double total = total_loss(terms, cfg, epoch);
                model.backward(pt, gt);
                if (pa) model.backward(*pa, ga);
                opt.step(model.parameters());

                rec.l_clf += terms.clf;
                rec.l_eda += terms.eda;
                rec.l_psa += psa_on ? terms.psa : 0.0;
                rec.total += total;

                if (cfg.record_diagnostics && pa)
                    for (std::size_t i = 0; i < etas.size(); ++i)
                        diag.push_back({aux.ids[a_idx[i]], etas[i], need_psa && etas[i] >= cfg.sigma_align, etas[i] >= cfg.sigma_clf});
                if (hooks.after_step) hooks.after_step(epoch, static_cast<int>(b), model);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " / " + e.where(), e.what());
            }
        }
        const double inv = 1.0 / static_cast<double>(n_batches);
        rec.l_clf *= inv;
        rec.l_eda *= inv;
        rec.l_psa *= inv;
        rec.total *= inv;
        if (validation && !validation->empty()) {
            const MetricsReport m = evaluate(model, *validation);
            rec.val_accuracy = m.accuracy;
            rec.val_auc = m.roc_auc;
        }
        res.history.push_back(rec);
        if (cfg.record_diagnostics) res.diagnostics.push_back(std::move(diag));
    }
    std::ostringstream st;
    st << order_rng;
    res.rng_state = st.str();
    return res;
}

// ---------------------------------------------------------------------------
// History and diagnostics files
// ---------------------------------------------------------------------------

inline std::string optional_cell(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

inline void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
    out << "epoch,L_clf,L_eda,L_psa,total,n_aux_used_clf,n_aux_used_align,val_accuracy,val_auc\n";
    for (const auto& r : history)
        out << r.epoch << ',' << format_double(r.l_clf) << ',' << format_double(r.l_eda) << ',' << format_double(r.l_psa) << ','
            << format_double(r.total) << ',' << r.n_aux_used_clf << ',' << r.n_aux_used_align << ','
            << optional_cell(r.val_accuracy) << ',' << optional_cell(r.val_auc) << '\n';
}

inline void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
    auto out = open_report(path);
    write_history_csv(out, history);
}

// kept_align / kept_clf are 1 when the sample passed that threshold.
inline void write_diagnostics_csv(const std::filesystem::path& path, std::span<const DiagnosticRow> rows) {
    auto out = open_report(path);
    out << "sample_id,eta,filtered_align,filtered_clf\n";
    for (const auto& r : rows)
        out << r.sample_id << ',' << format_double(r.eta) << ',' << (r.kept_align ? 1 : 0) << ',' << (r.kept_clf ? 1 : 0) << '\n';
}

}  // namespace protoalign
