#pragma once

// Y-shaped network: two domain-private encoders feeding one shared encoder,
// with a classification head (FC_1 -> f, FC_2 -> logits), a projection head
// (-> z) and a domain discriminator behind a gradient-reversal boundary.
//
// Layers keep no per-call state. A forward call returns a ForwardPass that
// owns every activation needed by backward, so a parameter snapshot can be
// shared by concurrent read-only forward passes.

#include "common.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace protoalign {

enum class InputKind { Vector, Image };

struct TensorShape {
    int channels = 0;
    int height = 1;
    int width = 1;

    int size() const { return channels * height * width; }
    int spatial() const { return height * width; }
    bool operator==(const TensorShape&) const = default;
};

struct BackboneConfig {
    InputKind input_kind = InputKind::Vector;
    TensorShape input_shape{16, 1, 1};
    // Widths (vector) or channel counts (image) of each backbone stage.
    std::vector<int> stage_sizes{64, 64, 64, 64};
    // Stages [0, split_stage) are domain-private, [split_stage, n) are shared.
    int split_stage = 3;
    int hidden_dim_f = 256;
    int proj_dim = 128;
    int num_classes = 2;
    int disc_hidden = 128;
    // Both private encoders start from the same weights, as they would when
    // copied from one pretrained backbone. They still train independently.
    bool same_private_init = true;

    void validate() const {
        if (stage_sizes.size() < 2)
            throw ConfigError("model.stage_sizes needs at least two stages");
        for (int s : stage_sizes)
            if (s <= 0) throw ConfigError("model.stage_sizes entries must be positive");
        if (split_stage < 1 || split_stage >= static_cast<int>(stage_sizes.size()))
            throw ConfigError("model.split_stage must satisfy 1 <= split_stage < number of stages");
        if (hidden_dim_f <= 0) throw ConfigError("model.hidden_dim_f must be positive");
        if (proj_dim <= 0) throw ConfigError("model.proj_dim must be positive");
        if (disc_hidden <= 0) throw ConfigError("model.disc_hidden must be positive");
        if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
        if (input_shape.channels <= 0 || input_shape.height <= 0 || input_shape.width <= 0)
            throw ConfigError("model input shape must be positive");
        if (input_kind == InputKind::Vector && (input_shape.height != 1 || input_shape.width != 1))
            throw ConfigError("vector inputs must have height = width = 1");
    }
};

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    // Set by backward; the optimizer skips parameters no loss reached.
    bool touched = false;

    Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
        grad = Mat::Zero(value.rows(), value.cols());
    }

    void zero_grad() {
        grad.setZero();
        touched = false;
    }
};

class Layer {
public:
    virtual ~Layer() = default;

    virtual Mat forward(const Mat& x) const = 0;
    // Accumulates parameter gradients; returns dL/dx. x and y are the cached
    // input and output of the matching forward call.
    virtual Mat backward(const Mat& x, const Mat& y, const Mat& dy) = 0;
    virtual std::vector<Parameter*> parameters() { return {}; }
    virtual TensorShape output_shape() const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;
};

class Linear final : public Layer {
public:
    Linear(int in, int out, const std::string& name, Rng& rng)
        : weight_(name + ".weight", Mat(in, out)), bias_(name + ".bias", Mat::Zero(1, out)) {
        // He-normal fan-in scaling.
        const double sd = std::sqrt(2.0 / in);
        for (Eigen::Index i = 0; i < weight_.value.size(); ++i)
            weight_.value.data()[i] = sd * standard_normal(rng);
    }

    Mat forward(const Mat& x) const override {
        if (x.cols() != weight_.value.rows())
            throw ConfigError(weight_.name + ": expected input width " +
                              std::to_string(weight_.value.rows()) + ", got " +
                              std::to_string(x.cols()));
        Mat y = x * weight_.value;
        y.rowwise() += bias_.value.row(0);
        return y;
    }

    Mat backward(const Mat& x, const Mat&, const Mat& dy) override {
        weight_.grad.noalias() += x.transpose() * dy;
        bias_.grad.row(0) += dy.colwise().sum();
        weight_.touched = bias_.touched = true;
        return dy * weight_.value.transpose();
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    TensorShape output_shape() const override {
        return {static_cast<int>(weight_.value.cols()), 1, 1};
    }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

private:
    Parameter weight_;
    Parameter bias_;
};

class Relu final : public Layer {
public:
    explicit Relu(TensorShape shape) : shape_(shape) {}

    Mat forward(const Mat& x) const override { return x.cwiseMax(0.0); }
    Mat backward(const Mat&, const Mat& y, const Mat& dy) override {
        return (y.array() > 0.0).select(dy, 0.0);
    }
    TensorShape output_shape() const override { return shape_; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

private:
    TensorShape shape_;
};

// 3x3 convolution, padding 1. Rows of the batch matrix are CHW-flattened images.
class Conv2d final : public Layer {
public:
    Conv2d(TensorShape in, int out_channels, int stride, const std::string& name, Rng& rng)
        : in_(in),
          out_{out_channels, (in.height + 2 - kSize) / stride + 1, (in.width + 2 - kSize) / stride + 1},
          stride_(stride),
          weight_(name + ".weight", Mat(out_channels, in.channels * kSize * kSize)),
          bias_(name + ".bias", Mat::Zero(1, out_channels)) {
        const double sd = std::sqrt(2.0 / (in.channels * kSize * kSize));
        for (Eigen::Index i = 0; i < weight_.value.size(); ++i)
            weight_.value.data()[i] = sd * standard_normal(rng);
    }

    Mat forward(const Mat& x) const override {
        if (x.cols() != in_.size())
            throw ConfigError(weight_.name + ": expected input size " + std::to_string(in_.size()));
        Mat y(x.rows(), out_.size());
        Mat cols;
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
            im2col(x.row(n), cols);
            Mat out = weight_.value * cols;
            out.colwise() += bias_.value.row(0).transpose();
            y.row(n) = Eigen::Map<const Eigen::RowVectorXd>(out.data(), out.size());
        }
        return y;
    }

    Mat backward(const Mat& x, const Mat&, const Mat& dy) override {
        Mat dx = Mat::Zero(x.rows(), x.cols());
        Mat cols;
        for (Eigen::Index n = 0; n < x.rows(); ++n) {
            im2col(x.row(n), cols);
            const Eigen::RowVectorXd dy_row = dy.row(n);
            Eigen::Map<const Mat> dout(dy_row.data(), out_.channels, out_.spatial());
            weight_.grad.noalias() += dout * cols.transpose();
            bias_.grad.row(0) += dout.rowwise().sum().transpose();
            const Mat dcols = weight_.value.transpose() * dout;
            col2im(dcols, dx.row(n));
        }
        weight_.touched = bias_.touched = true;
        return dx;
    }

    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    TensorShape output_shape() const override { return out_; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

private:
    static constexpr int kSize = 3;

    template <typename Row>
    void im2col(const Row& img, Mat& cols) const {
        cols.setZero(in_.channels * kSize * kSize, out_.spatial());
        for (int c = 0; c < in_.channels; ++c)
            for (int ky = 0; ky < kSize; ++ky)
                for (int kx = 0; kx < kSize; ++kx) {
                    const int r = (c * kSize + ky) * kSize + kx;
                    for (int oy = 0; oy < out_.height; ++oy) {
                        const int iy = oy * stride_ + ky - 1;
                        if (iy < 0 || iy >= in_.height) continue;
                        for (int ox = 0; ox < out_.width; ++ox) {
                            const int ix = ox * stride_ + kx - 1;
                            if (ix < 0 || ix >= in_.width) continue;
                            cols(r, oy * out_.width + ox) = img((c * in_.height + iy) * in_.width + ix);
                        }
                    }
                }
    }

    template <typename Row>
    void col2im(const Mat& dcols, Row&& dimg) const {
        for (int c = 0; c < in_.channels; ++c)
            for (int ky = 0; ky < kSize; ++ky)
                for (int kx = 0; kx < kSize; ++kx) {
                    const int r = (c * kSize + ky) * kSize + kx;
                    for (int oy = 0; oy < out_.height; ++oy) {
                        const int iy = oy * stride_ + ky - 1;
                        if (iy < 0 || iy >= in_.height) continue;
                        for (int ox = 0; ox < out_.width; ++ox) {
                            const int ix = ox * stride_ + kx - 1;
                            if (ix < 0 || ix >= in_.width) continue;
                            dimg((c * in_.height + iy) * in_.width + ix) += dcols(r, oy * out_.width + ox);
                        }
                    }
                }
    }

    TensorShape in_;
    TensorShape out_;
    int stride_;
    Parameter weight_;
    Parameter bias_;
};

inline Mat global_average_pool(const Mat& x, TensorShape shape) {
    const int hw = shape.spatial();
    if (hw == 1) return x;
    Mat y(x.rows(), shape.channels);
    for (Eigen::Index n = 0; n < x.rows(); ++n)
        for (int c = 0; c < shape.channels; ++c)
            y(n, c) = x.row(n).segment(c * hw, hw).mean();
    return y;
}

inline Mat global_average_pool_backward(const Mat& dy, TensorShape shape) {
    const int hw = shape.spatial();
    if (hw == 1) return dy;
    Mat dx(dy.rows(), shape.size());
    for (Eigen::Index n = 0; n < dy.rows(); ++n)
        for (int c = 0; c < shape.channels; ++c)
            dx.row(n).segment(c * hw, hw).setConstant(dy(n, c) / hw);
    return dx;
}

class GlobalAvgPool final : public Layer {
public:
    explicit GlobalAvgPool(TensorShape in) : in_(in) {}

    Mat forward(const Mat& x) const override { return global_average_pool(x, in_); }
    Mat backward(const Mat&, const Mat&, const Mat& dy) override {
        return global_average_pool_backward(dy, in_);
    }
    TensorShape output_shape() const override { return {in_.channels, 1, 1}; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

private:
    TensorShape in_;
};

class Sequential {
public:
    Sequential() = default;
    Sequential(const Sequential& other) {
        layers_.reserve(other.layers_.size());
        for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    Sequential& operator=(const Sequential& other) {
        if (this != &other) {
            Sequential tmp(other);
            layers_ = std::move(tmp.layers_);
        }
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    // acts receives [x, y_1, ..., y_n] when non-null.
    Mat forward(const Mat& x, std::vector<Mat>* acts = nullptr) const {
        if (acts) {
            acts->clear();
            acts->reserve(layers_.size() + 1);
            acts->push_back(x);
        }
        Mat cur = x;
        for (const auto& l : layers_) {
            cur = l->forward(cur);
            if (acts) acts->push_back(cur);
        }
        return cur;
    }

    Mat backward(const std::vector<Mat>& acts, const Mat& dy) {
        Mat grad = dy;
        for (std::size_t i = layers_.size(); i-- > 0;)
            grad = layers_[i]->backward(acts[i], acts[i + 1], grad);
        return grad;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& l : layers_)
            for (Parameter* p : l->parameters()) out.push_back(p);
        return out;
    }

    TensorShape output_shape() const { return layers_.back()->output_shape(); }
    bool empty() const { return layers_.empty(); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// Per-sample tensors at each stage of one domain path (batched, one row per sample).
struct EncoderOutputs {
    Mat intermediate;         // private-encoder output
    Mat pooled_intermediate;  // GAP(intermediate)
    Mat shared;               // shared-encoder output
    Mat f;                    // FC_1 output, the prototype feature space
    Mat logits;               // FC_2 output
    Mat z;                    // projection-head output
};

struct ForwardPass {
    Domain domain = Domain::Target;
    EncoderOutputs out;
    std::vector<Mat> private_acts;
    std::vector<Mat> shared_acts;
    std::vector<Mat> fc1_acts;
    std::vector<Mat> fc2_acts;
    std::vector<Mat> proj_acts;
};

// Upstream gradients for one ForwardPass. Empty matrices mean "no gradient",
// which leaves the corresponding parameters untouched.
struct OutputGrads {
    Mat logits;
    Mat f;
    Mat z;
    Mat pooled_intermediate;
};

struct DiscriminatorPass {
    std::vector<Mat> acts;
    Vec probs;
};

class YNet {
public:
    YNet(BackboneConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        Rng rng(mix_seed(seed, seed_salt::kInit));
        Rng aux_rng = rng;
        build_private(Domain::Target, rng);
        build_private(Domain::Auxiliary, config_.same_private_init ? aux_rng : rng);
        build_shared(rng);

        const int shared_dim = shared_.output_shape().channels;
        fc1_.add<Linear>(shared_dim, config_.hidden_dim_f, "fc1", rng);
        fc1_.add<Relu>(TensorShape{config_.hidden_dim_f, 1, 1});
        fc2_.add<Linear>(config_.hidden_dim_f, config_.num_classes, "fc2", rng);

        proj_.add<Linear>(shared_dim, config_.hidden_dim_f, "proj.0", rng);
        proj_.add<Relu>(TensorShape{config_.hidden_dim_f, 1, 1});
        proj_.add<Linear>(config_.hidden_dim_f, config_.proj_dim, "proj.1", rng);

        const int pooled_dim = intermediate_shape().channels;
        disc_.add<Linear>(pooled_dim, config_.disc_hidden, "disc.0", rng);
        disc_.add<Relu>(TensorShape{config_.disc_hidden, 1, 1});
        disc_.add<Linear>(config_.disc_hidden, 1, "disc.1", rng);
    }

    const BackboneConfig& config() const { return config_; }

    TensorShape intermediate_shape() const { return private_[0].output_shape(); }
    int pooled_dim() const { return intermediate_shape().channels; }
    int shared_dim() const { return shared_.output_shape().channels; }

    ForwardPass forward(const Mat& batch, Domain domain) const {
        if (batch.cols() != config_.input_shape.size())
            throw ConfigError("forward: batch has " + std::to_string(batch.cols()) +
                              " features per sample, model expects " +
                              std::to_string(config_.input_shape.size()));
        ForwardPass pass;
        pass.domain = domain;
        auto& o = pass.out;
        o.intermediate = private_[index(domain)].forward(batch, &pass.private_acts);
        check_finite(o.intermediate, std::string("private encoder (") + domain_name(domain) + ")");
        o.pooled_intermediate = global_average_pool(o.intermediate, intermediate_shape());
        o.shared = shared_.forward(o.intermediate, &pass.shared_acts);
        check_finite(o.shared, "shared encoder");
        o.f = fc1_.forward(o.shared, &pass.fc1_acts);
        check_finite(o.f, "fc1");
        o.logits = fc2_.forward(o.f, &pass.fc2_acts);
        check_finite(o.logits, "fc2");
        o.z = proj_.forward(o.shared, &pass.proj_acts);
        check_finite(o.z, "projection head");
        return pass;
    }

    // Classifier features only (no caches); used for prototypes and evaluation.
    Mat features(const Mat& batch, Domain domain) const {
        return fc1_.forward(shared_.forward(private_[index(domain)].forward(batch)));
    }

    Mat logits(const Mat& batch, Domain domain) const { return fc2_.forward(features(batch, domain)); }

    Mat project(const Mat& shared) const {
        if (shared.cols() != shared_dim())
            throw ConfigError("project: expected shared width " + std::to_string(shared_dim()));
        return proj_.forward(shared);
    }

    DiscriminatorPass discriminate(const Mat& pooled) const {
        if (pooled.cols() != pooled_dim())
            throw ConfigError("domain_discriminate: expected pooled width " +
                              std::to_string(pooled_dim()) + ", got " + std::to_string(pooled.cols()));
        DiscriminatorPass pass;
        const Mat logit = disc_.forward(pooled, &pass.acts);
        pass.probs = (1.0 / (1.0 + (-logit.col(0).array()).exp())).matrix();
        check_finite(pass.probs, "domain discriminator");
        return pass;
    }

    Vec domain_discriminate(const Mat& pooled) const { return discriminate(pooled).probs; }

    // Backpropagates dL/dprob into the discriminator parameters and returns the
    // gradient handed to the encoders. With reversal on it is -lambda times the
    // true gradient of L w.r.t. the pooled features.
    Mat discriminator_backward(const DiscriminatorPass& pass, const Vec& d_probs) {
        const Vec p = pass.probs;
        Mat d_logit = (d_probs.array() * p.array() * (1.0 - p.array())).matrix();
        Mat d_pooled = disc_.backward(pass.acts, d_logit);
        if (gradient_reversal_) d_pooled *= -grl_lambda_;
        return d_pooled;
    }

    void backward(const ForwardPass& pass, const OutputGrads& g) {
        Mat d_f;
        if (g.logits.size() > 0) d_f = fc2_.backward(pass.fc2_acts, g.logits);
        if (g.f.size() > 0) d_f = d_f.size() > 0 ? Mat(d_f + g.f) : g.f;

        Mat d_shared;
        if (d_f.size() > 0) d_shared = fc1_.backward(pass.fc1_acts, d_f);
        if (g.z.size() > 0) {
            Mat dz = proj_.backward(pass.proj_acts, g.z);
            d_shared = d_shared.size() > 0 ? Mat(d_shared + dz) : dz;
        }

        Mat d_inter;
        if (d_shared.size() > 0) d_inter = shared_.backward(pass.shared_acts, d_shared);
        if (g.pooled_intermediate.size() > 0) {
            Mat dp = global_average_pool_backward(g.pooled_intermediate, intermediate_shape());
            d_inter = d_inter.size() > 0 ? Mat(d_inter + dp) : dp;
        }
        if (d_inter.size() > 0) private_[index(pass.domain)].backward(pass.private_acts, d_inter);
    }

    void set_gradient_reversal(bool on) { gradient_reversal_ = on; }
    bool gradient_reversal() const { return gradient_reversal_; }
    void set_grl_lambda(double lambda) { grl_lambda_ = lambda; }
    double grl_lambda() const { return grl_lambda_; }

    // Stable, ordered parameter list. Names are the checkpoint keys.
    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto* part : {&private_[0], &private_[1], &shared_, &fc1_, &fc2_, &proj_, &disc_})
            for (Parameter* p : part->parameters()) out.push_back(p);
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (Parameter* p : const_cast<YNet*>(this)->parameters()) out.push_back(p);
        return out;
    }

    std::vector<Parameter*> private_parameters(Domain d) { return private_[index(d)].parameters(); }
    std::vector<Parameter*> shared_parameters() { return shared_.parameters(); }
    std::vector<Parameter*> projection_parameters() { return proj_.parameters(); }
    std::vector<Parameter*> discriminator_parameters() { return disc_.parameters(); }
    std::vector<Parameter*> classifier_parameters() {
        auto out = fc1_.parameters();
        for (Parameter* p : fc2_.parameters()) out.push_back(p);
        return out;
    }

    Parameter* find_parameter(const std::string& name) {
        for (Parameter* p : parameters())
            if (p->name == name) return p;
        return nullptr;
    }

    void zero_grad() {
        for (Parameter* p : parameters()) p->zero_grad();
    }

private:
    static int index(Domain d) { return static_cast<int>(d); }

    template <typename Derived>
    static void check_finite(const Eigen::MatrixBase<Derived>& m, const std::string& stage) {
        if (!m.allFinite()) throw NumericError(stage, "non-finite activation");
    }

    void add_stage(Sequential& seq, TensorShape& shape, int i, const std::string& prefix, Rng& rng) {
        const std::string name = prefix + ".stage" + std::to_string(i);
        const int width = config_.stage_sizes[i];
        if (config_.input_kind == InputKind::Vector) {
            seq.add<Linear>(shape.channels, width, name, rng);
            shape = TensorShape{width, 1, 1};
        } else {
            const int stride = i == 0 ? 1 : 2;
            shape = seq.add<Conv2d>(shape, width, stride, name, rng).output_shape();
        }
        seq.add<Relu>(shape);
    }

    void build_private(Domain d, Rng& rng) {
        TensorShape shape = config_.input_shape;
        const std::string prefix = std::string("private.") + domain_name(d);
        for (int i = 0; i < config_.split_stage; ++i) add_stage(private_[index(d)], shape, i, prefix, rng);
    }

    void build_shared(Rng& rng) {
        TensorShape shape = private_[0].output_shape();
        for (int i = config_.split_stage; i < static_cast<int>(config_.stage_sizes.size()); ++i)
            add_stage(shared_, shape, i, "shared", rng);
        if (shape.spatial() > 1) shared_.add<GlobalAvgPool>(shape);
    }

    BackboneConfig config_;
    Sequential private_[2];
    Sequential shared_;
    Sequential fc1_;
    Sequential fc2_;
    Sequential proj_;
    Sequential disc_;
    bool gradient_reversal_ = true;
    double grl_lambda_ = 1.0;
};

}  // namespace protoalign
