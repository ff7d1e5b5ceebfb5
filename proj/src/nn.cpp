#include "a3dseg/nn.hpp"

#include <cmath>

#include "a3dseg/error.hpp"

namespace a3dseg {

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

Param& Module::add_param(const std::string& name, std::vector<int> dims, bool trainable) {
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Tensor(std::move(dims));
    p->trainable = trainable;
    params_.emplace_back(name, std::move(p));
    return *params_.back().second;
}

void Module::add_child(const std::string& name, Module& m) {
    children_.emplace_back(name, &m);
}

void Module::named_parameters(const std::string& prefix,
                              std::vector<std::pair<std::string, Param*>>& out) {
    for (auto& [n, p] : params_) out.emplace_back(prefix.empty() ? n : prefix + "." + n, p.get());
    for (auto& [n, c] : children_) c->named_parameters(prefix.empty() ? n : prefix + "." + n, out);
}

std::vector<Param*> Module::parameters() {
    std::vector<std::pair<std::string, Param*>> named;
    named_parameters("", named);
    std::vector<Param*> out;
    out.reserve(named.size());
    for (auto& [n, p] : named) out.push_back(p);
    return out;
}

std::vector<Param*> Module::trainable_parameters() {
    std::vector<Param*> out;
    for (Param* p : parameters())
        if (p->trainable) out.push_back(p);
    return out;
}

std::int64_t Module::parameter_count() {
    std::int64_t n = 0;
    for (Param* p : trainable_parameters()) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Conv layers
// ---------------------------------------------------------------------------

namespace {

void he_normal(Tensor& w, std::int64_t fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    float* p = w.data();
    for (std::int64_t i = 0, n = w.numel(); i < n; ++i)
        p[i] = static_cast<float>(rng.normal(0.0, std_dev));
}

}  // namespace

Conv2d::Conv2d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      stride_(stride),
      pad_(pad),
      w_(add_param("w", {out_ch, in_ch, k, k})),
      b_(add_param("b", {out_ch})) {
    he_normal(w_.value, static_cast<std::int64_t>(in_ch) * k * k, rng);
}

Var Conv2d::forward(Tape& t, const Var& x) const {
    return conv2d(x, t.param(w_), t.param(b_), stride_, pad_);
}

Conv3d::Conv3d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
    : stride_(stride),
      pad_(pad),
      w_(add_param("w", {out_ch, in_ch, k, k, k})),
      b_(add_param("b", {out_ch})) {
    he_normal(w_.value, static_cast<std::int64_t>(in_ch) * k * k * k, rng);
}

Var Conv3d::forward(Tape& t, const Var& x) const {
    return conv3d(x, t.param(w_), t.param(b_), stride_, pad_);
}

// ---------------------------------------------------------------------------
// BatchStatNorm
// ---------------------------------------------------------------------------

BatchStatNorm::BatchStatNorm(int channels, float eps, const char* tag, float momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      tag_(tag),
      running_mean_(add_param("running_mean", {channels}, /*trainable=*/false)),
      running_var_(add_param("running_var", {channels}, /*trainable=*/false)) {
    running_var_.value.fill(1.0f);
}

Var BatchStatNorm::forward(Tape& t, const Var& x, bool training) {
    if (x->value.dim(1) != channels_)
        throw ContractError("nn", "norm channel mismatch: got " + x->value.shape_str());
    if (training) {
        std::vector<double> mean, var;
        Var y = batch_norm_stats(x, eps_, tag_, &mean, &var);
        float* rm = running_mean_.value.data();
        float* rv = running_var_.value.data();
        for (int c = 0; c < channels_; ++c) {
            rm[c] = (1.0f - momentum_) * rm[c] + momentum_ * static_cast<float>(mean[c]);
            rv[c] = (1.0f - momentum_) * rv[c] + momentum_ * static_cast<float>(var[c]);
        }
        return y;
    }
    std::vector<float> mean(static_cast<size_t>(channels_));
    std::vector<float> denom(static_cast<size_t>(channels_));
    const float* rm = running_mean_.value.data();
    const float* rv = running_var_.value.data();
    for (int c = 0; c < channels_; ++c) {
        mean[static_cast<size_t>(c)] = rm[c];
        denom[static_cast<size_t>(c)] =
            std::max(std::sqrt(std::max(rv[c], 0.0f)), eps_);
    }
    return normalize_fixed(x, mean, denom, tag_);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Param*> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::zero_grad() {
    for (Param* p : params_)
        if (!p->grad.empty()) p->grad.zero();
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
    for (Param* p : params_) {
        if (!p->trainable || p->grad.empty()) continue;
        if (p->adam_m.empty()) p->adam_m = Tensor(p->value.dims(), 0.0f);
        if (p->adam_v.empty()) p->adam_v = Tensor(p->value.dims(), 0.0f);
        float* w = p->value.data();
        const float* g = p->grad.data();
        float* m = p->adam_m.data();
        float* v = p->adam_v.data();
        for (std::int64_t i = 0, n = p->value.numel(); i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
            const float mhat = static_cast<float>(m[i] / bc1);
            const float vhat = static_cast<float>(v[i] / bc2);
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace a3dseg
