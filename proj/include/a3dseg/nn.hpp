#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "a3dseg/autodiff.hpp"
#include "a3dseg/rng.hpp"

namespace a3dseg {

// Base for everything that owns parameters. Registration order is the
// checkpoint/initialization order, so construction must be deterministic.
class Module {
public:
    virtual ~Module() = default;
    Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    std::vector<Param*> parameters();             // recursive, trainable + stats
    std::vector<Param*> trainable_parameters();
    void named_parameters(const std::string& prefix,
                          std::vector<std::pair<std::string, Param*>>& out);
    std::int64_t parameter_count();  // trainable scalars

protected:
    Param& add_param(const std::string& name, std::vector<int> dims, bool trainable = true);
    void add_child(const std::string& name, Module& m);

private:
    std::vector<std::pair<std::string, std::unique_ptr<Param>>> params_;
    std::vector<std::pair<std::string, Module*>> children_;
};

// 2D convolution, He-normal weight init, zero bias.
class Conv2d : public Module {
public:
    Conv2d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng);
    Var forward(Tape& t, const Var& x) const;
    int in_ch() const { return in_ch_; }
    int out_ch() const { return out_ch_; }
    Param& weight() { return w_; }
    Param& bias() { return b_; }

private:
    int in_ch_, out_ch_, stride_, pad_;
    Param& w_;
    Param& b_;
};

class Conv3d : public Module {
public:
    Conv3d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng);
    Var forward(Tape& t, const Var& x) const;

private:
    int stride_, pad_;
    Param& w_;
    Param& b_;
};

// Parameter-free normalization: batch statistics per channel while training,
// frozen running averages at inference. `tag` names the op for graph audits.
class BatchStatNorm : public Module {
public:
    BatchStatNorm(int channels, float eps, const char* tag, float momentum = 0.1f);
    Var forward(Tape& t, const Var& x, bool training);
    float eps() const { return eps_; }

private:
    int channels_;
    float eps_;
    float momentum_;
    const char* tag_;
    Param& running_mean_;
    Param& running_var_;
};

class Adam {
public:
    explicit Adam(std::vector<Param*> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                  float eps = 1e-8f);
    void zero_grad();
    void step();
    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    void set_lr(float lr) { lr_ = lr; }

private:
    std::vector<Param*> params_;
    float lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

}  // namespace a3dseg
