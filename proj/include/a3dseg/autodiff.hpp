#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "a3dseg/tensor.hpp"

namespace a3dseg {

class Tape;

// Trainable (or persistent) array owned by a module. Autodiff leaves alias
// its value buffer; Tape::backward() flushes gradients back into `grad`.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;     // allocated on first flush; cleared by Adam::zero_grad
    Tensor adam_m;   // optimizer state, persisted in checkpoints
    Tensor adam_v;
    bool trainable = true;
};

struct Node {
    Tensor value;
    Tensor grad;  // empty until backward reaches this node
    bool requires_grad = false;
    const char* op = "leaf";
    Tape* tape = nullptr;
    Param* param = nullptr;  // set on parameter leaves
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // accumulates into parents' grads
    int index = -1;                       // position in tape recording order
};

using Var = std::shared_ptr<Node>;

// Records ops in execution order (already topological) for reverse-mode
// sweeps. A tape constructed with grad_enabled=false computes values only:
// no parents, no closures, nothing retained.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_; }

    Var constant(Tensor v);           // leaf; gradient never tracked
    Var input(Tensor v);              // leaf; gradient tracked (for grad checks)
    Var param(Param& p);              // cached: one node per Param per tape

    // Seeds d(loss)=1, sweeps the tape in reverse, then adds leaf gradients
    // into their Params' grad buffers.
    void backward(const Var& loss);

    size_t size() const { return nodes_.size(); }

private:
    friend Var record(Tape& t, Var n);
    std::vector<Var> nodes_;
    std::unordered_map<const Param*, Var> param_nodes_;
    bool grad_;
};

// Generic op constructor used by modules that define their own nodes (the
// Dice loss, AADE's normalization). `backward` reads node.grad and must
// accumulate into parents via accum_grad.
Var make_op(const char* name, Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward);

// Ensures n.grad is allocated (zeroed, value-shaped) and returns it.
Tensor& grad_buf(Node& n);

Var detach(const Var& x);  // same value, gradient path cut

// Elementwise / scalar ops --------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float c);
Var add_const(const Var& a, float c);
Var relu(const Var& a);
Var leaky_relu(const Var& a, float slope);
Var sigmoid(const Var& a);
Var tanh_op(const Var& a);
Var log_op(const Var& a, float clamp_lo = 1e-12f);
Var abs_op(const Var& a);

// Reductions -----------------------------------------------------------------
Var mean_all(const Var& a);
Var sum_all(const Var& a);
// Σ w_i * terms_i over scalar terms.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<float>& weights);

// Losses used across modules --------------------------------------------------
Var l1_mean(const Var& a, const Var& b);              // mean |a - b|
Var bce_mean(const Var& p, float target);             // p in (0,1), scalar target

// Structure ops ----------------------------------------------------------------
Var concat_channels(const Var& a, const Var& b);  // along dim 1

// Convolutions: x (N,C,spatial...), w (O,I,k...), b (O) or empty Var.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// Bilinear / trilinear resize, half-pixel convention with edge clamping.
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var resize_trilinear(const Var& x, int out_d, int out_h, int out_w);

// Parameter-free normalization over all dims but dim 1, per channel:
// (x - mu_c) / max(sigma_c, eps). Op name is tagged so structural audits can
// distinguish a plain Norm site ("plain_norm") from AADE's internal one
// ("aade_norm"). Exposes the batch stats it computed.
Var batch_norm_stats(const Var& x, float eps, const char* tag,
                     std::vector<double>* out_mean = nullptr,
                     std::vector<double>* out_var = nullptr);

// Inference-mode normalization with frozen per-channel statistics.
Var normalize_fixed(const Var& x, const std::vector<float>& mean,
                    const std::vector<float>& denom, const char* tag);

// Graph audits ---------------------------------------------------------------
std::unordered_set<const Param*> reachable_params(const Var& out);
int count_ops(const Var& out, const std::string& op_name);

}  // namespace a3dseg
