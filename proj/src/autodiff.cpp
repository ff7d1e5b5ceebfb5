#include "a3dseg/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "a3dseg/error.hpp"

namespace a3dseg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

Tape& tape_of(const Var& a) {
    if (!a || !a->tape) throw ContractError("autodiff", "op on null or tapeless var");
    return *a->tape;
}

void check_same_tape(const Var& a, const Var& b) {
    if (a->tape != b->tape) throw ContractError("autodiff", "ops must share one tape");
}

void check_same_shape(const Var& a, const Var& b, const char* what) {
    if (!a->value.same_shape(b->value))
        throw ContractError("autodiff", std::string(what) + ": shape mismatch " +
                                            a->value.shape_str() + " vs " + b->value.shape_str());
}

void add_into(Tensor& dst, const Tensor& src, float scale_v = 1.0f) {
    float* d = dst.data();
    const float* s = src.data();
    for (std::int64_t i = 0, n = dst.numel(); i < n; ++i) d[i] += scale_v * s[i];
}

}  // namespace

Var record(Tape& t, Var n) {
    n->tape = &t;
    if (t.grad_ || n->param) {
        n->index = static_cast<int>(t.nodes_.size());
        t.nodes_.push_back(n);
    } else {
        // Value-only mode: drop graph edges so intermediates can be freed.
        n->parents.clear();
        n->backward = nullptr;
        n->requires_grad = false;
    }
    return n;
}

Var Tape::constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->op = "const";
    return record(*this, n);
}

Var Tape::input(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->op = "input";
    n->requires_grad = grad_;
    return record(*this, n);
}

Var Tape::param(Param& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    auto n = std::make_shared<Node>();
    n->value = p.value;  // shares the buffer, no copy
    n->op = "param";
    n->param = &p;
    n->requires_grad = grad_ && p.trainable;
    record(*this, n);
    param_nodes_.emplace(&p, n);
    return n;
}

Tensor& grad_buf(Node& n) {
    if (n.grad.empty()) n.grad = Tensor(n.value.dims(), 0.0f);
    return n.grad;
}

void Tape::backward(const Var& loss) {
    if (!grad_) throw ContractError("autodiff", "backward on a no-grad tape");
    if (loss->value.numel() != 1) throw ContractError("autodiff", "backward needs a scalar loss");
    grad_buf(*loss)[0] += 1.0f;
    for (int i = loss->index; i >= 0; --i) {
        Node& n = *nodes_[static_cast<size_t>(i)];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(n);
    }
    for (auto& [p, node] : param_nodes_) {
        if (node->grad.empty() || !node->requires_grad) continue;
        Param& pm = *node->param;
        if (pm.grad.empty()) pm.grad = Tensor(pm.value.dims(), 0.0f);
        add_into(pm.grad, node->grad);
    }
}

Var make_op(const char* name, Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward) {
    if (parents.empty()) throw ContractError("autodiff", "make_op needs parents");
    Tape& t = tape_of(parents.front());
    for (auto& p : parents) check_same_tape(parents.front(), p);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = name;
    bool need = false;
    for (auto& p : parents) need = need || p->requires_grad;
    if (t.grad_enabled() && need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return record(t, n);
}

Var detach(const Var& x) {
    auto n = std::make_shared<Node>();
    n->value = x->value;  // shared buffer; node values are write-once
    n->op = "detach";
    return record(tape_of(x), n);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_same_shape(a, b, "add");
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = pa[i] + pb[i];
    return make_op("add", std::move(v), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) add_into(grad_buf(*n.parents[0]), n.grad);
        if (n.parents[1]->requires_grad) add_into(grad_buf(*n.parents[1]), n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_same_shape(a, b, "sub");
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = pa[i] - pb[i];
    return make_op("sub", std::move(v), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) add_into(grad_buf(*n.parents[0]), n.grad);
        if (n.parents[1]->requires_grad) add_into(grad_buf(*n.parents[1]), n.grad, -1.0f);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_same_shape(a, b, "mul");
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = pa[i] * pb[i];
    return make_op("mul", std::move(v), {a, b}, [](Node& n) {
        const float* g = n.grad.data();
        if (n.parents[0]->requires_grad) {
            float* da = grad_buf(*n.parents[0]).data();
            const float* pb = n.parents[1]->value.data();
            for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i) da[i] += g[i] * pb[i];
        }
        if (n.parents[1]->requires_grad) {
            float* db = grad_buf(*n.parents[1]).data();
            const float* pa = n.parents[0]->value.data();
            for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i) db[i] += g[i] * pa[i];
        }
    });
}

Var scale(const Var& a, float c) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = c * pa[i];
    return make_op("scale", std::move(v), {a}, [c](Node& n) {
        if (n.parents[0]->requires_grad) add_into(grad_buf(*n.parents[0]), n.grad, c);
    });
}

Var add_const(const Var& a, float c) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = pa[i] + c;
    return make_op("add_const", std::move(v), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad) add_into(grad_buf(*n.parents[0]), n.grad);
    });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0f); }

Var leaky_relu(const Var& a, float slope) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = pa[i] > 0.0f ? pa[i] : slope * pa[i];
    return make_op("leaky_relu", std::move(v), {a}, [slope](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float* da = grad_buf(*n.parents[0]).data();
        const float* px = n.parents[0]->value.data();
        const float* g = n.grad.data();
        for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
            da[i] += g[i] * (px[i] > 0.0f ? 1.0f : slope);
    });
}

Var sigmoid(const Var& a) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) {
        float x = pa[i];
        pv[i] = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                          : std::exp(x) / (1.0f + std::exp(x));
    }
    return make_op("sigmoid", std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float* da = grad_buf(*n.parents[0]).data();
        const float* y = n.value.data();
        const float* g = n.grad.data();
        for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
            da[i] += g[i] * y[i] * (1.0f - y[i]);
    });
}

Var tanh_op(const Var& a) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = std::tanh(pa[i]);
    return make_op("tanh", std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float* da = grad_buf(*n.parents[0]).data();
        const float* y = n.value.data();
        const float* g = n.grad.data();
        for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
            da[i] += g[i] * (1.0f - y[i] * y[i]);
    });
}

Var log_op(const Var& a, float clamp_lo) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i)
        pv[i] = std::log(std::max(pa[i], clamp_lo));
    return make_op("log", std::move(v), {a}, [clamp_lo](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float* da = grad_buf(*n.parents[0]).data();
        const float* px = n.parents[0]->value.data();
        const float* g = n.grad.data();
        for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
            if (px[i] > clamp_lo) da[i] += g[i] / px[i];
    });
}

Var abs_op(const Var& a) {
    Tensor v(a->value.dims());
    const float* pa = a->value.data();
    float* pv = v.data();
    for (std::int64_t i = 0, n = v.numel(); i < n; ++i) pv[i] = std::fabs(pa[i]);
    return make_op("abs", std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float* da = grad_buf(*n.parents[0]).data();
        const float* px = n.parents[0]->value.data();
        const float* g = n.grad.data();
        for (std::int64_t i = 0, m = n.grad.numel(); i < m; ++i)
            da[i] += g[i] * (px[i] > 0.0f ? 1.0f : (px[i] < 0.0f ? -1.0f : 0.0f));
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

Var mean_all(const Var& a) {
    Tensor v = Tensor::scalar(static_cast<float>(a->value.mean()));
    const float inv_n = 1.0f / static_cast<float>(a->value.numel());
    return make_op("mean", std::move(v), {a}, [inv_n](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float g = n.grad[0] * inv_n;
        float* da = grad_buf(*n.parents[0]).data();
        for (std::int64_t i = 0, m = n.parents[0]->value.numel(); i < m; ++i) da[i] += g;
    });
}

Var sum_all(const Var& a) {
    Tensor v = Tensor::scalar(static_cast<float>(a->value.sum()));
    return make_op("sum", std::move(v), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        float g = n.grad[0];
        float* da = grad_buf(*n.parents[0]).data();
        for (std::int64_t i = 0, m = n.parents[0]->value.numel(); i < m; ++i) da[i] += g;
    });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<float>& weights) {
    if (terms.empty() || terms.size() != weights.size())
        throw ContractError("autodiff", "weighted_sum: terms/weights mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < terms.size(); ++i) {
        if (terms[i]->value.numel() != 1)
            throw ContractError("autodiff", "weighted_sum over non-scalar term");
        acc += static_cast<double>(weights[i]) * terms[i]->value[0];
    }
    auto ws = weights;
    return make_op("weighted_sum", Tensor::scalar(static_cast<float>(acc)), terms,
                   [ws](Node& n) {
                       for (size_t i = 0; i < n.parents.size(); ++i)
                           if (n.parents[i]->requires_grad)
                               grad_buf(*n.parents[i])[0] += n.grad[0] * ws[i];
                   });
}

Var l1_mean(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_same_shape(a, b, "l1_mean");
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    double acc = 0.0;
    const std::int64_t n = a->value.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += std::fabs(pa[i] - pb[i]);
    const float inv_n = 1.0f / static_cast<float>(n);
    return make_op("l1_mean", Tensor::scalar(static_cast<float>(acc / n)), {a, b},
                   [inv_n](Node& n_) {
                       const float g = n_.grad[0] * inv_n;
                       const float* xa = n_.parents[0]->value.data();
                       const float* xb = n_.parents[1]->value.data();
                       const std::int64_t m = n_.parents[0]->value.numel();
                       float* da = n_.parents[0]->requires_grad ? grad_buf(*n_.parents[0]).data()
                                                                : nullptr;
                       float* db = n_.parents[1]->requires_grad ? grad_buf(*n_.parents[1]).data()
                                                                : nullptr;
                       for (std::int64_t i = 0; i < m; ++i) {
                           float d = xa[i] - xb[i];
                           float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
                           if (da) da[i] += g * s;
                           if (db) db[i] -= g * s;
                       }
                   });
}

Var bce_mean(const Var& p, float target) {
    constexpr float kEps = 1e-7f;
    const float* pp = p->value.data();
    const std::int64_t n = p->value.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double pc = std::clamp(pp[i], kEps, 1.0f - kEps);
        acc += -(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc));
    }
    const float inv_n = 1.0f / static_cast<float>(n);
    return make_op("bce_mean", Tensor::scalar(static_cast<float>(acc / n)), {p},
                   [target, inv_n](Node& n_) {
                       if (!n_.parents[0]->requires_grad) return;
                       const float g = n_.grad[0] * inv_n;
                       const float* x = n_.parents[0]->value.data();
                       float* d = grad_buf(*n_.parents[0]).data();
                       for (std::int64_t i = 0, m = n_.parents[0]->value.numel(); i < m; ++i) {
                           float pc = std::clamp(x[i], kEps, 1.0f - kEps);
                           d[i] += g * (pc - target) / (pc * (1.0f - pc));
                       }
                   });
}

// ---------------------------------------------------------------------------
// Channel concat
// ---------------------------------------------------------------------------

Var concat_channels(const Var& a, const Var& b) {
    check_same_tape(a, b);
    const auto& da = a->value.dims();
    const auto& db = b->value.dims();
    if (da.size() != db.size() || da.size() < 3)
        throw ContractError("autodiff", "concat_channels: rank mismatch");
    for (size_t i = 0; i < da.size(); ++i)
        if (i != 1 && da[i] != db[i])
            throw ContractError("autodiff", "concat_channels: non-channel dims differ");
    const int n_batch = da[0];
    const std::int64_t sp = a->value.numel() / (static_cast<std::int64_t>(n_batch) * da[1]);
    std::vector<int> dv = da;
    dv[1] = da[1] + db[1];
    Tensor v(dv);
    const std::int64_t ca = static_cast<std::int64_t>(da[1]) * sp;
    const std::int64_t cb = static_cast<std::int64_t>(db[1]) * sp;
    for (int nb = 0; nb < n_batch; ++nb) {
        std::copy_n(a->value.data() + nb * ca, ca, v.data() + nb * (ca + cb));
        std::copy_n(b->value.data() + nb * cb, cb, v.data() + nb * (ca + cb) + ca);
    }
    return make_op("concat", std::move(v), {a, b}, [n_batch, ca, cb](Node& n_) {
        const float* g = n_.grad.data();
        for (int nb = 0; nb < n_batch; ++nb) {
            if (n_.parents[0]->requires_grad) {
                float* da_ = grad_buf(*n_.parents[0]).data();
                const float* src = g + nb * (ca + cb);
                for (std::int64_t i = 0; i < ca; ++i) da_[nb * ca + i] += src[i];
            }
            if (n_.parents[1]->requires_grad) {
                float* db_ = grad_buf(*n_.parents[1]).data();
                const float* src = g + nb * (ca + cb) + ca;
                for (std::int64_t i = 0; i < cb; ++i) db_[nb * cb + i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

void im2col_2d(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
               int Ho, int Wo, float* cols) {
    // cols: (C*kh*kw) x (Ho*Wo), row-major
    const std::int64_t span = static_cast<std::int64_t>(Ho) * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c) {
        const float* xc = x + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++r) {
                float* row = cols + r * span;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + i;
                    if (iy < 0 || iy >= H) {
                        std::fill_n(row + static_cast<std::int64_t>(oy) * Wo, Wo, 0.0f);
                        continue;
                    }
                    const float* xrow = xc + static_cast<std::int64_t>(iy) * W;
                    float* orow = row + static_cast<std::int64_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + j;
                        orow[ox] = (ix >= 0 && ix < W) ? xrow[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_2d(const float* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
               int Ho, int Wo, float* dx) {
    const std::int64_t span = static_cast<std::int64_t>(Ho) * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c) {
        float* xc = dx + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++r) {
                const float* row = cols + r * span;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + i;
                    if (iy < 0 || iy >= H) continue;
                    float* xrow = xc + static_cast<std::int64_t>(iy) * W;
                    const float* orow = row + static_cast<std::int64_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + j;
                        if (ix >= 0 && ix < W) xrow[ix] += orow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check_same_tape(x, w);
    if (b) check_same_tape(x, b);
    const auto& xd = x->value.dims();
    const auto& wd = w->value.dims();
    if (xd.size() != 4 || wd.size() != 4)
        throw ContractError("autodiff", "conv2d expects NCHW input and OIHW weight");
    const int N = xd[0], C = xd[1], H = xd[2], W = xd[3];
    const int O = wd[0], kh = wd[2], kw = wd[3];
    if (wd[1] != C)
        throw ContractError("autodiff", "conv2d channel mismatch: input " + x->value.shape_str() +
                                            " weight " + w->value.shape_str());
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ContractError("autodiff", "conv2d output dims non-positive");

    const int K = C * kh * kw;
    const std::int64_t span = static_cast<std::int64_t>(Ho) * Wo;
    Tensor out({N, O, Ho, Wo});
    std::vector<float> cols(static_cast<size_t>(K) * span);
    MapConstMat Wm(w->value.data(), O, K);
    for (int n = 0; n < N; ++n) {
        im2col_2d(x->value.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, kh, kw,
                  stride, pad, Ho, Wo, cols.data());
        MapConstMat Cm(cols.data(), K, span);
        MapMat Om(out.data() + static_cast<std::int64_t>(n) * O * span, O, span);
        Om.noalias() = Wm * Cm;
        if (b) {
            const float* pb = b->value.data();
            for (int o = 0; o < O; ++o) Om.row(o).array() += pb[o];
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    auto bw = [N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K, span, has_b = static_cast<bool>(b)](
                  Node& n_) {
        const Var& xv = n_.parents[0];
        const Var& wv = n_.parents[1];
        std::vector<float> cols(static_cast<size_t>(K) * span);
        const bool need_dx = xv->requires_grad;
        const bool need_dw = wv->requires_grad;
        const bool need_db = has_b && n_.parents[2]->requires_grad;
        MapConstMat Wm(wv->value.data(), O, K);
        for (int n = 0; n < N; ++n) {
            MapConstMat Gm(n_.grad.data() + static_cast<std::int64_t>(n) * O * span, O, span);
            if (need_dw) {
                im2col_2d(xv->value.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, kh,
                          kw, stride, pad, Ho, Wo, cols.data());
                MapConstMat Cm(cols.data(), K, span);
                MapMat dWm(grad_buf(*wv).data(), O, K);
                dWm.noalias() += Gm * Cm.transpose();
            }
            if (need_db) {
                float* db = grad_buf(*n_.parents[2]).data();
                for (int o = 0; o < O; ++o) db[o] += Gm.row(o).sum();
            }
            if (need_dx) {
                MapMat dCm(cols.data(), K, span);
                dCm.noalias() = Wm.transpose() * Gm;
                col2im_2d(cols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                          grad_buf(*xv).data() + static_cast<std::int64_t>(n) * C * H * W);
            }
        }
    };
    return make_op("conv2d", std::move(out), std::move(parents), std::move(bw));
}

// ---------------------------------------------------------------------------
// conv3d via vol2col + GEMM
// ---------------------------------------------------------------------------

namespace {

void im2col_3d(const float* x, int C, int D, int H, int W, int k, int stride, int pad, int Do,
               int Ho, int Wo, float* cols) {
    const std::int64_t span = static_cast<std::int64_t>(Do) * Ho * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c) {
        const float* xc = x + static_cast<std::int64_t>(c) * D * H * W;
        for (int kd = 0; kd < k; ++kd)
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j, ++r) {
                    float* row = cols + r * span;
                    std::int64_t idx = 0;
                    for (int oz = 0; oz < Do; ++oz) {
                        int iz = oz * stride - pad + kd;
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * stride - pad + i;
                            for (int ox = 0; ox < Wo; ++ox, ++idx) {
                                int ix = ox * stride - pad + j;
                                row[idx] = (iz >= 0 && iz < D && iy >= 0 && iy < H && ix >= 0 &&
                                            ix < W)
                                               ? xc[(static_cast<std::int64_t>(iz) * H + iy) * W +
                                                    ix]
                                               : 0.0f;
                            }
                        }
                    }
                }
    }
}

void col2im_3d(const float* cols, int C, int D, int H, int W, int k, int stride, int pad, int Do,
               int Ho, int Wo, float* dx) {
    const std::int64_t span = static_cast<std::int64_t>(Do) * Ho * Wo;
    std::int64_t r = 0;
    for (int c = 0; c < C; ++c) {
        float* xc = dx + static_cast<std::int64_t>(c) * D * H * W;
        for (int kd = 0; kd < k; ++kd)
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j, ++r) {
                    const float* row = cols + r * span;
                    std::int64_t idx = 0;
                    for (int oz = 0; oz < Do; ++oz) {
                        int iz = oz * stride - pad + kd;
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * stride - pad + i;
                            for (int ox = 0; ox < Wo; ++ox, ++idx) {
                                int ix = ox * stride - pad + j;
                                if (iz >= 0 && iz < D && iy >= 0 && iy < H && ix >= 0 && ix < W)
                                    xc[(static_cast<std::int64_t>(iz) * H + iy) * W + ix] +=
                                        row[idx];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check_same_tape(x, w);
    if (b) check_same_tape(x, b);
    const auto& xd = x->value.dims();
    const auto& wd = w->value.dims();
    if (xd.size() != 5 || wd.size() != 5)
        throw ContractError("autodiff", "conv3d expects NCDHW input and OIKKK weight");
    const int N = xd[0], C = xd[1], D = xd[2], H = xd[3], W = xd[4];
    const int O = wd[0], k = wd[2];
    if (wd[1] != C || wd[3] != k || wd[4] != k)
        throw ContractError("autodiff", "conv3d weight shape mismatch");
    const int Do = (D + 2 * pad - k) / stride + 1;
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Do <= 0 || Ho <= 0 || Wo <= 0)
        throw ContractError("autodiff", "conv3d output dims non-positive");

    const int K = C * k * k * k;
    const std::int64_t span = static_cast<std::int64_t>(Do) * Ho * Wo;
    Tensor out({N, O, Do, Ho, Wo});
    std::vector<float> cols(static_cast<size_t>(K) * span);
    MapConstMat Wm(w->value.data(), O, K);
    const std::int64_t xsz = static_cast<std::int64_t>(C) * D * H * W;
    for (int n = 0; n < N; ++n) {
        im2col_3d(x->value.data() + n * xsz, C, D, H, W, k, stride, pad, Do, Ho, Wo, cols.data());
        MapConstMat Cm(cols.data(), K, span);
        MapMat Om(out.data() + static_cast<std::int64_t>(n) * O * span, O, span);
        Om.noalias() = Wm * Cm;
        if (b) {
            const float* pb = b->value.data();
            for (int o = 0; o < O; ++o) Om.row(o).array() += pb[o];
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    auto bw = [N, C, D, H, W, O, k, stride, pad, Do, Ho, Wo, K, span, xsz,
               has_b = static_cast<bool>(b)](Node& n_) {
        const Var& xv = n_.parents[0];
        const Var& wv = n_.parents[1];
        std::vector<float> cols(static_cast<size_t>(K) * span);
        MapConstMat Wm(wv->value.data(), O, K);
        for (int n = 0; n < N; ++n) {
            MapConstMat Gm(n_.grad.data() + static_cast<std::int64_t>(n) * O * span, O, span);
            if (wv->requires_grad) {
                im2col_3d(xv->value.data() + n * xsz, C, D, H, W, k, stride, pad, Do, Ho, Wo,
                          cols.data());
                MapConstMat Cm(cols.data(), K, span);
                MapMat dWm(grad_buf(*wv).data(), O, K);
                dWm.noalias() += Gm * Cm.transpose();
            }
            if (has_b && n_.parents[2]->requires_grad) {
                float* db = grad_buf(*n_.parents[2]).data();
                for (int o = 0; o < O; ++o) db[o] += Gm.row(o).sum();
            }
            if (xv->requires_grad) {
                MapMat dCm(cols.data(), K, span);
                dCm.noalias() = Wm.transpose() * Gm;
                col2im_3d(cols.data(), C, D, H, W, k, stride, pad, Do, Ho, Wo,
                          grad_buf(*xv).data() + n * xsz);
            }
        }
    };
    return make_op("conv3d", std::move(out), std::move(parents), std::move(bw));
}

// ---------------------------------------------------------------------------
// Resampling (half-pixel convention, edges clamped)
// ---------------------------------------------------------------------------

namespace {

struct AxisMap {
    std::vector<int> i0, i1;
    std::vector<float> w1;  // weight of i1; weight of i0 is 1-w1
};

AxisMap make_axis_map(int in, int out) {
    AxisMap m;
    m.i0.resize(static_cast<size_t>(out));
    m.i1.resize(static_cast<size_t>(out));
    m.w1.resize(static_cast<size_t>(out));
    const double r = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * r - 0.5;
        double f = std::floor(src);
        int lo = static_cast<int>(f);
        float t = static_cast<float>(src - f);
        m.i0[static_cast<size_t>(o)] = std::clamp(lo, 0, in - 1);
        m.i1[static_cast<size_t>(o)] = std::clamp(lo + 1, 0, in - 1);
        m.w1[static_cast<size_t>(o)] = t;
    }
    return m;
}

}  // namespace

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    const auto& xd = x->value.dims();
    if (xd.size() != 4) throw ContractError("autodiff", "resize_bilinear expects NCHW");
    if (out_h <= 0 || out_w <= 0)
        throw ContractError("autodiff", "resize_bilinear: non-positive target dims");
    const int N = xd[0], C = xd[1], H = xd[2], W = xd[3];
    if (H == out_h && W == out_w) {
        // Identity resample: pass values through (still a node for audits).
        Tensor v = x->value;
        return make_op("resize_bilinear", std::move(v), {x}, [](Node& n_) {
            if (n_.parents[0]->requires_grad) add_into(grad_buf(*n_.parents[0]), n_.grad);
        });
    }
    auto ym = std::make_shared<AxisMap>(make_axis_map(H, out_h));
    auto xm = std::make_shared<AxisMap>(make_axis_map(W, out_w));
    Tensor out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src =
                x->value.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            float* dst = out.data() + (static_cast<std::int64_t>(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const float* r0 = src + static_cast<std::int64_t>(ym->i0[oy]) * W;
                const float* r1 = src + static_cast<std::int64_t>(ym->i1[oy]) * W;
                const float ty = ym->w1[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const float tx = xm->w1[ox];
                    float top = r0[xm->i0[ox]] * (1.0f - tx) + r0[xm->i1[ox]] * tx;
                    float bot = r1[xm->i0[ox]] * (1.0f - tx) + r1[xm->i1[ox]] * tx;
                    dst[static_cast<std::int64_t>(oy) * out_w + ox] =
                        top * (1.0f - ty) + bot * ty;
                }
            }
        }
    return make_op("resize_bilinear", std::move(out), {x},
                   [N, C, H, W, out_h, out_w, ym, xm](Node& n_) {
                       if (!n_.parents[0]->requires_grad) return;
                       float* dx = grad_buf(*n_.parents[0]).data();
                       const float* g = n_.grad.data();
                       for (int n = 0; n < N; ++n)
                           for (int c = 0; c < C; ++c) {
                               float* dsrc = dx + (static_cast<std::int64_t>(n) * C + c) * H * W;
                               const float* gd =
                                   g + (static_cast<std::int64_t>(n) * C + c) * out_h * out_w;
                               for (int oy = 0; oy < out_h; ++oy) {
                                   const float ty = ym->w1[oy];
                                   for (int ox = 0; ox < out_w; ++ox) {
                                       const float tx = xm->w1[ox];
                                       const float gv =
                                           gd[static_cast<std::int64_t>(oy) * out_w + ox];
                                       dsrc[static_cast<std::int64_t>(ym->i0[oy]) * W +
                                            xm->i0[ox]] += gv * (1.0f - ty) * (1.0f - tx);
                                       dsrc[static_cast<std::int64_t>(ym->i0[oy]) * W +
                                            xm->i1[ox]] += gv * (1.0f - ty) * tx;
                                       dsrc[static_cast<std::int64_t>(ym->i1[oy]) * W +
                                            xm->i0[ox]] += gv * ty * (1.0f - tx);
                                       dsrc[static_cast<std::int64_t>(ym->i1[oy]) * W +
                                            xm->i1[ox]] += gv * ty * tx;
                                   }
                               }
                           }
                   });
}

Var resize_trilinear(const Var& x, int out_d, int out_h, int out_w) {
    const auto& xd = x->value.dims();
    if (xd.size() != 5) throw ContractError("autodiff", "resize_trilinear expects NCDHW");
    if (out_d <= 0 || out_h <= 0 || out_w <= 0)
        throw ContractError("autodiff", "resize_trilinear: non-positive target dims");
    const int N = xd[0], C = xd[1], D = xd[2], H = xd[3], W = xd[4];
    if (D == out_d && H == out_h && W == out_w) {
        Tensor v = x->value;
        return make_op("resize_trilinear", std::move(v), {x}, [](Node& n_) {
            if (n_.parents[0]->requires_grad) add_into(grad_buf(*n_.parents[0]), n_.grad);
        });
    }
    auto zm = std::make_shared<AxisMap>(make_axis_map(D, out_d));
    auto ym = std::make_shared<AxisMap>(make_axis_map(H, out_h));
    auto xm = std::make_shared<AxisMap>(make_axis_map(W, out_w));
    Tensor out({N, C, out_d, out_h, out_w});
    const std::int64_t in_sp = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t out_sp = static_cast<std::int64_t>(out_d) * out_h * out_w;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x->value.data() + (static_cast<std::int64_t>(n) * C + c) * in_sp;
            float* dst = out.data() + (static_cast<std::int64_t>(n) * C + c) * out_sp;
            std::int64_t idx = 0;
            for (int oz = 0; oz < out_d; ++oz) {
                const float tz = zm->w1[oz];
                const float* s0 = src + static_cast<std::int64_t>(zm->i0[oz]) * H * W;
                const float* s1 = src + static_cast<std::int64_t>(zm->i1[oz]) * H * W;
                for (int oy = 0; oy < out_h; ++oy) {
                    const float ty = ym->w1[oy];
                    const float* r00 = s0 + static_cast<std::int64_t>(ym->i0[oy]) * W;
                    const float* r01 = s0 + static_cast<std::int64_t>(ym->i1[oy]) * W;
                    const float* r10 = s1 + static_cast<std::int64_t>(ym->i0[oy]) * W;
                    const float* r11 = s1 + static_cast<std::int64_t>(ym->i1[oy]) * W;
                    for (int ox = 0; ox < out_w; ++ox, ++idx) {
                        const float tx = xm->w1[ox];
                        const int a = xm->i0[ox], b = xm->i1[ox];
                        float v00 = r00[a] * (1 - tx) + r00[b] * tx;
                        float v01 = r01[a] * (1 - tx) + r01[b] * tx;
                        float v10 = r10[a] * (1 - tx) + r10[b] * tx;
                        float v11 = r11[a] * (1 - tx) + r11[b] * tx;
                        float v0 = v00 * (1 - ty) + v01 * ty;
                        float v1 = v10 * (1 - ty) + v11 * ty;
                        dst[idx] = v0 * (1 - tz) + v1 * tz;
                    }
                }
            }
        }
    return make_op(
        "resize_trilinear", std::move(out), {x},
        [N, C, D, H, W, out_d, out_h, out_w, zm, ym, xm, in_sp, out_sp](Node& n_) {
            if (!n_.parents[0]->requires_grad) return;
            float* dx = grad_buf(*n_.parents[0]).data();
            const float* g = n_.grad.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    float* dsrc = dx + (static_cast<std::int64_t>(n) * C + c) * in_sp;
                    const float* gd = g + (static_cast<std::int64_t>(n) * C + c) * out_sp;
                    std::int64_t idx = 0;
                    for (int oz = 0; oz < out_d; ++oz) {
                        const float tz = zm->w1[oz];
                        for (int oy = 0; oy < out_h; ++oy) {
                            const float ty = ym->w1[oy];
                            for (int ox = 0; ox < out_w; ++ox, ++idx) {
                                const float tx = xm->w1[ox];
                                const float gv = gd[idx];
                                for (int dz = 0; dz < 2; ++dz) {
                                    const int iz = dz ? zm->i1[oz] : zm->i0[oz];
                                    const float wz = dz ? tz : 1 - tz;
                                    for (int dy = 0; dy < 2; ++dy) {
                                        const int iy = dy ? ym->i1[oy] : ym->i0[oy];
                                        const float wy = dy ? ty : 1 - ty;
                                        for (int dxb = 0; dxb < 2; ++dxb) {
                                            const int ix = dxb ? xm->i1[ox] : xm->i0[ox];
                                            const float wx = dxb ? tx : 1 - tx;
                                            dsrc[(static_cast<std::int64_t>(iz) * H + iy) * W +
                                                 ix] += gv * wz * wy * wx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

Var batch_norm_stats(const Var& x, float eps, const char* tag, std::vector<double>* out_mean,
                     std::vector<double>* out_var) {
    const auto& xd = x->value.dims();
    if (xd.size() < 3) throw ContractError("autodiff", "batch_norm_stats expects rank >= 3");
    const int N = xd[0], C = xd[1];
    const std::int64_t sp = x->value.numel() / (static_cast<std::int64_t>(N) * C);
    const std::int64_t per_c = static_cast<std::int64_t>(N) * sp;

    std::vector<double> mean(static_cast<size_t>(C), 0.0);
    std::vector<double> var(static_cast<size_t>(C), 0.0);
    const float* px = x->value.data();
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = px + (static_cast<std::int64_t>(n) * C + c) * sp;
            for (std::int64_t i = 0; i < sp; ++i) s += p[i];
        }
        mean[static_cast<size_t>(c)] = s / static_cast<double>(per_c);
        double v = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = px + (static_cast<std::int64_t>(n) * C + c) * sp;
            for (std::int64_t i = 0; i < sp; ++i) {
                double d = p[i] - mean[static_cast<size_t>(c)];
                v += d * d;
            }
        }
        var[static_cast<size_t>(c)] = v / static_cast<double>(per_c);
    }
    if (out_mean) *out_mean = mean;
    if (out_var) *out_var = var;

    auto denom = std::make_shared<std::vector<float>>(static_cast<size_t>(C));
    auto sigma_over_eps = std::make_shared<std::vector<char>>(static_cast<size_t>(C));
    Tensor out(xd);
    float* po = out.data();
    for (int c = 0; c < C; ++c) {
        double sigma = std::sqrt(var[static_cast<size_t>(c)]);
        double d = std::max(sigma, static_cast<double>(eps));
        (*denom)[static_cast<size_t>(c)] = static_cast<float>(d);
        (*sigma_over_eps)[static_cast<size_t>(c)] = sigma > eps ? 1 : 0;
        const float m = static_cast<float>(mean[static_cast<size_t>(c)]);
        const float inv = static_cast<float>(1.0 / d);
        for (int n = 0; n < N; ++n) {
            const float* p = px + (static_cast<std::int64_t>(n) * C + c) * sp;
            float* q = po + (static_cast<std::int64_t>(n) * C + c) * sp;
            for (std::int64_t i = 0; i < sp; ++i) q[i] = (p[i] - m) * inv;
        }
    }

    return make_op(tag, std::move(out), {x}, [N, C, sp, per_c, denom, sigma_over_eps](Node& n_) {
        if (!n_.parents[0]->requires_grad) return;
        float* dx = grad_buf(*n_.parents[0]).data();
        const float* g = n_.grad.data();
        const float* y = n_.value.data();
        for (int c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gy = 0.0;
            for (int n = 0; n < N; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * sp;
                for (std::int64_t i = 0; i < sp; ++i) {
                    sum_g += g[off + i];
                    sum_gy += static_cast<double>(g[off + i]) * y[off + i];
                }
            }
            const float mg = static_cast<float>(sum_g / static_cast<double>(per_c));
            const float mgy = static_cast<float>(sum_gy / static_cast<double>(per_c));
            const float inv = 1.0f / (*denom)[static_cast<size_t>(c)];
            const bool live_sigma = (*sigma_over_eps)[static_cast<size_t>(c)] != 0;
            for (int n = 0; n < N; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * sp;
                for (std::int64_t i = 0; i < sp; ++i) {
                    // Denominator is a constant (eps) when sigma hit the floor.
                    float t = live_sigma ? g[off + i] - mg - y[off + i] * mgy
                                         : g[off + i] - mg;
                    dx[off + i] += t * inv;
                }
            }
        }
    });
}

Var normalize_fixed(const Var& x, const std::vector<float>& mean,
                    const std::vector<float>& denom, const char* tag) {
    const auto& xd = x->value.dims();
    if (xd.size() < 3) throw ContractError("autodiff", "normalize_fixed expects rank >= 3");
    const int N = xd[0], C = xd[1];
    if (static_cast<int>(mean.size()) != C || static_cast<int>(denom.size()) != C)
        throw ContractError("autodiff", "normalize_fixed: stats size mismatch");
    const std::int64_t sp = x->value.numel() / (static_cast<std::int64_t>(N) * C);
    Tensor out(xd);
    const float* px = x->value.data();
    float* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * sp;
            const float m = mean[static_cast<size_t>(c)];
            const float inv = 1.0f / denom[static_cast<size_t>(c)];
            for (std::int64_t i = 0; i < sp; ++i) po[off + i] = (px[off + i] - m) * inv;
        }
    auto dcopy = std::make_shared<std::vector<float>>(denom);
    return make_op(tag, std::move(out), {x}, [N, C, sp, dcopy](Node& n_) {
        if (!n_.parents[0]->requires_grad) return;
        float* dx = grad_buf(*n_.parents[0]).data();
        const float* g = n_.grad.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * sp;
                const float inv = 1.0f / (*dcopy)[static_cast<size_t>(c)];
                for (std::int64_t i = 0; i < sp; ++i) dx[off + i] += g[off + i] * inv;
            }
    });
}

// ---------------------------------------------------------------------------
// Graph audits
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void visit_graph(const Var& out, Fn&& fn) {
    std::unordered_set<const Node*> seen;
    std::vector<const Node*> stack{out.get()};
    while (!stack.empty()) {
        const Node* n = stack.back();
        stack.pop_back();
        if (!n || !seen.insert(n).second) continue;
        fn(*n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
}

}  // namespace

std::unordered_set<const Param*> reachable_params(const Var& out) {
    std::unordered_set<const Param*> ps;
    visit_graph(out, [&](const Node& n) {
        if (n.param) ps.insert(n.param);
    });
    return ps;
}

int count_ops(const Var& out, const std::string& op_name) {
    int count = 0;
    visit_graph(out, [&](const Node& n) {
        if (op_name == n.op) ++count;
    });
    return count;
}

}  // namespace a3dseg
