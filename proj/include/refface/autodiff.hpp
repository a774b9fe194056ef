#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "refface/tensor.hpp"

namespace refface::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
    }
};

// Lightweight handle to a graph node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& val() const { return n_->value; }
    Tensor& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    const NodePtr& node() const { return n_; }
    double scalar() const { return n_->value.data[0]; }

private:
    NodePtr n_;
};

// Global inference switch: when disabled, ops record no parents/backward
// closures, so forward passes allocate only their outputs.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev); }
};

Var make_leaf(Tensor v, bool requires_grad = true);
Var make_const(Tensor v);

// Runs reverse-mode accumulation from a scalar loss. Grads add into any
// reachable node with requires_grad, including leaves held elsewhere.
void backward(const Var& loss);

// ---- elementwise / arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var silu(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                       // [M,K]·[K,N]
Var linear(const Var& x, const Var& w, const Var& b);         // x [...,Din], w [Dout,Din]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);  // NCHW
Var upsample2x(const Var& x);                                 // nearest, NCHW
Var global_avg_pool(const Var& x);                            // [N,C,H,W] -> [N,C]

// ---- normalization ----
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);      // [N,D], unit rows

// ---- attention ----
// q [N,Lq,D], k/v [N,Lk,D], mask [N*Lk] (1 = attendable). Masked lanes get
// exactly zero attention weight, so masking a lane is bit-identical to
// removing it. Rows whose mask is all zero yield a zero output row.
Var masked_attention(const Var& q, const Var& k, const Var& v, const std::vector<uint8_t>& mask);

// ---- shape ----
Var reshape(const Var& x, std::vector<int64_t> shape);
Var concat(const Var& a, const Var& b, int axis);
Var slice(const Var& x, int axis, int64_t start, int64_t len);
Var chw_to_tokens(const Var& x);                              // [N,C,H,W] -> [N,H*W,C]
Var tokens_to_chw(const Var& x, int64_t c, int64_t h, int64_t w);
Var patchify(const Var& x, int p);                            // [N,C,H,W] -> [N,L,C*p*p]
Var unpatchify(const Var& x, int64_t c, int64_t h, int64_t w, int p);

// ---- indexed / per-sample ----
Var gather_rows(const Var& table, const std::vector<int64_t>& idx);   // [R,D] -> [N,D]
Var rows_scale(const Var& x, const Var& s);                   // x [N,...] * s [N]
Var rows_dot(const Var& a, const Var& b);                     // [N,D] -> [N]
Var add_channel_bias(const Var& x, const Var& bias);          // x [N,C,H,W] + bias [N,C]
Var select_tokens(const std::vector<uint8_t>& cond, const Var& a, const Var& b);  // [N,L,D]

// ---- reductions / losses ----
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var l1_loss(const Var& a, const Var& b);                      // mean |a-b|
Var mse_loss(const Var& a, const Var& b);
Var softmax_xent(const Var& logits, const std::vector<int64_t>& labels);  // mean NLL
// ArcFace-style additive angular margin on the target-class cosine
// (easy-margin variant: applied only where cos > 0).
Var arc_margin(const Var& cos_logits, const std::vector<int64_t>& labels, double margin);

}  // namespace refface::ad
