#pragma once

#include <map>
#include <string>
#include <vector>

#include "refface/autodiff.hpp"
#include "refface/rng.hpp"

namespace refface::nn {

// Named registry of trainable leaves. Models register parameters here;
// optimizers, checkpoints and freeze-hashing all go through the store.
struct ParamStore {
    struct Entry {
        std::string name;
        ad::Var var;
    };
    std::vector<Entry> entries;

    ad::Var add(const std::string& name, Tensor init);
    void set_trainable(bool trainable);
    uint64_t params_hash() const;
    const ad::Var* find(const std::string& name) const;
    void load_values(const std::map<std::string, Tensor>& tensors);
    std::map<std::string, Tensor> dump_values() const;
    int64_t param_count() const;
};

Tensor he_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);

struct Linear {
    ad::Var w, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout, Rng& rng,
           bool bias = true);
    ad::Var forward(const ad::Var& x) const { return ad::linear(x, w, b); }
};

struct Conv2d {
    ad::Var w, b;
    int stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout, int k, int stride,
           int pad, Rng& rng);
    ad::Var forward(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
    ad::Var gamma, beta;
    int groups = 8;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& prefix, int64_t channels, int groups);
    ad::Var forward(const ad::Var& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
    ad::Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& prefix, int64_t dim);
    ad::Var forward(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

// Pre-norm single-head self-attention + MLP block over token sequences.
struct TransformerBlock {
    LayerNorm norm1, norm2;
    Linear to_q, to_k, to_v, to_out, mlp1, mlp2;
    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t mlp_dim,
                     Rng& rng);
    ad::Var forward(const ad::Var& x) const;
};

struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    struct Slot {
        Tensor m, v;
    };
    std::vector<ad::Var> params;
    std::vector<Slot> slots;
    int64_t t = 0;

    Adam(const ParamStore& ps, double lr);
    Adam(const std::vector<ad::Var>& vars, double lr);
    void zero_grad();
    void step();
};

}  // namespace refface::nn
