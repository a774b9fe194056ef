#include "refface/nn.hpp"

#include <cmath>

#include "refface/errors.hpp"

namespace refface::nn {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
    entries.push_back({name, ad::make_leaf(std::move(init), true)});
    return entries.back().var;
}

void ParamStore::set_trainable(bool trainable) {
    for (auto& e : entries) e.var.node()->requires_grad = trainable;
}

uint64_t ParamStore::params_hash() const {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& e : entries) {
        h = fnv1a64(e.name.data(), e.name.size(), h);
        h = hash_tensor(e.var.val(), h);
    }
    return h;
}

const ad::Var* ParamStore::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e.var;
    return nullptr;
}

void ParamStore::load_values(const std::map<std::string, Tensor>& tensors) {
    for (auto& e : entries) {
        auto it = tensors.find(e.name);
        if (it == tensors.end()) throw IoError("checkpoint is missing tensor: " + e.name);
        if (it->second.shape != e.var.val().shape)
            throw ShapeError("checkpoint tensor " + e.name + " has shape " +
                             it->second.shape_str() + ", expected " + e.var.val().shape_str());
        e.var.node()->value = it->second;
    }
}

std::map<std::string, Tensor> ParamStore::dump_values() const {
    std::map<std::string, Tensor> out;
    for (const auto& e : entries) out[e.name] = e.var.val();
    return out;
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.var.val().numel();
    return n;
}

Tensor he_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& x : t.data) x = rng.normal() * std;
    return t;
}

Linear::Linear(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout, Rng& rng,
               bool bias) {
    w = ps.add(prefix + ".w", he_init({dout, din}, din, rng));
    if (bias) b = ps.add(prefix + ".b", Tensor::zeros({dout}));
}

Conv2d::Conv2d(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout, int k,
               int stride_, int pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    w = ps.add(prefix + ".w", he_init({cout, cin, k, k}, cin * k * k, rng));
    b = ps.add(prefix + ".b", Tensor::zeros({cout}));
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& prefix, int64_t channels, int groups_) {
    groups = groups_;
    gamma = ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
    beta = ps.add(prefix + ".beta", Tensor::zeros({channels}));
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& prefix, int64_t dim) {
    gamma = ps.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
    beta = ps.add(prefix + ".beta", Tensor::zeros({dim}));
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& prefix, int64_t dim,
                                   int64_t mlp_dim, Rng& rng)
    : norm1(ps, prefix + ".norm1", dim),
      norm2(ps, prefix + ".norm2", dim),
      to_q(ps, prefix + ".q", dim, dim, rng),
      to_k(ps, prefix + ".k", dim, dim, rng),
      to_v(ps, prefix + ".v", dim, dim, rng),
      to_out(ps, prefix + ".out", dim, dim, rng),
      mlp1(ps, prefix + ".mlp1", dim, mlp_dim, rng),
      mlp2(ps, prefix + ".mlp2", mlp_dim, dim, rng) {}

ad::Var TransformerBlock::forward(const ad::Var& x) const {
    const int64_t n = x.val().shape[0], l = x.val().shape[1];
    std::vector<uint8_t> mask(static_cast<size_t>(n * l), 1);
    ad::Var h = norm1.forward(x);
    ad::Var attn = ad::masked_attention(to_q.forward(h), to_k.forward(h), to_v.forward(h), mask);
    ad::Var y = ad::add(x, to_out.forward(attn));
    ad::Var m = norm2.forward(y);
    m = mlp2.forward(ad::silu(mlp1.forward(m)));
    return ad::add(y, m);
}

Adam::Adam(const ParamStore& ps, double lr_) {
    lr = lr_;
    for (const auto& e : ps.entries) params.push_back(e.var);
    slots.resize(params.size());
    for (size_t i = 0; i < params.size(); i++) {
        slots[i].m = Tensor::zeros(params[i].val().shape);
        slots[i].v = Tensor::zeros(params[i].val().shape);
    }
}

Adam::Adam(const std::vector<ad::Var>& vars, double lr_) {
    lr = lr_;
    params = vars;
    slots.resize(params.size());
    for (size_t i = 0; i < params.size(); i++) {
        slots[i].m = Tensor::zeros(params[i].val().shape);
        slots[i].v = Tensor::zeros(params[i].val().shape);
    }
}

void Adam::zero_grad() {
    for (auto& p : params) {
        p.node()->ensure_grad();
        std::fill(p.grad().data.begin(), p.grad().data.end(), 0.0);
    }
}

void Adam::step() {
    t++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); i++) {
        auto& p = params[i];
        if (!p.requires_grad()) continue;
        p.node()->ensure_grad();
        Tensor& val = p.node()->value;
        const Tensor& g = p.grad();
        Tensor& m = slots[i].m;
        Tensor& v = slots[i].v;
        for (int64_t j = 0; j < val.numel(); j++) {
            m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * g.data[j];
            v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * g.data[j] * g.data[j];
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            val.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace refface::nn
