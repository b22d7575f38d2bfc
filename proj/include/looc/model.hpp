#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "looc/error.hpp"
#include "looc/rng.hpp"
#include "looc/tensor.hpp"

namespace looc {

struct EncoderCfg {
    std::size_t input_dim = 3 * 32 * 32;
    std::vector<std::size_t> trunk{512, 256};
    std::size_t v_dim = 128;
    std::size_t head_hidden = 256;
    std::size_t z_dim = 64;
    std::size_t n_heads = 1;
    bool plusplus = false;
    std::size_t adapter_width = 128;
    // Fixed input normalisation (x - input_mean) / input_std, applied after
    // augmentation and before the first layer.
    double input_mean = 0.14;  // pixel statistics of the default synthetic set
    double input_std = 0.11;

    void validate() const {
        if (!(input_std > 0.0)) throw ValidationError("input_std must be > 0");
        if (input_dim < 1 || v_dim < 1 || head_hidden < 1 || z_dim < 1 || adapter_width < 1)
            throw ValidationError("encoder widths must all be >= 1");
        if (trunk.empty()) throw ValidationError("trunk must have at least one hidden layer");
        for (std::size_t w : trunk)
            if (w < 1) throw ValidationError("trunk widths must all be >= 1");
        if (n_heads < 1) throw ValidationError("n_heads must be >= 1");
    }

    bool operator==(const EncoderCfg&) const = default;
};

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

/// Optional LooC++ adapter (Linear + ReLU), then Linear-ReLU-Linear projection.
struct Head {
    std::optional<Linear> adapter;
    Linear hidden;
    Linear out;
};

/// Encoder f (MLP trunk ending in the d-dim representation v) and heads h_0..h_n.
class Network {
public:
    Network() = default;

    /// Fan-in scaled uniform weights U(-sqrt(6/in), sqrt(6/in)) (ReLU gain, so
    /// activation scale survives depth), zero biases. The trunk draws from
    /// rng.child("trunk", {layer}) and head i from rng.child("head", {i, part}),
    /// so the trunk does not depend on how many heads or adapters exist.
    static Network init(const EncoderCfg& cfg, const RngStream& rng) {
        cfg.validate();
        Network net;
        net.cfg_ = cfg;
        auto make = [](std::size_t in, std::size_t out, RngStream r) {
            Linear l{Tensor(Shape{in, out}), Tensor(Shape{out}, 0.0)};
            const double bound = std::sqrt(6.0 / static_cast<double>(in));
            for (double& w : l.weight.storage()) w = r.uniform(-bound, bound);
            return l;
        };
        std::size_t in = cfg.input_dim;
        std::vector<std::size_t> widths = cfg.trunk;
        widths.push_back(cfg.v_dim);
        for (std::size_t l = 0; l < widths.size(); ++l) {
            net.trunk_.push_back(make(in, widths[l], rng.child("trunk", {l})));
            in = widths[l];
        }
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            Head head;
            std::size_t head_in = cfg.v_dim;
            if (cfg.plusplus) {
                head.adapter = make(cfg.v_dim, cfg.adapter_width, rng.child("head", {h, 0}));
                head_in = cfg.adapter_width;
            }
            head.hidden = make(head_in, cfg.head_hidden, rng.child("head", {h, 1}));
            head.out = make(cfg.head_hidden, cfg.z_dim, rng.child("head", {h, 2}));
            net.heads_.push_back(std::move(head));
        }
        return net;
    }

    const EncoderCfg& cfg() const noexcept { return cfg_; }
    std::size_t n_heads() const noexcept { return heads_.size(); }

    /// Parameters in a fixed order with stable names.
    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (std::size_t l = 0; l < trunk_.size(); ++l) {
            out.emplace_back("trunk." + std::to_string(l) + ".weight", &trunk_[l].weight);
            out.emplace_back("trunk." + std::to_string(l) + ".bias", &trunk_[l].bias);
        }
        for (std::size_t h = 0; h < heads_.size(); ++h) {
            const std::string p = "head." + std::to_string(h) + ".";
            if (heads_[h].adapter) {
                out.emplace_back(p + "adapter.weight", &heads_[h].adapter->weight);
                out.emplace_back(p + "adapter.bias", &heads_[h].adapter->bias);
            }
            out.emplace_back(p + "hidden.weight", &heads_[h].hidden.weight);
            out.emplace_back(p + "hidden.bias", &heads_[h].hidden.bias);
            out.emplace_back(p + "out.weight", &heads_[h].out.weight);
            out.emplace_back(p + "out.bias", &heads_[h].out.bias);
        }
        return out;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    std::vector<const Tensor*> params() const {
        std::vector<const Tensor*> out;
        for (auto& [name, t] : const_cast<Network*>(this)->named_params()) out.push_back(t);
        return out;
    }

    std::vector<std::string> param_names() const {
        std::vector<std::string> out;
        for (auto& [name, t] : const_cast<Network*>(this)->named_params()) out.push_back(name);
        return out;
    }

    const std::vector<Linear>& trunk() const noexcept { return trunk_; }
    const std::vector<Head>& heads() const noexcept { return heads_; }

private:
    EncoderCfg cfg_;
    std::vector<Linear> trunk_;
    std::vector<Head> heads_;
};

struct QueryOutputs {
    Var v;                    // [b, d]
    std::vector<Var> z;       // n+1 of [b, d'], unit rows
    std::vector<Var> f_plus;  // n+1 adapter features when plusplus, else empty
    std::vector<Var> params;  // tape leaves aligned with Network::params()
};

struct KeyOutputs {
    Tensor v;
    std::vector<Tensor> z;
    std::vector<Tensor> f_plus;
};

namespace model_detail {

inline Tensor flatten_batch(const Tensor& x, const EncoderCfg& cfg) {
    if (x.rank() < 2) throw DimensionError("encoder input must be batched, got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0);
    if (b == 0 || x.numel() / b != cfg.input_dim)
        throw DimensionError("encoder expects " + std::to_string(cfg.input_dim) + " features per sample, got " +
                             shape_str(x.shape()));
    Tensor out = x.reshaped(Shape{b, cfg.input_dim});
    if (cfg.input_mean != 0.0 || cfg.input_std != 1.0) {
        const double inv = 1.0 / cfg.input_std;
        for (double& v : out.storage()) v = (v - cfg.input_mean) * inv;
    }
    return out;
}

inline Var linear(Tape& tape, Var x, Var w, Var b) { return tape.add_bias(tape.matmul(x, w), b); }

// Builds the forward graph; `as_leaf(tensor)` registers each parameter.
template <typename LeafFn>
QueryOutputs forward(Tape& tape, const Network& net, const Tensor& x, LeafFn&& as_leaf) {
    QueryOutputs out;
    auto leaf = [&](const Tensor& t) {
        Var v = as_leaf(t);
        out.params.push_back(v);
        return v;
    };
    Var h = tape.constant(flatten_batch(x, net.cfg()));
    const auto& trunk = net.trunk();
    for (std::size_t l = 0; l < trunk.size(); ++l) {
        Var w = leaf(trunk[l].weight);
        Var b = leaf(trunk[l].bias);
        h = linear(tape, h, w, b);
        if (l + 1 < trunk.size()) h = tape.relu(h);
    }
    out.v = h;
    for (const Head& head : net.heads()) {
        Var in = out.v;
        if (head.adapter) {
            Var w = leaf(head.adapter->weight);
            Var b = leaf(head.adapter->bias);
            in = tape.relu(linear(tape, in, w, b));
            out.f_plus.push_back(in);
        }
        Var w1 = leaf(head.hidden.weight);
        Var b1 = leaf(head.hidden.bias);
        Var w2 = leaf(head.out.weight);
        Var b2 = leaf(head.out.bias);
        Var z = linear(tape, tape.relu(linear(tape, in, w1, b1)), w2, b2);
        out.z.push_back(tape.l2_normalize(z));
    }
    return out;
}

}  // namespace model_detail

/// Differentiable forward: parameters become tape leaves.
inline QueryOutputs forward_query(Tape& tape, const Network& net, const Tensor& x) {
    return model_detail::forward(tape, net, x, [&](const Tensor& t) { return tape.parameter(t); });
}

/// Forward with every parameter detached; results carry no tape handle.
inline KeyOutputs forward_key(const Network& net, const Tensor& x) {
    Tape tape;
    QueryOutputs q = model_detail::forward(tape, net, x, [&](const Tensor& t) { return tape.constant(t); });
    KeyOutputs out;
    out.v = tape.value(q.v);
    for (Var z : q.z) out.z.push_back(tape.value(z));
    for (Var f : q.f_plus) out.f_plus.push_back(tape.value(f));
    return out;
}

/// Query network plus its momentum-updated key copy.
struct ModelPair {
    Network query;
    Network key;
    double m = 0.999;

    static ModelPair init(const EncoderCfg& cfg, const RngStream& rng, double m = 0.999) {
        ModelPair p;
        p.query = Network::init(cfg, rng);
        p.key = p.query;
        p.m = m;
        return p;
    }
};

/// key <- m * key + (1 - m) * query, elementwise.
inline void momentum_update(ModelPair& pair) {
    auto q = pair.query.params();
    auto k = pair.key.params();
    if (q.size() != k.size()) throw DimensionError("momentum_update: parameter trees differ");
    const double m = pair.m;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i]->shape() != k[i]->shape())
            throw DimensionError("momentum_update: " + shape_str(k[i]->shape()) + " vs " + shape_str(q[i]->shape()));
        auto& kd = k[i]->storage();
        const auto& qd = q[i]->storage();
        for (std::size_t j = 0; j < kd.size(); ++j) kd[j] = m * kd[j] + (1.0 - m) * qd[j];
    }
}

enum class RepresentationKind { Looc, LoocPlusPlus };

/// looc -> v; loocpp -> adapter features of `heads` (all heads when empty)
/// concatenated in head order.
inline Tensor representation(RepresentationKind kind, const KeyOutputs& out, const std::vector<std::size_t>& heads = {}) {
    if (kind == RepresentationKind::Looc) return out.v;
    if (out.f_plus.empty()) throw ValidationError("loocpp representation requested from a model without adapters");
    std::vector<std::size_t> use = heads;
    if (use.empty())
        for (std::size_t i = 0; i < out.f_plus.size(); ++i) use.push_back(i);
    const std::size_t rows = out.f_plus[0].rows();
    std::size_t total = 0;
    for (std::size_t h : use) {
        if (h >= out.f_plus.size())
            throw IndexError("head " + std::to_string(h) + " out of range for " + std::to_string(out.f_plus.size()) +
                             " heads");
        total += out.f_plus[h].cols();
    }
    Tensor rep(Shape{rows, total});
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t off = 0;
        for (std::size_t h : use) {
            auto src = out.f_plus[h].row(r);
            std::copy(src.begin(), src.end(), rep.data().begin() + static_cast<std::ptrdiff_t>(r * total + off));
            off += src.size();
        }
    }
    return rep;
}

}  // namespace looc
