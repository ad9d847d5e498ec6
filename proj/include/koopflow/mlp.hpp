#pragma once

#include <string>
#include <utility>
#include <vector>

#include "koopflow/tensor.hpp"

namespace koopflow::nn {

// Named parameter handles; tensors are shared, so updating through the map
// updates the owning module.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

enum class Act { identity, tanh, silu };

inline const char* act_name(Act a) {
    switch (a) {
        case Act::identity: return "identity";
        case Act::tanh: return "tanh";
        case Act::silu: return "silu";
    }
    return "identity";
}

inline Act act_from_name(const std::string& s) {
    if (s == "identity") return Act::identity;
    if (s == "tanh") return Act::tanh;
    if (s == "silu") return Act::silu;
    throw ConfigError("unknown activation '" + s + "'");
}

inline Tensor apply_act(Act a, const Tensor& x) {
    switch (a) {
        case Act::identity: return x;
        case Act::tanh: return tanh(x);
        case Act::silu: return silu(x);
    }
    return x;
}

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(long in, long out, Rng& rng, bool zero_init) : w(Tensor::zeros({in, out})), b(Tensor::zeros({out})) {
        if (!zero_init) {
            double a = std::sqrt(1.0 / static_cast<double>(in));
            for (long i = 0; i < w.numel(); ++i) w.data()[i] = rng.uniform(-a, a);
        }
        w.set_requires_grad(true);
        b.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
};

// Plain feedforward net on row batches. zero_init_last makes the net output
// exactly zero at construction (identity-at-init flows rely on this).
class Mlp {
public:
    Mlp() = default;

    Mlp(long in, const std::vector<long>& hidden, long out, Act act, Rng& rng, bool zero_init_last)
        : in_dim(in), out_dim(out), act(act) {
        long prev = in;
        for (long h : hidden) {
            layers.emplace_back(prev, h, rng, false);
            prev = h;
        }
        layers.emplace_back(prev, out, rng, zero_init_last);
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].forward(h);
            if (i + 1 < layers.size()) h = apply_act(act, h);
        }
        return h;
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            out.emplace_back(prefix + ".w" + std::to_string(i), layers[i].w);
            out.emplace_back(prefix + ".b" + std::to_string(i), layers[i].b);
        }
    }

    void randomize(Rng& rng, double scale) {
        for (auto& layer : layers) {
            double a = scale * std::sqrt(1.0 / static_cast<double>(std::max<long>(1, layer.w.rows())));
            for (long i = 0; i < layer.w.numel(); ++i) layer.w.data()[i] = rng.uniform(-a, a);
            for (long i = 0; i < layer.b.numel(); ++i) layer.b.data()[i] = rng.uniform(-0.1, 0.1);
        }
    }

    long in_dim = 0;
    long out_dim = 0;
    Act act = Act::silu;
    std::vector<Linear> layers;
};

}  // namespace koopflow::nn
