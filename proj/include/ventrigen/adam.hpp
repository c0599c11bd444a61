#pragma once

// Adam with bias correction over a named parameter list.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ventrigen/tensor.hpp"

namespace vgen {

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;

    struct Moments {
        std::vector<double> m, v;
    };
    std::unordered_map<std::string, Moments> moments;
};

inline void adam_step(ParamList& params, AdamState& state) {
    for (auto& p : params) {
        if (!p.tensor.has_grad()) {
            fail("adam_step: parameter '" + p.name + "' has no gradient");
        }
    }
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& p : params) {
        auto& mom = state.moments[p.name];
        std::size_t n = p.tensor.size();
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        double* w = p.tensor.data();
        const std::vector<double>& g = p.tensor.grad_view();
        for (std::size_t i = 0; i < n; ++i) {
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = mom.m[i] / bc1;
            double vhat = mom.v[i] / bc2;
            w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace vgen
