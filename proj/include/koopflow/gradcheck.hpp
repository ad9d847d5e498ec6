#pragma once

#include <functional>

#include "koopflow/tensor.hpp"

namespace koopflow {

// Central-difference gradient estimate of a scalar-valued function. Runs with
// recording disabled so it stays independent of the tape machinery it is used
// to check.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    if (h <= 0.0) throw NumericError("finite_diff_grad requires h > 0");
    NoGradGuard no_grad;
    Tensor g = Tensor::zeros(x.shape());
    Tensor xp = x.clone();
    for (long i = 0; i < x.numel(); ++i) {
        double orig = xp.data()[i];
        xp.data()[i] = orig + h;
        double fp = f(xp);
        xp.data()[i] = orig - h;
        double fm = f(xp);
        xp.data()[i] = orig;
        g.data()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// max-abs relative disagreement, guarded against tiny reference gradients
inline double grad_rel_error(const Tensor& analytic, const Tensor& reference) {
    if (analytic.shape() != reference.shape())
        throw ShapeError("grad_rel_error shape mismatch");
    double max_abs = 0.0, scale = 0.0;
    for (long i = 0; i < analytic.numel(); ++i) {
        max_abs = std::max(max_abs, std::abs(analytic.at(i) - reference.at(i)));
        scale = std::max(scale, std::abs(reference.at(i)));
    }
    return max_abs / std::max(scale, 1.0);
}

}  // namespace koopflow
