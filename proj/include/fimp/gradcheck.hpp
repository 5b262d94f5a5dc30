#pragma once

#include <functional>

#include "fimp/ops.hpp"

namespace fimp {

// Central-difference check of the backpropagated gradient of a deterministic
// scalar-valued function at `point`. Returns the worst componentwise relative
// error with denominator max(|analytic|, |numeric|, 1e-8). Meant to run on
// Tensor<double>; float headroom is too small for 1e-4 verdicts.
template <class T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& point, T step) {
    Tensor<T> x = point.clone();
    x.set_requires_grad(true);

    Tape<T> tape;
    std::vector<T> analytic;
    {
        TapeScope<T> scope(tape);
        Tensor<T> loss = fn(x);
        if (loss.size() != 1) throw ShapeError("grad_check: fn must return a scalar");
        if (!all_finite(loss)) throw NumericError("grad_check: non-finite loss at base point");
        tape.backward(loss);
        analytic = x.grad();
        if (analytic.empty()) analytic.assign(x.size(), T(0));
    }

    T worst = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor<T> xp = point.clone();
        Tensor<T> xm = point.clone();
        xp.at(i) += step;
        xm.at(i) -= step;
        const T fp = fn(xp).item();
        const T fm = fn(xm).item();
        if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
            throw NumericError("grad_check: non-finite value at component " + std::to_string(i));
        const T numeric = (fp - fm) / (T(2) * step);
        const T denom = std::max({std::abs(analytic[i]), std::abs(numeric), T(1e-8)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    if (!std::isfinite(static_cast<double>(worst))) throw NumericError("grad_check: non-finite error estimate");
    return worst;
}

}  // namespace fimp
