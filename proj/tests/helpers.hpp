#pragma once

// Shared test utilities: finite-difference oracles and tolerance helpers.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sfa/tensor.hpp"

namespace sfa::test {

// Central finite differences of a scalar-valued function with respect to one
// input tensor, element by element.
template <class T>
std::vector<T> finite_diff_grad(TensorT<T>& x, const std::function<T()>& eval,
                                T step = static_cast<T>(1e-4)) {
    std::vector<T> g(x.data().size());
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const T orig = x.data()[i];
        x.data()[i] = orig + step;
        const T fp = eval();
        x.data()[i] = orig - step;
        const T fm = eval();
        x.data()[i] = orig;
        g[i] = (fp - fm) / (2 * step);
    }
    return g;
}

template <class T>
bool close_rel(T a, T b, T rel_tol, T abs_floor = static_cast<T>(1e-8)) {
    const T diff = std::abs(a - b);
    const T scale = std::max(std::abs(a), std::abs(b));
    return diff <= std::max(abs_floor, rel_tol * scale);
}

template <class T>
T max_rel_diff(const std::vector<T>& a, const std::vector<T>& b,
               T abs_floor = static_cast<T>(1e-8)) {
    T worst = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T scale = std::max({std::abs(a[i]), std::abs(b[i]), abs_floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

template <class T>
T max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    T worst = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace sfa::test
