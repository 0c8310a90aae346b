#ifndef C3OWD_GRAD_CHECK_HPP
#define C3OWD_GRAD_CHECK_HPP

#include <cmath>
#include <string>

#include "c3owd/types.hpp"

namespace c3owd {

/// Outcome of one analytic-vs-numeric gradient comparison.
struct GradReport {
    std::string op_name;
    std::string param_name;
    double max_rel_err = 0.0;
};

/// |a - n| / max(|a|, |n|, 1e-8), the floor guarding near-zero gradients.
inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

inline double max_rel_err(const Vecd& analytic, const Vecd& numeric) {
    double worst = 0.0;
    for (Index i = 0; i < analytic.size(); ++i) worst = std::max(worst, rel_err(analytic(i), numeric(i)));
    return worst;
}

/// Central-difference gradient of a scalar-valued f at x.
/// Throws NumericError naming the coordinate if f returns a non-finite value.
template <typename F>
Vecd finite_diff_gradient(F&& f, const Vecd& x, double h = 1e-5) {
    require(h > 0, "finite_diff_gradient: h must be positive");
    Vecd g(x.size());
    Vecd xp = x;
    for (Index i = 0; i < x.size(); ++i) {
        const double orig = xp(i);
        xp(i) = orig + h;
        const double fp = f(static_cast<const Vecd&>(xp));
        xp(i) = orig - h;
        const double fm = f(static_cast<const Vecd&>(xp));
        xp(i) = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_gradient: non-finite f at coordinate " + std::to_string(i));
        g(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3.
/// Cancels the h^2 truncation term so a larger h can be used, pushing the
/// subtraction-noise floor low enough to resolve small-magnitude gradients.
template <typename F>
Vecd finite_diff_gradient_richardson(F&& f, const Vecd& x, double h = 2e-4) {
    const Vecd coarse = finite_diff_gradient(f, x, h);
    const Vecd fine = finite_diff_gradient(f, x, h / 2);
    return (4.0 * fine - coarse) / 3.0;
}

inline Vecd flatten(const Matd& m) {
    return Eigen::Map<const Vecd>(m.data(), m.size());
}

inline Matd unflatten(const Vecd& v, Index rows, Index cols) {
    require(v.size() == rows * cols, "unflatten: size mismatch");
    Matd m(rows, cols);
    Eigen::Map<Vecd>(m.data(), m.size()) = v;
    return m;
}

}  // namespace c3owd

#endif
