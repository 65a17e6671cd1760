#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "twisted_psido/calculus.hpp"
#include "twisted_psido/error.hpp"

namespace tpsido {

struct QuadratureSpec {
    double rel_tol = 1e-8;
    int circle_points = 64;
    unsigned max_depth = 18;
    SectorSpec rays{};

    void validate() const {
        if (!(rel_tol > 0.0)) throw Error("quadrature tolerance must be positive");
        if (circle_points < 2 || circle_points % 2 != 0) throw Error("circle rule needs an even point count >= 2");
        rays.validate();
    }
};

// Equal-weight rule on S^{n-1}; weight already includes the sphere measure.
struct SphereRule {
    std::vector<std::vector<double>> points;
    double weight = 0.0;
};

inline SphereRule sphere_rule(int n, const QuadratureSpec& spec) {
    if (n == 1) return {{{1.0}, {-1.0}}, 1.0};
    if (n == 2) {
        SphereRule s;
        const int M = spec.circle_points;
        for (int k = 0; k < M; ++k) {
            const double t = 2 * std::numbers::pi * k / M;
            s.points.push_back({std::cos(t), std::sin(t)});
        }
        s.weight = 2 * std::numbers::pi / M;
        return s;
    }
    throw DomainError("quadrature is implemented for n = 1 and n = 2 only (got n = " + std::to_string(n) + ")");
}

// (2 pi)^{-n}
inline double dbar(int n) { return std::pow(2 * std::numbers::pi, -n); }

namespace detail {

inline cplx gk_integrate(const std::function<cplx(double)>& F, double a, double b, const QuadratureSpec& spec) {
    if (!(b > a)) return {};
    double err = 0.0, l1 = 0.0;
    const cplx v = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(F, a, b, spec.max_depth, spec.rel_tol,
                                                                                  &err, &l1);
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw QuadratureError("radial integral is not finite on [" + std::to_string(a) + ", " + std::to_string(b) + "]");
    if (err > 100.0 * spec.rel_tol * l1 + 1e-300)
        throw QuadratureError("radial integral did not converge on [" + std::to_string(a) + ", " + std::to_string(b) +
                              "]: error estimate " + std::to_string(err) + " against L1 " + std::to_string(l1));
    return v;
}

}  // namespace detail

// int_a^b F(r) dr
inline cplx radial_integral(const std::function<cplx(double)>& F, double a, double b, const QuadratureSpec& spec) {
    return detail::gk_integrate(F, a, b, spec);
}

// int_a^inf F(r) dr via r = a/s
inline cplx radial_tail(const std::function<cplx(double)>& F, double a, const QuadratureSpec& spec) {
    if (!(a > 0.0)) throw Error("tail integral needs a positive lower limit");
    auto G = [&](double s) -> cplx { return F(a / s) * (a / (s * s)); };
    return detail::gk_integrate(G, 0.0, 1.0, spec);
}

// Integrand of Tr_psi: a list of components with their inside-the-ball policies.
class TraceIntegrand {
public:
    TraceIntegrand(int n, const QuadratureSpec& spec) : n_(n), sphere_(sphere_rule(n, spec)) {}

    void add(const Expr& e, bool zero_inside = false) {
        if (e.is_zero()) return;
        parts_.push_back({Program(e), zero_inside});
    }
    void add(const HomComponent& c) {
        add(c.expr, c.extension == Extension::cutoff && c.interior == Interior::zero);
    }

    bool empty() const { return parts_.empty(); }
    int dim() const { return n_; }

    // psi of the integrand at xi
    cplx at(std::span<const double> xi, cplx mu) const {
        double r2 = 0.0;
        for (double x : xi) r2 += x * x;
        cplx s{};
        for (const auto& p : parts_)
            if (!(p.zero_inside && r2 < 1.0)) s += p.prog.trace(xi, mu);
        return s;
    }

    // (2 pi)^{-n} r^{n-1} int_{S^{n-1}} psi(f(r omega)) d omega
    cplx shell(double r, cplx mu) const {
        std::vector<double> xi(static_cast<std::size_t>(n_));
        cplx s{};
        for (const auto& w : sphere_.points) {
            for (int i = 0; i < n_; ++i) xi[static_cast<std::size_t>(i)] = r * w[static_cast<std::size_t>(i)];
            s += at(xi, mu);
        }
        return s * (sphere_.weight * dbar(n_) * std::pow(r, n_ - 1));
    }

private:
    struct Part {
        Program prog;
        bool zero_inside;
    };
    int n_;
    SphereRule sphere_;
    std::vector<Part> parts_;
};

// int psi(f(xi, mu)) dbar xi over all of R^n, split at |xi| = 1 and |xi| = max(1, |mu|).
inline cplx integrate_trace(const TraceIntegrand& f, cplx mu, const QuadratureSpec& spec) {
    if (f.empty()) return {};
    auto F = [&](double r) { return f.shell(r, mu); };
    const double rho = std::max(1.0, std::abs(mu));
    cplx v = radial_integral(F, 0.0, 1.0, spec);
    if (rho > 1.0) v += radial_integral(F, 1.0, rho, spec);
    return v + radial_tail(F, rho, spec);
}

inline cplx trace_quadrature_oracle(const Expr& e, cplx mu, const QuadratureSpec& spec = {}) {
    TraceIntegrand f(e.backend()->dim(), spec);
    f.add(e);
    return integrate_trace(f, mu, spec);
}

inline cplx trace_quadrature_oracle(const HomComponent& c, cplx mu, const QuadratureSpec& spec = {}) {
    TraceIntegrand f(c.expr.backend()->dim(), spec);
    f.add(c);
    return integrate_trace(f, mu, spec);
}

inline cplx trace_quadrature_oracle(const Symbol& s, cplx mu, const QuadratureSpec& spec = {}) {
    const int n = s.backend->dim();
    TraceIntegrand f(n, spec);
    for (const auto& c : s.components) {
        if (c.expr.is_zero()) continue;
        if (c.degree >= -n)
            throw DomainError("trace integral diverges: component of degree " + std::to_string(c.degree) +
                              " is not below -n = " + std::to_string(-n));
        f.add(c);
    }
    return integrate_trace(f, mu, spec);
}

}  // namespace tpsido
