#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "expr.hpp"
#include "expr_io.hpp"

namespace tpsido {

enum class Extension { global, cutoff };
// Value of a cutoff component inside the unit ball.
enum class Interior { formula, zero };

struct HomComponent {
    double degree = 0.0;
    Expr expr;
    Extension extension = Extension::global;
    Interior interior = Interior::formula;
};

enum class SymbolKind { classical, parametric };

class Symbol {
public:
    SymbolKind kind = SymbolKind::classical;
    double order = 0.0;
    double mu_weight = 0.0;
    TwistMatrix twist{1};
    BackendPtr backend;
    std::vector<HomComponent> components;

    int truncation() const { return static_cast<int>(components.size()); }
    bool parametric() const { return kind == SymbolKind::parametric; }
    const HomComponent& operator[](int j) const { return components.at(static_cast<std::size_t>(j)); }
    const Expr& expr(int j) const { return (*this)[j].expr; }
};

using PolyhomSymbol = Symbol;
using ParamSymbol = Symbol;

namespace detail {

inline bool any_node(const Expr& e, const std::function<bool(const Expr&)>& pred) {
    std::unordered_map<const Node*, bool> seen;
    auto rec = [&](auto&& self, const Expr& x) -> bool {
        if (auto it = seen.find(x.id()); it != seen.end()) return it->second;
        bool r = pred(x);
        for (const auto& c : x.children()) r = r || self(self, c);
        seen.emplace(x.id(), r);
        return r;
    };
    return rec(rec, e);
}

inline bool has_negative_abs(const Expr& e) {
    return any_node(e, [](const Expr& x) { return x.kind() == NodeKind::abs_xi_power && x.power() < 0.0; });
}

// |xi|^s is smooth at 0 only for even s >= 0.
inline bool has_nonsmooth_abs(const Expr& e) {
    return any_node(e, [](const Expr& x) {
        if (x.kind() != NodeKind::abs_xi_power) return false;
        const double s = x.power();
        return s < 0.0 || !integral(s) || static_cast<long>(s) % 2 != 0;
    });
}

inline bool is_polynomial_in_xi(const Expr& e) {
    return !any_node(e, [](const Expr& x) {
        return x.kind() == NodeKind::abs_xi_power || (x.kind() == NodeKind::inv && x.depends_on_xi());
    });
}

}  // namespace detail

inline Interior default_interior(const Expr& e) {
    return detail::has_negative_abs(e) ? Interior::zero : Interior::formula;
}

// Components that cannot be continued smoothly into xi = 0 are treated as cut off at |xi| = 1.
inline Extension default_extension(const Expr& e, SymbolKind kind) {
    if (e.is_zero()) return Extension::global;
    if (detail::has_nonsmooth_abs(e)) return Extension::cutoff;
    if (kind == SymbolKind::classical && e.degree() && *e.degree() < 0.0) return Extension::cutoff;
    return Extension::global;
}

inline HomComponent component(double degree, Expr e, SymbolKind kind = SymbolKind::classical) {
    HomComponent c{degree, e, default_extension(e, kind), default_interior(e)};
    return c;
}

namespace detail {

inline void check_homogeneity(const HomComponent& c, SymbolKind kind, int j) {
    const Expr& e = c.expr;
    if (e.is_zero()) return;
    if (e.degree()) {
        if (std::abs(*e.degree() - c.degree) > 1e-12)
            throw SymbolError("component " + std::to_string(j) + " has degree " + format_double(*e.degree()) +
                              ", expected " + format_double(c.degree));
        return;
    }
    if (c.extension == Extension::global)
        throw SymbolError("global component " + std::to_string(j) + " has no structural homogeneity degree");
    // cutoff component: sample homogeneity outside the unit ball
    const int n = e.backend()->dim();
    const Program prog(e);
    const double s = 2.0;
    for (int k = 0; k < 4; ++k) {
        std::vector<double> x(static_cast<std::size_t>(n)), sx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = 1.5 * std::cos(0.7 * k + 1.3 * i) + (i == 0 ? 0.4 : 0.0);
        double r = 0.0;
        for (double v : x) r += v * v;
        r = std::sqrt(r);
        for (int i = 0; i < n; ++i) {
            x[static_cast<std::size_t>(i)] *= 1.6 / r;
            sx[static_cast<std::size_t>(i)] = s * x[static_cast<std::size_t>(i)];
        }
        const cplx mu = kind == SymbolKind::parametric ? std::polar(1.3, std::numbers::pi / 2) : cplx{1.0, 0.0};
        try {
            auto a = prog(x, mu), b = prog(sx, s * mu);
            const double scale = std::pow(s, c.degree);
            if (alg_norm(b - scale * a) > 1e-8 * scale * std::max(alg_norm(a), 1e-300))
                throw SymbolError("component " + std::to_string(j) + " is not homogeneous of degree " +
                                  format_double(c.degree) + " outside the unit ball");
        } catch (const SingularElement&) {
        }
    }
}

}  // namespace detail

// Validated graded symbol; degrees must sit on the ladder m, m-1, ..., m-N+1.
inline Symbol make_symbol(const std::vector<HomComponent>& comps, double m, int N, const TwistMatrix& B,
                          const BackendPtr& backend, SymbolKind kind = SymbolKind::classical, double mu_weight = 0.0) {
    if (N < 1) throw SymbolError("truncation N must be >= 1");
    if (B.dim() != backend->dim()) throw SymbolError("twist dimension does not match the action dimension");
    Symbol s;
    s.kind = kind;
    s.order = m;
    s.mu_weight = mu_weight;
    s.twist = B;
    s.backend = backend;
    for (int j = 0; j < N; ++j) s.components.push_back({m - j, zero_expr(backend), Extension::global, Interior::formula});
    std::vector<bool> filled(static_cast<std::size_t>(N), false);
    for (const auto& c : comps) {
        require_same(backend, c.expr.backend());
        const double shift = m - c.degree;
        const double js = std::round(shift);
        if (std::abs(shift - js) > 1e-12 || js < 0)
            throw SymbolError("degree " + format_double(c.degree) + " is not on the ladder below order " + format_double(m));
        if (js >= N)
            throw SymbolError("degree " + format_double(c.degree) + " lies beyond truncation N = " + std::to_string(N));
        if (kind == SymbolKind::classical && c.expr.depends_on_mu())
            throw SymbolError("classical symbol component depends on mu");
        auto& slot = s.components[static_cast<std::size_t>(js)];
        if (filled[static_cast<std::size_t>(js)]) {
            slot.expr = slot.expr + c.expr;
            if (c.extension == Extension::cutoff) slot.extension = Extension::cutoff;
            if (c.interior == Interior::zero) slot.interior = Interior::zero;
        } else {
            slot = c;
            slot.degree = m - js;
            filled[static_cast<std::size_t>(js)] = true;
        }
    }
    for (int j = 0; j < N; ++j) detail::check_homogeneity(s.components[static_cast<std::size_t>(j)], kind, j);
    return s;
}

// Groups the top-level terms of e by structural degree.
inline std::vector<HomComponent> split_homogeneous(const Expr& e, SymbolKind kind = SymbolKind::classical) {
    std::vector<Expr> terms = e.kind() == NodeKind::sum ? e.children() : std::vector<Expr>{e};
    std::map<double, std::vector<Expr>, std::greater<>> by_degree;
    for (const auto& t : terms) {
        if (t.is_zero()) continue;
        if (!t.degree()) throw SymbolError("term " + expr_to_string(t) + " has no homogeneity degree");
        by_degree[*t.degree()].push_back(t);
    }
    std::vector<HomComponent> out;
    for (auto& [d, ts] : by_degree) out.push_back(component(d, sum(ts), kind));
    return out;
}

inline Symbol symbol_from_expr(const Expr& e, double m, int N, const TwistMatrix& B,
                               SymbolKind kind = SymbolKind::classical) {
    return make_symbol(split_homogeneous(e, kind), m, N, B, e.backend(), kind);
}

namespace detail {

inline void check_compatible(const Symbol& f, const Symbol& g) {
    require_same(f.backend, g.backend);
    if (!(f.twist == g.twist)) throw SymbolError("twist mismatch");
}

// Homogeneous parts g^{B,alpha}_{m'-l}: k' runs over 0..l when l < |alpha|, else 0..|alpha|.
class TwistedParts {
public:
    explicit TwistedParts(const Symbol& g) : g_(g) {}

    Expr get(const MultiIndex& alpha, int l) {
        auto key = std::make_pair(alpha, l);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
        const BackendPtr& b = g_.backend;
        const int a = order(alpha);
        const int kmax = l < a ? l : a;
        std::vector<Expr> parts;
        for (int kp = 0; kp <= kmax; ++kp) {
            const Expr& src = g_.expr(l - kp);
            if (src.is_zero()) continue;
            for (const auto& [beta, gamma] : splits(alpha)) {
                if (order(gamma) != kp) continue;
                Expr t = expr_delta(expr_dB(src, gamma, g_.twist), beta);
                if (t.is_zero()) continue;
                parts.push_back(prod({scalar(b, binomial(alpha, beta) * detail::int_pow(I, order(beta))), t}));
            }
        }
        Expr r = parts.empty() ? zero_expr(b) : sum(std::move(parts));
        memo_.emplace(key, r);
        return r;
    }

private:
    const Symbol& g_;
    std::map<std::pair<MultiIndex, int>, Expr> memo_;
};

class XiDerivatives {
public:
    explicit XiDerivatives(const Symbol& f) : f_(f) {}
    Expr get(const MultiIndex& alpha, int k) {
        auto key = std::make_pair(alpha, k);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
        Expr r = expr_dxi(f_.expr(k), alpha);
        memo_.emplace(key, r);
        return r;
    }

private:
    const Symbol& f_;
    std::map<std::pair<MultiIndex, int>, Expr> memo_;
};

inline HomComponent assembled(double degree, Expr e, bool cutoff, bool zero_inside, SymbolKind kind) {
    HomComponent c{degree, e, cutoff ? Extension::cutoff : Extension::global, Interior::formula};
    if (c.extension == Extension::global && default_extension(e, kind) == Extension::cutoff) c.extension = Extension::cutoff;
    if (zero_inside || default_interior(e) == Interior::zero) c.interior = Interior::zero;
    return c;
}

}  // namespace detail

// Twisted composition expansion truncated at N components.
inline Symbol sharp_compose(const Symbol& f, const Symbol& g, int N) {
    detail::check_compatible(f, g);
    if (N < 1 || N > std::min(f.truncation(), g.truncation()))
        throw SymbolError("truncation N must lie in 1..min of the input truncations");
    const int n = f.backend->dim();
    const BackendPtr& b = f.backend;
    const SymbolKind kind = (f.parametric() || g.parametric()) ? SymbolKind::parametric : SymbolKind::classical;

    detail::XiDerivatives df(f);
    detail::TwistedParts tg(g);
    std::vector<HomComponent> comps;
    for (int j = 0; j < N; ++j) {
        std::vector<Expr> parts;
        bool cutoff = false, zero_inside = false;
        for (int a = 0; a <= j; ++a) {
            const cplx w = detail::int_pow(-I, a);
            for (const auto& alpha : multi_indices_of_order(n, a)) {
                for (int k = 0; k + a <= j; ++k) {
                    const int l = j - k - a;
                    Expr left = df.get(alpha, k);
                    if (left.is_zero()) continue;
                    Expr right = tg.get(alpha, l);
                    if (right.is_zero()) continue;
                    parts.push_back(prod({scalar(b, w / factorial(alpha)), left, right}));
                    for (const HomComponent* c : {&f[k], &g[l]}) {
                        cutoff = cutoff || c->extension == Extension::cutoff;
                        zero_inside = zero_inside || (c->extension == Extension::cutoff && c->interior == Interior::zero);
                    }
                }
            }
        }
        Expr e = parts.empty() ? zero_expr(b) : sum(std::move(parts));
        comps.push_back(detail::assembled(f.order + g.order - j, e, cutoff, zero_inside, kind));
    }
    Symbol out;
    out.kind = kind;
    out.order = f.order + g.order;
    out.mu_weight = f.mu_weight + g.mu_weight;
    out.twist = f.twist;
    out.backend = b;
    out.components = std::move(comps);
    return out;
}

// f^* expansion: (f^*)_{m-j} = sum_{k+|alpha|=j} (1/alpha!) delta^alpha d_xi^alpha [f_{m-k}]^*
inline Symbol adjoint_expand(const Symbol& f, int N) {
    if (f.parametric()) throw SymbolError("adjoint expansion needs a classical symbol");
    if (N < 1 || N > f.truncation()) throw SymbolError("truncation N must lie in 1..input truncation");
    const int n = f.backend->dim();
    const BackendPtr& b = f.backend;
    std::vector<Expr> star;
    for (int k = 0; k < N; ++k) star.push_back(expr_adjoint(f.expr(k)));
    std::vector<HomComponent> comps;
    for (int j = 0; j < N; ++j) {
        std::vector<Expr> parts;
        bool cutoff = false, zero_inside = false;
        for (int a = 0; a <= j; ++a) {
            const int k = j - a;
            if (star[static_cast<std::size_t>(k)].is_zero()) continue;
            for (const auto& alpha : multi_indices_of_order(n, a)) {
                Expr t = expr_delta(expr_dxi(star[static_cast<std::size_t>(k)], alpha), alpha);
                if (t.is_zero()) continue;
                parts.push_back(prod({scalar(b, 1.0 / factorial(alpha)), t}));
                cutoff = cutoff || f[k].extension == Extension::cutoff;
                zero_inside = zero_inside || (f[k].extension == Extension::cutoff && f[k].interior == Interior::zero);
            }
        }
        Expr e = parts.empty() ? zero_expr(b) : sum(std::move(parts));
        comps.push_back(detail::assembled(f.order - j, e, cutoff, zero_inside, SymbolKind::classical));
    }
    Symbol out = f;
    out.components = std::move(comps);
    return out;
}

// ---------------------------------------------------------------- sectors and ellipticity

// Gamma = {mu : arg mu in (arg_min, arg_max)}, sampled on radii [r_min, r_max].
struct SectorSpec {
    double arg_min = std::numbers::pi / 4;
    double arg_max = 3 * std::numbers::pi / 4;
    double r_min = 0.1;
    double r_max = 10.0;
    int angles = 5;
    int radii = 6;

    void validate() const {
        if (!(arg_min < arg_max)) throw Error("sector needs arg_min < arg_max");
        if (arg_min <= -std::numbers::pi || arg_max >= std::numbers::pi)
            throw Error("sector must avoid the principal branch cut along the negative real axis");
        if (!(r_min > 0.0) || !(r_max >= r_min)) throw Error("sector radii must satisfy 0 < r_min <= r_max");
        if (angles < 1 || radii < 1) throw Error("sector sampling counts must be positive");
    }

    std::vector<double> angle_samples() const {
        std::vector<double> out;
        for (int i = 0; i < angles; ++i) out.push_back(arg_min + (arg_max - arg_min) * (i + 0.5) / angles);
        return out;
    }

    std::vector<double> radius_samples() const {
        std::vector<double> out;
        if (radii == 1) return {r_min};
        for (int i = 0; i < radii; ++i) out.push_back(r_min * std::pow(r_max / r_min, static_cast<double>(i) / (radii - 1)));
        return out;
    }

    std::vector<cplx> samples() const {
        std::vector<cplx> out;
        for (double a : angle_samples())
            for (double r : radius_samples()) out.push_back(std::polar(r, a));
        return out;
    }

    double center() const { return 0.5 * (arg_min + arg_max); }
    bool contains(cplx mu) const {
        const double a = std::arg(mu);
        return a > arg_min && a < arg_max;
    }
};

// Points on the unit sphere used for ellipticity sampling.
inline std::vector<std::vector<double>> sphere_grid(int n, int count = 32) {
    std::vector<std::vector<double>> out;
    if (n == 1) return {{1.0}, {-1.0}};
    if (n == 2) {
        for (int k = 0; k < count; ++k) {
            const double t = 2 * std::numbers::pi * k / count;
            out.push_back({std::cos(t), std::sin(t)});
        }
        return out;
    }
    // deterministic quasi-random directions plus the coordinate axes
    for (int j = 0; j < n; ++j)
        for (double s : {1.0, -1.0}) {
            std::vector<double> e(static_cast<std::size_t>(n), 0.0);
            e[static_cast<std::size_t>(j)] = s;
            out.push_back(e);
        }
    for (int k = 1; k <= count; ++k) {
        std::vector<double> v(static_cast<std::size_t>(n));
        double r = 0.0;
        for (int j = 0; j < n; ++j) {
            v[static_cast<std::size_t>(j)] = std::sin(k * (1.0 + std::sqrt(2.0 + j)) + j);
            r += v[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
        }
        for (auto& x : v) x /= std::sqrt(r);
        out.push_back(v);
    }
    return out;
}

struct EllipticityReport {
    bool pass = true;
    int samples = 0;
    double worst_condition = 1.0;
    double worst_residual = 0.0;
    std::vector<double> failure_xi;
    cplx failure_mu;
    std::string failure;
};

// Sampling grid for the ellipticity check; the default radii 0.1 .. 10 include |mu| = 1.
struct EllipticityGrid {
    int circle_points = 32;
    int radii = 5;
    double r_min = 0.1;
    double r_max = 10.0;
};

inline EllipticityReport ellipticity_check(const Symbol& f, int m, const SectorSpec& sector,
                                           const EllipticityGrid& grid = {}) {
    if (m < 1) throw SymbolError("ellipticity needs a positive integer order m");
    sector.validate();
    SectorSpec rays = sector;
    rays.r_min = grid.r_min;
    rays.r_max = grid.r_max;
    rays.radii = grid.radii;
    rays.validate();
    EllipticityReport rep;
    const BackendPtr& b = f.backend;
    const Program top(f.expr(0));
    const auto one = AlgebraElement::identity(b);
    for (const auto& x : sphere_grid(b->dim(), grid.circle_points)) {
        for (const cplx mu : rays.samples()) {
            ++rep.samples;
            auto fail = [&](const std::string& why) {
                rep.pass = false;
                rep.failure_xi = x;
                rep.failure_mu = mu;
                rep.failure = why;
            };
            try {
                auto a = top(x, 0.0) - mu_power_value(mu, m) * one;
                const double cond = alg_condition(a);
                if (!(cond <= 1e12)) {
                    fail("condition estimate " + format_double(cond));
                    return rep;
                }
                auto inv = alg_inverse(a);
                rep.worst_condition = std::max(rep.worst_condition, cond);
                rep.worst_residual = std::max(rep.worst_residual, alg_norm(a * inv - one));
            } catch (const SingularElement& e) {
                fail(e.what());
                return rep;
            }
        }
    }
    return rep;
}

// f - mu^m, as a parametric symbol.
inline Symbol subtract_mu_power(const Symbol& f, int m) {
    if (f.parametric()) throw SymbolError("expected a classical symbol");
    if (std::abs(f.order - m) > 1e-12) throw SymbolError("symbol order differs from m");
    Symbol out = f;
    out.kind = SymbolKind::parametric;
    out.components[0].expr = f.expr(0) - mu_pow(f.backend, m);
    out.components[0].extension = Extension::global;
    return out;
}

// g_{-m} = (f_m - mu^m)^{-1},
// g_{-m-j} = -sum_{k+l+|alpha|=j, l<j} ((-i)^{|alpha|}/alpha!) g_{-m} d^alpha f_{m-k} g^{B,alpha}_{-m-l}
inline Symbol parametrix(const Symbol& f, int m, int N, const SectorSpec& sector) {
    if (f.parametric()) throw SymbolError("parametrix needs a classical symbol");
    if (m < 1 || std::abs(f.order - m) > 1e-12) throw SymbolError("parametrix needs order m equal to a positive integer");
    if (N < 1 || N > f.truncation()) throw SymbolError("truncation N must lie in 1..input truncation");
    const auto rep = ellipticity_check(f, m, sector);
    if (!rep.pass) {
        std::string where = "xi = (";
        for (std::size_t i = 0; i < rep.failure_xi.size(); ++i) where += (i ? ", " : "") + format_double(rep.failure_xi[i]);
        where += "), mu = " + format_complex(rep.failure_mu);
        throw SymbolError("symbol is not elliptic with parameter at " + where + ": " + rep.failure);
    }
    const int n = f.backend->dim();
    const BackendPtr& b = f.backend;

    bool all_global = true;
    for (int k = 0; k < N; ++k)
        all_global = all_global && (f.expr(k).is_zero() || (f[k].extension == Extension::global &&
                                                             detail::is_polynomial_in_xi(f.expr(k))));

    Symbol g;
    g.kind = SymbolKind::parametric;
    g.order = -m;
    g.mu_weight = -m;
    g.twist = f.twist;
    g.backend = b;
    const Expr q = inv(f.expr(0) - mu_pow(b, m));
    g.components.push_back({-static_cast<double>(m), q, Extension::global, Interior::formula});

    detail::XiDerivatives df(f);
    detail::TwistedParts tg(g);
    for (int j = 1; j < N; ++j) {
        std::vector<Expr> parts;
        for (int a = 0; a <= j; ++a) {
            const cplx w = detail::int_pow(-I, a);
            for (const auto& alpha : multi_indices_of_order(n, a)) {
                for (int k = 0; k + a <= j; ++k) {
                    const int l = j - k - a;
                    if (l >= j) continue;
                    Expr left = df.get(alpha, k);
                    if (left.is_zero()) continue;
                    Expr right = tg.get(alpha, l);
                    if (right.is_zero()) continue;
                    parts.push_back(prod({scalar(b, -w / factorial(alpha)), q, left, right}));
                }
            }
        }
        Expr e = parts.empty() ? zero_expr(b) : sum(std::move(parts));
        HomComponent c{static_cast<double>(-m - j), e, all_global ? Extension::global : Extension::cutoff, default_interior(e)};
        g.components.push_back(c);
        // TwistedParts reads g through a reference, so later components see this one.
    }
    return g;
}

// Symbol of (P - lambda)^{-k} as g # ... # g.
inline Symbol resolvent_power_symbol(const Symbol& g, int k, int N) {
    if (k < 1) throw SymbolError("resolvent power k must be >= 1");
    Symbol r = g;
    if (N < r.truncation()) r.components.resize(static_cast<std::size_t>(N));
    for (int i = 1; i < k; ++i) r = sharp_compose(r, g, N);
    return r;
}

}  // namespace tpsido
