#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "twisted_psido/calculus.hpp"
#include "twisted_psido/expr_io.hpp"
#include "twisted_psido/parallel.hpp"
#include "twisted_psido/quadrature.hpp"

namespace tpsido {

// ---------------------------------------------------------------- single components

struct PowerCoefficient {
    double exponent = 0.0;  // d + n
    cplx c{};               // Tr ~ c mu^{d+n}
};

// Coefficient of mu^{d+n} from the region |xi| >= |mu| (all of R^n for global components), evaluated at the unit u.
inline PowerCoefficient coeff_power(const HomComponent& comp, cplx u, const QuadratureSpec& spec = {}) {
    const int n = comp.expr.backend()->dim();
    const double e = comp.degree + n;
    if (comp.expr.is_zero()) return {e, {}};
    if (comp.degree >= -n)
        throw DomainError("power coefficient diverges: degree " + format_double(comp.degree) + " is not below -n");
    u /= std::abs(u);
    TraceIntegrand f(n, spec);
    f.add(comp.expr);
    auto F = [&](double r) { return f.shell(r, u); };
    cplx v = radial_tail(F, 1.0, spec);
    if (comp.extension == Extension::global) v += radial_integral(F, 0.0, 1.0, spec);
    return {e, v * mu_power_value(u, -e)};
}

struct ConstantPiece {
    double exponent = 0.0;
    cplx value{};
    cplx ball{};  // unit-ball integral of the ladder term alone
    std::string provenance;
};

struct LogConstResult {
    double exponent = 0.0;   // d + n
    int M = 0;
    double lead = 0.0;       // leading mu exponent of the component
    std::optional<cplx> c;   // coefficient of mu^{d+n}; absent when the outer region diverges
    cplx c_log{};            // coefficient of mu^{d+n} log mu
    cplx c_outer{}, c_annulus{}, c_remainder{};
    std::vector<ConstantPiece> constants;  // one per ladder step nu < M, at mu^{lead - nu}
};

// Three-region coefficients of a cutoff component: ball |xi| <= 1, annulus 1 <= |xi| <= |mu|, outer |xi| >= |mu|.
inline LogConstResult coeff_log_const(const HomComponent& comp, int M, cplx u, const QuadratureSpec& spec = {}) {
    if (comp.extension != Extension::cutoff) throw SymbolError("coeff_log_const needs a cutoff component");
    const int n = comp.expr.backend()->dim();
    const double d = comp.degree;
    LogConstResult out;
    out.exponent = d + n;
    out.M = M;
    u /= std::abs(u);
    if (comp.expr.is_zero()) {
        out.c = cplx{};
        return out;
    }
    auto [lead, q] = mu_ladder(comp.expr, static_cast<std::size_t>(std::max(M, 0)));
    out.lead = lead;
    if (!(M > lead - d - n))
        throw ExpansionError("M = " + std::to_string(M) + " too small: need M > " + format_double(lead - d - n));

    const SphereRule sphere = sphere_rule(n, spec);
    const bool ball_formula = comp.interior == Interior::formula;
    std::vector<Program> qp;
    for (const auto& x : q) qp.emplace_back(x);

    cplx annulus_power{};
    for (int nu = 0; nu < M; ++nu) {
        const double e_nu = lead - nu;
        const double p = d - e_nu;  // xi-degree of q_nu
        ConstantPiece piece{e_nu, {}, {}, ""};
        if (q[static_cast<std::size_t>(nu)].is_zero()) {
            piece.provenance = "zero ladder term";
            out.constants.push_back(piece);
            continue;
        }
        cplx C{};
        for (const auto& w : sphere.points) C += qp[static_cast<std::size_t>(nu)].trace(w, 1.0);
        C *= sphere.weight * dbar(n);

        cplx ball{};
        if (ball_formula) {
            if (p + n <= 0) throw DomainError("ball integral of a singular ladder term diverges");
            auto F = [&](double r) {
                cplx s{};
                std::vector<double> xi(static_cast<std::size_t>(n));
                for (const auto& w : sphere.points) {
                    for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(i)] = r * w[static_cast<std::size_t>(i)];
                    s += qp[static_cast<std::size_t>(nu)].trace(xi, 1.0);
                }
                return s * (sphere.weight * dbar(n) * std::pow(r, n - 1));
            };
            ball = radial_integral(F, 0.0, 1.0, spec);
        }
        piece.ball = ball;
        if (std::abs(p + n) < 1e-12) {
            out.c_log += C;
            annulus_power += -I * std::arg(u) * C;
            piece.value = ball;
            piece.provenance = ball_formula ? "unit ball" : "zero inside the unit ball";
        } else {
            annulus_power += C * mu_power_value(u, -(p + n)) / (p + n);
            piece.value = ball - C / (p + n);
            piece.provenance = ball_formula ? "unit ball + annulus at |xi| = 1" : "annulus at |xi| = 1";
        }
        out.constants.push_back(piece);
    }
    out.c_annulus = annulus_power;

    if (d < -n) {
        out.c_outer = coeff_power(comp, u, spec).c;
        // homogeneous remainder over the unit ball, rescaled by |mu|
        Program f(comp.expr);
        std::vector<cplx> upow;
        for (int nu = 0; nu < M; ++nu) upow.push_back(mu_power_value(u, lead - nu));
        auto F = [&](double r) {
            cplx s{};
            std::vector<double> xi(static_cast<std::size_t>(n));
            for (const auto& w : sphere.points) {
                for (int i = 0; i < n; ++i) xi[static_cast<std::size_t>(i)] = r * w[static_cast<std::size_t>(i)];
                cplx v = f.trace(xi, u);
                for (int nu = 0; nu < M; ++nu)
                    if (!q[static_cast<std::size_t>(nu)].is_zero())
                        v -= qp[static_cast<std::size_t>(nu)].trace(xi, 1.0) * upow[static_cast<std::size_t>(nu)];
                s += v;
            }
            return s * (sphere.weight * dbar(n) * std::pow(r, n - 1));
        };
        out.c_remainder = radial_integral(F, 0.0, 1.0, spec) * mu_power_value(u, -(d + n));
        out.c = out.c_outer + out.c_annulus + out.c_remainder;
    }
    return out;
}

// Direct quadrature of the annulus 1 <= |xi| <= |mu|.
inline cplx annulus_integral(const HomComponent& comp, cplx mu, const QuadratureSpec& spec = {}) {
    TraceIntegrand f(comp.expr.backend()->dim(), spec);
    f.add(comp.expr);
    return radial_integral([&](double r) { return f.shell(r, mu); }, 1.0, std::abs(mu), spec);
}

// Ball, annulus and outer integrals of one component at a fixed mu, each computed directly.
struct RegionSplit {
    cplx ball{}, annulus{}, outer{};
    cplx total() const { return ball + annulus + outer; }
};

inline RegionSplit region_integrals(const HomComponent& comp, cplx mu, const QuadratureSpec& spec = {}) {
    const int n = comp.expr.backend()->dim();
    if (comp.degree >= -n) throw DomainError("outer region diverges for degree >= -n");
    TraceIntegrand f(n, spec);
    f.add(comp.expr);
    RegionSplit out;
    const double R = std::abs(mu);
    if (R < 1.0) throw DomainError("region split needs |mu| >= 1");
    if (!(comp.extension == Extension::cutoff && comp.interior == Interior::zero))
        out.ball = radial_integral([&](double r) { return f.shell(r, mu); }, 0.0, 1.0, spec);
    out.annulus = annulus_integral(comp, mu, spec);
    // outer region rescaled: |mu|^{d+n} int_{|xi|>=1} psi(f(xi, mu/|mu|))
    const cplx u = mu / R;
    out.outer = std::pow(R, comp.degree + n) *
                radial_tail([&](double r) { return f.shell(r, u); }, 1.0, spec);
    return out;
}

// ---------------------------------------------------------------- full expansion

enum class TermKind { power, log, constant };

inline std::string to_string(TermKind k) {
    switch (k) {
        case TermKind::power: return "power";
        case TermKind::log: return "log";
        case TermKind::constant: return "constant";
    }
    return "?";
}

// mu_value multiplies mu^{mu_exponent} (times log mu for log terms).
// lambda_value multiplies (-lambda)^{lambda_exponent} (times log(-lambda)), lambda = mu^m, principal branches.
struct TraceTerm {
    TermKind kind = TermKind::power;
    double index = 0.0;  // j for power terms, l for log and constant terms
    double mu_exponent = 0.0;
    double lambda_exponent = 0.0;
    cplx mu_value{};
    cplx lambda_value{};
    bool exact = false;
    std::string provenance;
};

struct TraceExpansion {
    int n = 1;
    double m = 2.0;
    int k = 1;
    double order_a = 0.0;
    int J = 0;
    SectorSpec sector{};
    QuadratureSpec quadrature{};
    cplx unit{0.0, 1.0};
    bool lambda_valid = true;
    std::vector<TraceTerm> terms;

    std::vector<const TraceTerm*> of_kind(TermKind kind) const {
        std::vector<const TraceTerm*> out;
        for (const auto& t : terms)
            if (t.kind == kind) out.push_back(&t);
        return out;
    }

    // Distinct mu exponents carrying a term above rel * (largest term), descending.
    std::vector<double> exponents(double rel = 1e-12) const {
        double scale = 0.0;
        for (const auto& t : terms) scale = std::max(scale, std::abs(t.mu_value));
        std::vector<double> out;
        for (const auto& t : terms)
            if (std::abs(t.mu_value) > rel * scale &&
                std::none_of(out.begin(), out.end(), [&](double e) { return std::abs(e - t.mu_exponent) < 1e-9; }))
                out.push_back(t.mu_exponent);
        std::sort(out.rbegin(), out.rend());
        return out;
    }

    // Sum of the terms at the first `groups` exponents.
    cplx partial_sum(cplx mu, std::size_t groups) const {
        const auto ex = exponents();
        cplx s{};
        for (std::size_t g = 0; g < std::min(groups, ex.size()); ++g)
            for (const auto& t : terms) {
                if (std::abs(t.mu_exponent - ex[g]) >= 1e-9) continue;
                cplx v = t.mu_value * mu_power_value(mu, t.mu_exponent);
                if (t.kind == TermKind::log) v *= std::log(mu);
                s += v;
            }
        return s;
    }
};

// log(-u^m) - m log(u), principal branches
inline cplx branch_shift(cplx u, double m) { return std::log(-mu_power_value(u, m)) - m * std::log(u); }

inline TraceExpansion trace_expansion_full(const Symbol& a, const Symbol& f, int m, int k, int J,
                                           const SectorSpec& sector, const QuadratureSpec& spec = {}) {
    if (a.parametric() || f.parametric()) throw SymbolError("trace expansion takes classical a and f");
    if (!a.backend->same_as(*f.backend)) throw BackendMismatch("a and f live on different backends");
    if (!(a.twist == f.twist)) throw SymbolError("a and f carry different twists");
    if (k < 1 || J < 1) throw Error("need k >= 1 and J >= 1");
    sector.validate();
    spec.validate();
    const int n = f.backend->dim();
    if (!(-k * m + a.order < -n))
        throw DomainError("need -k m + ord(a) < -n; got " + format_double(-k * m + a.order) + " >= " +
                          std::to_string(-n));
    auto ell = ellipticity_check(f, m, sector);
    if (!ell.pass) throw SymbolError("f is not elliptic with parameter on the sector: " + ell.failure);

    auto g = parametrix(f, m, J, sector);
    auto G = resolvent_power_symbol(g, k, J);
    Symbol ap = a;
    while (ap.truncation() < J)
        ap.components.push_back({a.order - ap.truncation(), zero_expr(a.backend), Extension::global, Interior::formula});
    auto A = sharp_compose(ap, G, J);

    TraceExpansion out;
    out.n = n;
    out.m = m;
    out.k = k;
    out.order_a = a.order;
    out.J = J;
    out.sector = sector;
    out.quadrature = spec;
    const cplx u = std::polar(1.0, sector.center());
    out.unit = u;

    const double e_min = a.order - k * m - (J - 1) + n;
    std::map<double, cplx> logs;
    std::map<double, std::pair<cplx, std::string>> consts;
    for (int j = 0; j < J; ++j) {
        const auto& c = A[j];
        TraceTerm t;
        t.kind = TermKind::power;
        t.index = j;
        t.mu_exponent = c.degree + n;
        if (c.expr.is_zero()) {
            t.exact = true;
            t.provenance = "zero component";
        } else if (c.extension == Extension::global) {
            t.mu_value = coeff_power(c, u, spec).c;
            t.exact = true;
            t.provenance = "full-space integral at unit mu, exact by scaling";
        } else {
            const double lead = mu_ladder(c.expr, 1).first;
            const int M = static_cast<int>(std::floor(std::max(lead - c.degree - n, lead - e_min))) + 1;
            auto r = coeff_log_const(c, M, u, spec);
            t.mu_value = *r.c;
            t.provenance = "outer + annulus + ball remainder regions";
            if (r.c_log != cplx{}) logs[r.exponent] += r.c_log;
            for (const auto& p : r.constants) {
                if (p.value == cplx{} || p.exponent < e_min - 1e-9) continue;
                auto& slot = consts[p.exponent];
                slot.first += p.value;
                if (slot.second.find(p.provenance) == std::string::npos)
                    slot.second += (slot.second.empty() ? "" : "; ") + p.provenance;
            }
        }
        out.terms.push_back(t);
    }
    for (const auto& [e, v] : logs)
        out.terms.push_back({TermKind::log, 0.0, e, 0.0, v, {}, false, "annulus sphere integral"});
    for (const auto& [e, v] : consts)
        out.terms.push_back({TermKind::constant, 0.0, e, 0.0, v.first, {}, false, v.second});

    // change of variable to w = -lambda = -mu^m
    const cplx phi = branch_shift(u, m);
    const double lo = sector.arg_min + 1e-9 * (sector.arg_max - sector.arg_min);
    const double hi = sector.arg_max - 1e-9 * (sector.arg_max - sector.arg_min);
    out.lambda_valid = std::abs(branch_shift(std::polar(1.0, lo), m) - phi) < 1e-9 &&
                       std::abs(branch_shift(std::polar(1.0, hi), m) - phi) < 1e-9;
    for (auto& t : out.terms) {
        const double s = t.mu_exponent / m;
        t.lambda_exponent = s;
        if (t.kind != TermKind::power) t.index = -k - s;
        const cplx scale = std::exp(-s * phi);
        t.lambda_value = t.kind == TermKind::log ? scale * t.mu_value / static_cast<double>(m) : scale * t.mu_value;
    }
    // mu^e log mu = w^{e/m} e^{-s phi} (log w - phi)/m: the -phi/m part lands on the non-log term
    for (const auto& [e, v] : logs) {
        const cplx extra = -std::exp(-(e / m) * phi) * v * phi / static_cast<double>(m);
        auto it = std::find_if(out.terms.begin(), out.terms.end(), [&](const TraceTerm& t) {
            return t.kind == TermKind::constant && std::abs(t.mu_exponent - e) < 1e-9;
        });
        if (it == out.terms.end()) {
            out.terms.push_back({TermKind::constant, -k - e / m, e, e / m, {}, {}, false, "branch shift of the log term"});
            it = std::prev(out.terms.end());
        }
        it->lambda_value += extra;
    }
    return out;
}

// ---------------------------------------------------------------- fits against the oracle

struct FitSample {
    cplx mu;
    cplx oracle;
    std::vector<cplx> partial;   // partial[t]: first t exponent groups
    std::vector<cplx> residual;  // oracle - partial[t]
};

struct FitLine {
    std::size_t subtracted = 0;
    double angle = 0.0;
    double slope = 0.0;
    double next_exponent = std::nan("");
    double predicted = std::nan("");  // fitted slope of the first omitted group on the same grid
    double deviation = std::nan("");
};

struct FitReport {
    std::vector<FitSample> samples;
    std::vector<FitLine> lines;

    bool within(double tol) const {
        for (const auto& l : lines)
            if (std::isfinite(l.predicted) && !(l.deviation <= tol)) return false;
        return true;
    }
};

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// Residual slopes after subtracting 0..max_groups exponent groups, per ray angle.
inline FitReport expansion_fit(const TraceExpansion& e, const std::function<cplx(cplx)>& oracle,
                               const std::vector<double>& angles, const std::vector<double>& radii,
                               std::size_t max_groups) {
    FitReport rep;
    const auto ex = e.exponents();
    std::vector<cplx> mus;
    for (double a : angles)
        for (double r : radii) mus.push_back(std::polar(r, a));
    std::vector<cplx> vals(mus.size());
    parallel_for(mus.size(), [&](std::size_t i) { vals[i] = oracle(mus[i]); });
    for (std::size_t i = 0; i < mus.size(); ++i) {
        FitSample s{mus[i], vals[i], {}, {}};
        for (std::size_t t = 0; t <= max_groups; ++t) {
            s.partial.push_back(e.partial_sum(mus[i], t));
            s.residual.push_back(vals[i] - s.partial.back());
        }
        rep.samples.push_back(std::move(s));
    }
    if (radii.size() < 2) return rep;
    for (std::size_t ai = 0; ai < angles.size(); ++ai)
        for (std::size_t t = 0; t <= max_groups; ++t) {
            std::vector<double> x, y;
            for (std::size_t ri = 0; ri < radii.size(); ++ri) {
                const auto& s = rep.samples[ai * radii.size() + ri];
                x.push_back(std::log(radii[ri]));
                y.push_back(std::log(std::abs(s.residual[t])));
            }
            FitLine l;
            l.subtracted = t;
            l.angle = angles[ai];
            l.slope = loglog_slope(x, y);
            if (t < ex.size()) {
                // slope of the first omitted group itself; equals its exponent unless it carries a log
                std::vector<double> g;
                for (double r : radii) {
                    const cplx mu = std::polar(r, angles[ai]);
                    g.push_back(std::log(std::abs(e.partial_sum(mu, t + 1) - e.partial_sum(mu, t))));
                }
                l.next_exponent = ex[t];
                l.predicted = loglog_slope(x, g);
                l.deviation = std::abs(l.slope - l.predicted);
            }
            rep.lines.push_back(l);
        }
    return rep;
}

inline std::function<cplx(cplx)> symbol_oracle(const Symbol& s, const QuadratureSpec& spec = {}) {
    return [s, spec](cplx mu) { return trace_quadrature_oracle(s, mu, spec); };
}

// ---------------------------------------------------------------- output

inline nlohmann::json complex_json(cplx z) { return nlohmann::json::array({z.real(), z.imag()}); }

inline nlohmann::json to_json(const TraceExpansion& e) {
    nlohmann::json j;
    j["n"] = e.n;
    j["m"] = e.m;
    j["k"] = e.k;
    j["order_a"] = e.order_a;
    j["J"] = e.J;
    j["sector"] = {{"arg_min", e.sector.arg_min}, {"arg_max", e.sector.arg_max}};
    j["quadrature"] = {{"rel_tol", e.quadrature.rel_tol}, {"circle_points", e.quadrature.circle_points}};
    j["unit_mu"] = complex_json(e.unit);
    j["lambda_variable"] = "-lambda";
    j["lambda_valid"] = e.lambda_valid;
    j["terms"] = nlohmann::json::array();
    for (const auto& t : e.terms)
        j["terms"].push_back({{"kind", to_string(t.kind)},
                              {"index", t.index},
                              {"mu_exponent", t.mu_exponent},
                              {"mu_value", complex_json(t.mu_value)},
                              {"lambda_exponent", t.lambda_exponent},
                              {"lambda_value", complex_json(t.lambda_value)},
                              {"exact", t.exact},
                              {"provenance", t.provenance}});
    return j;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline std::string to_csv(const TraceExpansion& e) {
    std::ostringstream os;
    os << "kind,index,mu_exponent,mu_real,mu_imag,lambda_exponent,lambda_real,lambda_imag,exact,provenance\n";
    for (const auto& t : e.terms)
        os << to_string(t.kind) << ',' << format_double(t.index) << ',' << format_double(t.mu_exponent) << ','
           << format_double(t.mu_value.real()) << ',' << format_double(t.mu_value.imag()) << ','
           << format_double(t.lambda_exponent) << ',' << format_double(t.lambda_value.real()) << ','
           << format_double(t.lambda_value.imag()) << ',' << (t.exact ? "true" : "false") << ','
           << csv_field(t.provenance) << '\n';
    return os.str();
}

inline std::string to_csv(const FitReport& r) {
    std::ostringstream os;
    os << "mu_real,mu_imag,oracle_real,oracle_imag,subtracted,partial_real,partial_imag,residual_real,residual_imag\n";
    for (const auto& s : r.samples)
        for (std::size_t t = 0; t < s.partial.size(); ++t)
            os << format_double(s.mu.real()) << ',' << format_double(s.mu.imag()) << ','
               << format_double(s.oracle.real()) << ',' << format_double(s.oracle.imag()) << ',' << t << ','
               << format_double(s.partial[t].real()) << ',' << format_double(s.partial[t].imag()) << ','
               << format_double(s.residual[t].real()) << ',' << format_double(s.residual[t].imag()) << '\n';
    return os.str();
}

inline std::string fit_lines_csv(const FitReport& r) {
    std::ostringstream os;
    os << "angle,subtracted,slope,next_exponent,predicted,deviation\n";
    for (const auto& l : r.lines)
        os << format_double(l.angle) << ',' << l.subtracted << ',' << format_double(l.slope) << ','
           << format_double(l.next_exponent) << ',' << format_double(l.predicted) << ',' << format_double(l.deviation)
           << '\n';
    return os.str();
}

}  // namespace tpsido
