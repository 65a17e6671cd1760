// One line per acceptance criterion; exits nonzero if any fails.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "twisted_psido/bounded.hpp"
#include "twisted_psido/calculus.hpp"
#include "twisted_psido/trace_asym.hpp"

using namespace tpsido;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

double rel(cplx got, cplx want) { return std::abs(got - want) / std::abs(want); }

std::string num(double x) {
    std::ostringstream os;
    os.precision(6);
    os << x;
    return os.str();
}

const TraceTerm* power_at(const TraceExpansion& e, double exponent) {
    for (const auto* t : e.of_kind(TermKind::power))
        if (std::abs(t->mu_exponent - exponent) < 1e-12) return t;
    return nullptr;
}

Expr resolvent(const BackendPtr& b) { return inv(xi(b, 0, 2) - mu_pow(b, 2)); }

// ---------------------------------------------------------------- shifted 6 x 6 case

BackendPtr matrix6() { return Backend::matrix({(Eigen::VectorXd(6) << 0.0, 1.0, 2.5, -0.5, 1.7, 3.1).finished()}); }

// real symmetric, positive, tridiagonal: does not commute with the diagonal generator
AlgebraElement shift6(const BackendPtr& b) {
    const double d[6] = {1.0, 2.0, 0.5, 1.5, 3.0, 0.8};
    Eigen::MatrixXcd v = Eigen::MatrixXcd::Zero(6, 6);
    for (int i = 0; i < 6; ++i) {
        v(i, i) = d[i];
        if (i + 1 < 6) v(i, i + 1) = v(i + 1, i) = 0.3 - 0.05 * i;
    }
    return {b, v};
}

// (1/2) binom(-1/2, p) psi(v^p) from the eigenvalues of v: coefficient of (-lambda)^{-1/2-p}
// in (1/2) psi((v - mu^2)^{-1/2})
cplx closed_form_coefficient(const AlgebraElement& v, int p) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(v.data());
    double b = 1.0;
    for (int i = 0; i < p; ++i) b *= (-0.5 - i) / (i + 1);
    double mean = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) mean += std::pow(es.eigenvalues()(i), p);
    return 0.5 * b * mean / static_cast<double>(es.eigenvalues().size());
}

struct Shifted {
    BackendPtr b = matrix6();
    AlgebraElement v = shift6(b);
    QuadratureSpec q = [] {
        QuadratureSpec s;
        s.rel_tol = 1e-12;
        return s;
    }();
    TraceExpansion expansion() const {
        auto f = make_symbol({component(2, xi(b, 0, 2)), component(1, zero_expr(b)), component(0, coef(v))}, 2, 6,
                             TwistMatrix(1), b);
        auto a = make_symbol({component(0, one_expr(b))}, 0, 6, TwistMatrix(1), b);
        return trace_expansion_full(a, f, 2, 1, 6, SectorSpec{}, q);
    }
};

// ---------------------------------------------------------------- twisted n = 2 symbols

BackendPtr mat3() {
    return Backend::matrix({(Eigen::VectorXd(3) << 0.0, 1.0, -0.7).finished(),
                            (Eigen::VectorXd(3) << 0.5, -1.0, 1.5).finished()});
}

TwistMatrix twist(double b) {
    Eigen::MatrixXd B(2, 2);
    B << 0.0, b, -b, 0.0;
    return TwistMatrix(B);
}

AlgebraElement random_matrix(const BackendPtr& b, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> g;
    Eigen::MatrixXcd d(b->size(), b->size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = scale * cplx{g(rng), g(rng)};
    return {b, d};
}

Symbol random_symbol(const BackendPtr& b, std::mt19937_64& rng, int m, int N, const TwistMatrix& B) {
    std::vector<HomComponent> comps;
    for (int j = 0; j < N; ++j) {
        const int d = m - j;
        Expr e = zero_expr(b);
        if (d >= 0)
            for (const auto& beta : multi_indices_of_order(2, d)) e = e + coef(random_matrix(b, rng, 0.5)) * xi_monomial(b, beta);
        else
            e = coef(random_matrix(b, rng, 0.5)) * abs_xi(b, d);
        comps.push_back(component(d, e));
    }
    return make_symbol(comps, m, N, B, b);
}

struct Sample {
    std::vector<double> xi;
    cplx mu;
};

Sample random_sample(std::mt19937_64& rng, const SectorSpec& s) {
    std::uniform_real_distribution<double> r(0.5, 2.0), ang(0.0, 2 * std::numbers::pi), th(s.arg_min, s.arg_max);
    const double rr = r(rng), a = ang(rng);
    return {{rr * std::cos(a), rr * std::sin(a)}, std::polar(r(rng), th(rng))};
}

// ---------------------------------------------------------------- criteria

Outcome free_resolvent() {
    auto b = Backend::scalar(1);
    auto f = make_symbol({component(2, xi(b, 0, 2))}, 2, 2, TwistMatrix(1), b);
    auto a = make_symbol({component(0, one_expr(b))}, 0, 2, TwistMatrix(1), b);
    auto e = trace_expansion_full(a, f, 2, 1, 2, SectorSpec{});
    int nonzero = 0;
    for (const auto& t : e.terms) nonzero += t.mu_value != cplx{};
    const auto* t = power_at(e, -1.0);
    if (!t) return {false, "no term at mu^-1"};
    // the coefficient at unit u against the integral itself
    const cplx u = std::polar(1.0, e.sector.center());
    const double err = std::max(rel(t->mu_value / u, trace_quadrature_oracle(resolvent(b), u)), rel(t->lambda_value, 0.5));
    return {nonzero == 1 && t->lambda_exponent == -0.5 && err <= 1e-8,
            "nonzero terms " + std::to_string(nonzero) + ", (-lambda)^" + num(t->lambda_exponent) + " coefficient " +
                num(t->lambda_value.real()) + ", rel err " + num(err)};
}

Outcome shifted_resolvent() {
    Shifted s;
    auto e = s.expansion();
    double worst = 0.0;
    std::string vals;
    for (int p = 0; p < 3; ++p) {
        const auto* t = power_at(e, -1.0 - 2 * p);
        if (!t) return {false, "missing mu-exponent " + num(-1.0 - 2 * p)};
        worst = std::max(worst, rel(t->lambda_value, closed_form_coefficient(s.v, p)));
        vals += (p ? ", " : "") + num(t->lambda_value.real());
    }
    return {worst <= 1e-6, "N = 6, coefficients " + vals + ", max rel err " + num(worst)};
}

Outcome parametrix_identity() {
    auto b = mat3();
    std::mt19937_64 rng(101);
    SectorSpec sec;
    const int N = 4;
    Expr lap = xi(b, 0, 2) + xi(b, 1, 2);
    auto h = random_matrix(b, rng, 0.15);
    Expr top = lap + coef(0.5 * (h + alg_adjoint(h))) * xi(b, 0) * xi(b, 1);
    Expr mid = coef(random_matrix(b, rng, 0.5)) * xi(b, 0) + coef(random_matrix(b, rng, 0.5)) * xi(b, 1);
    Expr low = coef(random_matrix(b, rng, 0.5));
    auto f = make_symbol({component(2, top), component(1, mid), component(0, low)}, 2, N, twist(0.8), b);
    auto g = parametrix(f, 2, N, sec);
    auto id = sharp_compose(subtract_mu_power(f, 2), g, N);
    const auto one = AlgebraElement::identity(b);
    double lead = 0.0, below = 0.0;
    for (int k = 0; k < 20; ++k) {
        Sample s = random_sample(rng, sec);
        lead = std::max(lead, alg_norm(expr_eval(id.expr(0), s.xi, s.mu) - one));
        for (int j = 1; j < N; ++j) below = std::max(below, alg_norm(expr_eval(id.expr(j), s.xi, s.mu)));
    }
    return {lead <= 1e-8 && below <= 1e-8,
            "n = 2, 3x3 matrices, B = 0.8, N = 4: |degree 0 - 1| " + num(lead) + ", max lower " + num(below)};
}

Outcome twist_independence() {
    auto b = mat3();
    std::mt19937_64 rng(77);
    SectorSpec sec;
    auto f = random_symbol(b, rng, 2, 3, twist(0.9));
    auto g = random_symbol(b, rng, 1, 3, twist(0.9));
    auto f0 = f, g0 = g;
    f0.twist = TwistMatrix(2);
    g0.twist = TwistMatrix(2);
    auto h = sharp_compose(f, g, 3), h0 = sharp_compose(f0, g0, 3);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        Sample s = random_sample(rng, sec);
        for (int j = 0; j < 2; ++j) {
            const auto x = expr_eval(h.expr(j), s.xi, s.mu);
            worst = std::max(worst, alg_norm(x - expr_eval(h0.expr(j), s.xi, s.mu)) / std::max(1.0, alg_norm(x)));
        }
    }
    return {worst <= 1e-10, "max difference over j = 0, 1 " + num(worst)};
}

Outcome log_coefficient() {
    auto b = Backend::scalar(1);
    auto c = component(-1, abs_xi(b, -1));
    const double clog = coeff_log_const(c, 1, I).c_log.real();
    std::vector<double> x, y;
    for (int t = 2; t <= 5; ++t) {
        x.push_back(t);
        y.push_back(annulus_integral(c, std::polar(std::exp(t), 2.0)).real());
    }
    const double fitted = loglog_slope(x, y);
    const double want = 1.0 / std::numbers::pi;
    return {std::abs(clog - want) <= 1e-12 && std::abs(fitted - want) <= 1e-3,
            "coefficient " + num(clog) + ", annulus fit " + num(fitted) + " (1/pi = " + num(want) + ")"};
}

Outcome arg_independence() {
    Shifted s;
    SectorSpec sec;
    auto f = make_symbol({component(2, xi(s.b, 0, 2)), component(1, zero_expr(s.b)), component(0, coef(s.v))}, 2, 6,
                         TwistMatrix(1), s.b);
    auto g = parametrix(f, 2, 6, sec);
    double worst = 0.0;
    int used = 0;
    for (const auto& c : g.components) {
        if (c.expr.is_zero()) continue;
        std::vector<cplx> vals;
        for (int k = 0; k < 5; ++k) {
            const double a = sec.arg_min + (k + 0.5) * (sec.arg_max - sec.arg_min) / 5;
            vals.push_back(coeff_power(c, std::polar(1.0, a), s.q).c);
        }
        for (const auto& v : vals) worst = std::max(worst, rel(v, vals[0]));
        ++used;
    }
    return {used > 0 && worst <= 1e-6, std::to_string(used) + " components, 5 rays, max rel spread " + num(worst)};
}

Outcome oracle_fit() {
    Shifted s;
    auto e = s.expansion();
    Expr exact = inv(xi(s.b, 0, 2) + coef(s.v) - mu_pow(s.b, 2));
    std::vector<double> radii;
    for (int t = 0; t <= 4; ++t) radii.push_back(10.0 * std::pow(2.0, t));
    auto rep = expansion_fit(e, [&](cplx mu) { return trace_quadrature_oracle(exact, mu, s.q); }, {SectorSpec{}.center()},
                             radii, 2);
    if (rep.lines.size() < 3) return {false, "fit produced too few lines"};
    const double s1 = rep.lines[1].slope, s2 = rep.lines[2].slope;
    return {std::abs(s1 + 3.0) <= 0.2 && std::abs(s2 + 5.0) <= 0.2, "slopes " + num(s1) + ", " + num(s2)};
}

Outcome schur_dominance() {
    auto kg = kernel_grid(20.0, 2048, [](double x, double y) { return std::exp(-std::abs(x - y)); });
    auto sb = schur_bound(kg);
    const double m = discretized_opnorm(kg);
    auto b = Backend::scalar(1);
    Expr lorentz = inv(xi(b, 0, 2) + one_expr(b));
    double kerr = 0.0;
    for (double x : {-3.0, -0.5, 0.0, 1.0, 4.0})
        for (double y : {-2.0, 0.0, 0.25, 2.5})
            kerr = std::max(kerr, std::abs(kernel_from_symbol(lorentz, TwistMatrix(1), x, y).as_scalar().value() -
                                           0.5 * std::exp(-std::abs(x - y))));
    const bool in_window = m >= 1.99 && m <= 2.001;
    return {in_window && m <= sb.bound && std::abs(sb.bound - 8.0) <= 0.01 && kerr <= 1e-4,
            "opnorm " + num(m) + (in_window ? "" : " outside [1.99, 2.001]") + ", bound " + num(sb.bound) +
                ", kernel err " + num(kerr)};
}

Outcome property_suites() {
    std::string failed;
    for (const char* exe : {TEST_ALGEBRA, TEST_EXPR, TEST_CALCULUS, TEST_TRACE, TEST_BOUNDED}) {
        const std::string cmd = std::string(exe) + " \"[property]\" > /dev/null 2>&1";
        const int st = std::system(cmd.c_str());
        if (!(WIFEXITED(st) && WEXITSTATUS(st) == 0)) {
            std::string name(exe);
            failed += " " + name.substr(name.find_last_of('/') + 1);
        }
    }
    return {failed.empty(), failed.empty() ? "all [property] cases green" : "failing:" + failed};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        std::string name;
        double budget;  // seconds, 0 = none
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "free resolvent trace", 5.0, free_resolvent},
        {2, "shifted matrix resolvent", 30.0, shifted_resolvent},
        {3, "parametrix identity", 60.0, parametrix_identity},
        {4, "twist independence", 0.0, twist_independence},
        {5, "log coefficient", 0.0, log_coefficient},
        {6, "arg independence", 0.0, arg_independence},
        {7, "oracle fit", 0.0, oracle_fit},
        {8, "schur dominance", 0.0, schur_dominance},
        {9, "property suites", 0.0, property_suites},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget > 0 && secs >= c.budget) {
            o.pass = false;
            o.detail += ", over the time budget";
        }
        failures += !o.pass;
        std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
                  << " [" << num(secs) << " s]" << std::endl;
    }
    std::cout << (9 - failures) << "/9 criteria pass" << std::endl;
    return failures == 0 ? 0 : 1;
}
