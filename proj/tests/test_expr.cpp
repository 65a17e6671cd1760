#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <thread>

#include "twisted_psido/expr.hpp"
#include "twisted_psido/expr_io.hpp"

using namespace tpsido;

namespace {

BackendPtr mat2d() {
    return Backend::matrix({(Eigen::VectorXd(3) << 0.0, 1.0, -0.5).finished(),
                            (Eigen::VectorXd(3) << 2.0, 0.0, 1.0).finished()});
}

AlgebraElement random_matrix(const BackendPtr& b, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g;
    Eigen::MatrixXcd d(b->size(), b->size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = scale * cplx{g(rng), g(rng)};
    return {b, d};
}

// Random DAG over the matrix backend; inverses are shifted to stay well away from singular.
Expr random_expr(const BackendPtr& b, std::mt19937_64& rng, int depth) {
    std::uniform_int_distribution<int> pick(0, 9);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    const int c = pick(rng);
    if (depth == 0 || c < 3) {
        switch (pick(rng) % 6) {
            case 0: return coef(random_matrix(b, rng));
            case 1: return xi(b, 0);
            case 2: return xi(b, 1, 2);
            case 3: return abs_xi(b, (pick(rng) % 2) ? -1.0 : 1.0);
            case 4: return mu_pow(b, 1.0);
            default: return prod({coef(random_matrix(b, rng)), xi(b, pick(rng) % 2)});
        }
    }
    Expr x = random_expr(b, rng, depth - 1);
    if (c < 6) return x + random_expr(b, rng, depth - 1);
    if (c < 9) return x * random_expr(b, rng, depth - 1);
    const double d = x.degree().value_or(0.0);
    return inv(x + prod({scalar(b, 6.0 * u(rng)), mu_pow(b, d)}));
}

struct Sample {
    std::vector<double> xi;
    cplx mu;
};

Sample random_sample(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> r(0.6, 1.8), ang(0.0, 2 * M_PI), th(M_PI / 4, 3 * M_PI / 4);
    const double rr = r(rng), a = ang(rng);
    return {{rr * std::cos(a), rr * std::sin(a)}, std::polar(r(rng), th(rng))};
}

double norm_at(const Expr& e, const Sample& s) { return alg_norm(expr_eval(e, s.xi, s.mu)); }

}  // namespace

TEST_CASE("evaluation examples", "[expr]") {
    auto b = Backend::scalar();
    CHECK(alg_trace_psi(expr_eval(xi(b, 0, 2), {3.0}, 0.0)) == cplx{9.0, 0.0});
    Expr g = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
    CHECK(std::abs(alg_trace_psi(expr_eval(g, {1.0}, I)) - 0.5) < 1e-15);

    auto m = mat2d();
    std::mt19937_64 rng(1);
    auto a = random_matrix(m, rng);
    auto val = expr_eval(prod({coef(a), xi(m, 0)}), {2.0, 0.0}, 1.0);
    CHECK((val - 2.0 * a).is_zero());
    CHECK_THROWS_AS(expr_eval(abs_xi(b, -1.0), {0.0}, 1.0), DomainError);
}

TEST_CASE("structural simplification and degrees", "[expr]") {
    auto b = mat2d();
    Expr e = xi(b, 0) * mu_pow(b, 1.0);
    CHECK(sum({e, zero_expr(b)}) == e);
    CHECK(prod({one_expr(b), e, one_expr(b)}) == e);
    CHECK(expr_simplify(e) == e);
    Expr g = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
    REQUIRE(expr_degree(g).has_value());
    CHECK(*expr_degree(g) == -2.0);
    CHECK(!expr_degree(xi(b, 0) + one_expr(b)).has_value());
    CHECK(e + e == 2.0 * e);
    CHECK((e - e).is_zero());
    // noncommutative order is kept
    std::mt19937_64 rng(5);
    auto p = coef(random_matrix(b, rng)), q = coef(random_matrix(b, rng));
    Expr pq = p * inv(xi(b, 0) + p) * q;
    Expr qp = q * inv(xi(b, 0) + p) * p;
    CHECK(!(pq == qp));
}

TEST_CASE("xi derivatives", "[expr]") {
    auto b = Backend::scalar();
    CHECK(expr_dxi(xi(b, 0, 2), 0) == 2.0 * xi(b, 0));
    Expr g = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
    Expr dg = expr_dxi(g, 0);
    CHECK(dg == prod({scalar(b, -1.0), g, 2.0 * xi(b, 0), g}));
    const double h = 1e-4;
    const cplx fd = (alg_trace_psi(expr_eval(g, {1.0 + h}, I)) - alg_trace_psi(expr_eval(g, {1.0 - h}, I))) / (2 * h);
    const cplx ex = alg_trace_psi(expr_eval(dg, {1.0}, I));
    CHECK(std::abs(fd - ex) <= 1e-5 * std::abs(ex));

    auto b2 = Backend::scalar(2);
    CHECK(expr_dxi(abs_xi(b2, -1.0), 0) == prod({scalar(b2, -1.0), xi(b2, 0), abs_xi(b2, -3.0)}));
    CHECK(expr_dxi(mu_pow(b2, 2.0), 1).is_zero());
}

TEST_CASE("derivatives match central differences on random DAGs", "[expr][property]") {
    auto b = mat2d();
    std::mt19937_64 rng(99);
    const double h = 1e-4;
    int checked = 0;
    for (int rep = 0; rep < 60; ++rep) {
        Expr e = random_expr(b, rng, 5);
        for (int j = 0; j < 2; ++j) {
            Expr d = expr_dxi(e, j);
            for (int k = 0; k < 3; ++k) {
                Sample s = random_sample(rng);
                auto plus = s.xi, minus = s.xi;
                plus[static_cast<std::size_t>(j)] += h;
                minus[static_cast<std::size_t>(j)] -= h;
                try {
                    auto fd = (1.0 / (2 * h)) * (expr_eval(e, plus, s.mu) - expr_eval(e, minus, s.mu));
                    auto ex = expr_eval(d, s.xi, s.mu);
                    const double scale = alg_norm(ex);
                    if (scale < 1e-6 * std::max(1.0, norm_at(e, s))) continue;
                    CHECK(alg_norm(fd - ex) <= 1e-5 * scale);
                    ++checked;
                } catch (const SingularElement&) {
                }
            }
        }
    }
    CHECK(checked > 150);
}

TEST_CASE("derivation rules", "[expr]") {
    auto s = Backend::scalar(2);
    CHECK(expr_delta(inv(xi(s, 0, 2) - mu_pow(s, 2.0)) * xi(s, 1), 0).is_zero());

    auto b = mat2d();
    std::mt19937_64 rng(4);
    auto a = random_matrix(b, rng);
    CHECK(expr_delta(coef(a) * xi(b, 0), 0) == coef(alg_delta(a, {1, 0})) * xi(b, 0));

    // delta_1 (a - mu)^{-1} against the action: (alpha_t(f) - f)/(i t)
    Expr f = inv(coef(a) - mu_pow(b, 1.0) * scalar(b, 3.0));
    Expr df = expr_delta(f, 0);
    const std::vector<double> x{0.3, 0.2};
    const cplx mu = std::polar(1.3, 2.0);
    for (double t : {1e-4, 1e-5}) {
        auto fd = (1.0 / (2.0 * I * t)) * (alg_alpha(expr_eval(f, x, mu), {t, 0.0}) - alg_alpha(expr_eval(f, x, mu), {-t, 0.0}));
        CHECK(alg_norm(fd - expr_eval(df, x, mu)) <= 1e-6 * alg_norm(expr_eval(df, x, mu)));
    }
}

TEST_CASE("delta Leibniz and mixed commutation", "[expr][property]") {
    auto b = mat2d();
    std::mt19937_64 rng(17);
    for (int rep = 0; rep < 30; ++rep) {
        Expr p = random_expr(b, rng, 3), q = random_expr(b, rng, 3);
        Sample s = random_sample(rng);
        try {
            for (int j = 0; j < 2; ++j) {
                auto lhs = expr_eval(expr_delta(p * q, j), s.xi, s.mu);
                auto rhs = expr_eval(expr_delta(p, j) * q + p * expr_delta(q, j), s.xi, s.mu);
                CHECK(alg_norm(lhs - rhs) <= 1e-12 * std::max(1.0, alg_norm(lhs)));
                for (int k = 0; k < 2; ++k) {
                    auto x1 = expr_eval(expr_dxi(expr_delta(p, j), k), s.xi, s.mu);
                    auto x2 = expr_eval(expr_delta(expr_dxi(p, k), j), s.xi, s.mu);
                    CHECK(alg_norm(x1 - x2) <= 1e-12 * std::max(1.0, alg_norm(x1)));
                }
            }
        } catch (const SingularElement&) {
        }
    }
}

TEST_CASE("homogeneity scaling", "[expr][property]") {
    auto b = mat2d();
    std::mt19937_64 rng(23);
    int tagged = 0;
    for (int rep = 0; rep < 80 && tagged < 25; ++rep) {
        Expr e = random_expr(b, rng, 4);
        if (!e.degree()) continue;
        ++tagged;
        const double d = *e.degree();
        for (int k = 0; k < 10; ++k) {
            Sample smp = random_sample(rng);
            try {
                auto base = expr_eval(e, smp.xi, smp.mu);
                for (double s : {0.5, 2.0, 7.0}) {
                    std::vector<double> sx{s * smp.xi[0], s * smp.xi[1]};
                    auto scaled = expr_eval(e, sx, s * smp.mu);
                    CHECK(alg_norm(scaled - std::pow(s, d) * base) <= 1e-10 * alg_norm(base) * std::pow(s, d));
                }
            } catch (const SingularElement&) {
            }
        }
    }
    CHECK(tagged >= 10);
}

TEST_CASE("twisted derivatives", "[expr]") {
    Eigen::MatrixXd B(2, 2);
    const double beta = 0.8;
    B << 0.0, beta, -beta, 0.0;
    TwistMatrix tw(B);
    auto s = Backend::scalar(2);
    CHECK(expr_dB(xi(s, 1), {1, 0}, tw) == scalar(s, -beta));
    CHECK(expr_dB(xi(s, 0), {0, 1}, tw) == scalar(s, beta));
    CHECK(expr_dB(xi(s, 0, 3), {1, 1}, TwistMatrix(2)).is_zero());
    Expr e = inv(xi(s, 0, 2) + xi(s, 1, 2) - mu_pow(s, 2.0));
    CHECK(expr_twisted(e, {0, 0}, tw) == e);
    CHECK(expr_twisted(e, {1, 0}, TwistMatrix(2)).is_zero());
    CHECK_THROWS_AS(TwistMatrix((Eigen::MatrixXd(2, 2) << 0.0, 1.0, 1.0, 0.0).finished()), Error);
}

// f^{B,alpha} equals d_x^alpha at x = 0 of alpha_{+x}(f(xi + Bx)) (see notes on the sign of the action).
TEST_CASE("twisted derivative against finite differences in x", "[expr]") {
    auto b = mat2d();
    Eigen::MatrixXd B(2, 2);
    B << 0.0, 0.6, -0.6, 0.0;
    TwistMatrix tw(B);
    std::mt19937_64 rng(31);
    auto a = random_matrix(b, rng), c = random_matrix(b, rng);
    Expr f = coef(a) * inv(xi(b, 0, 2) + xi(b, 1, 2) * coef(c) * coef(alg_adjoint(c)) - mu_pow(b, 2.0) * scalar(b, 2.0)) *
             xi(b, 1);
    const std::vector<double> x0{0.7, -0.4};
    const cplx mu = std::polar(1.1, 1.7);
    auto shifted = [&](const std::vector<double>& x) {
        std::vector<double> q{x0[0] + B(0, 0) * x[0] + B(0, 1) * x[1], x0[1] + B(1, 0) * x[0] + B(1, 1) * x[1]};
        return alg_alpha(expr_eval(f, q, mu), x);
    };
    const double h = 1e-4;
    for (int j = 0; j < 2; ++j) {
        std::vector<double> p(2, 0.0), m(2, 0.0);
        p[static_cast<std::size_t>(j)] = h;
        m[static_cast<std::size_t>(j)] = -h;
        auto fd = (1.0 / (2 * h)) * (shifted(p) - shifted(m));
        auto ex = expr_eval(expr_twisted(f, unit_index(2, j), tw), x0, mu);
        CHECK(alg_norm(fd - ex) <= 1e-6 * alg_norm(ex));
        // |alpha| = 1 closed form: i delta f + d_B f
        Expr closed = I * expr_delta(f, j) + expr_dB(f, j, tw);
        CHECK(alg_norm(expr_eval(closed, x0, mu) - ex) <= 1e-12 * alg_norm(ex));
    }
    // mixed second order
    const double k = 1e-3;
    auto at = [&](double u, double v) { return shifted({u, v}); };
    auto fd2 = (1.0 / (4 * k * k)) * (at(k, k) - at(k, -k) - at(-k, k) + at(-k, -k));
    auto ex2 = expr_eval(expr_twisted(f, {1, 1}, tw), x0, mu);
    CHECK(alg_norm(fd2 - ex2) <= 1e-4 * alg_norm(ex2));
}

TEST_CASE("large-mu expansion examples", "[expr]") {
    auto b = Backend::scalar();
    auto t = expr_mu_expand(mu_pow(b, -2.0), 3);
    REQUIRE(t.size() == 1);
    CHECK(t[0].exponent == -2.0);
    CHECK(t[0].coefficient.is_one());

    Expr g = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
    auto s = expr_mu_expand(g, 3);
    REQUIRE(s.size() == 3);
    CHECK(s[0].exponent == -2.0);
    CHECK(s[0].coefficient == scalar(b, -1.0));
    CHECK(s[1].exponent == -4.0);
    CHECK(s[1].coefficient == -xi(b, 0, 2));
    CHECK(s[2].exponent == -6.0);
    CHECK(s[2].coefficient == -xi(b, 0, 4));

    auto m = Backend::matrix({(Eigen::VectorXd(2) << 0.0, 1.0).finished()});
    Eigen::MatrixXcd vd(2, 2);
    vd << 1.0, 0.5, 0.25, 2.0;
    Expr v = coef(AlgebraElement(m, vd));
    Expr gm = inv(xi(m, 0, 2) - mu_pow(m, 2.0));
    auto lead = expr_mu_expand(v * gm * gm, 1);
    REQUIRE(lead.size() == 1);
    CHECK(lead[0].exponent == -4.0);
    CHECK(lead[0].coefficient == v);

    CHECK_THROWS_AS(expr_mu_expand(inv(xi(b, 0) - mu_pow(b, 0.5) - mu_pow(b, 1.0)), 3), ExpansionError);
}

TEST_CASE("mu expansion residual slopes", "[expr][property]") {
    auto m = mat2d();
    std::mt19937_64 rng(8);
    auto v = random_matrix(m, rng, 0.3), w = random_matrix(m, rng);
    std::vector<Expr> cases{
        inv(xi(m, 0) + coef(v) - mu_pow(m, 1.0)),
        coef(w) * inv(xi(m, 0) * xi(m, 1) + coef(v) * xi(m, 1) - mu_pow(m, 1.0)) * inv(xi(m, 1) + coef(v) - mu_pow(m, 1.0)),
        inv(xi(m, 0, 2) + coef(v) * mu_pow(m, 1.0) - mu_pow(m, 2.0) + xi(m, 1) * coef(w)),
    };
    const std::vector<double> x{0.9, -0.7};
    const double theta = 1.9;
    for (const auto& e : cases) {
        for (std::size_t M : {1u, 2u, 3u}) {
            auto [lead, q] = mu_ladder(e, M);
            std::vector<double> lr, lres;
            for (double R : {10.0, 20.0, 40.0, 80.0}) {
                const cplx mu = std::polar(R, theta);
                auto approx = AlgebraElement::zero(m);
                for (std::size_t nu = 0; nu < M; ++nu)
                    approx = approx + mu_power_value(mu, lead - static_cast<double>(nu)) * expr_eval(q[nu], x, 0.0);
                lr.push_back(std::log(R));
                lres.push_back(std::log(alg_norm(expr_eval(e, x, mu) - approx)));
            }
            const double slope = (lres.back() - lres.front()) / (lr.back() - lr.front());
            INFO("M = " << M << " lead = " << lead);
            CHECK(std::abs(slope - (lead - static_cast<double>(M))) <= 0.2);
        }
    }
}

TEST_CASE("printer round trip", "[expr][property]") {
    auto m = mat2d();
    SymbolTable names(m);
    std::mt19937_64 rng(41);
    names.define("v", random_matrix(m, rng));
    for (int rep = 0; rep < 40; ++rep) {
        Expr e = random_expr(m, rng, 4);
        if (rep % 3 == 0) e = e * coef(*names.find("v"));
        const std::string s = expr_to_string(e, &names);
        INFO(s);
        Expr back = parse_expr(s, names);
        CHECK(back == e);
        CHECK(expr_to_string(back, &names) == s);
    }

    Eigen::MatrixXd th(2, 2);
    th << 0.0, 0.5, -0.5, 0.0;
    auto t = Backend::nctorus(th, 2);
    Expr u = parse_expr("2*U1 - (0.5+i)*U(0,-1)*xi2 + inv(3 - U2*mu^-1)", t);
    CHECK(parse_expr(expr_to_string(u), t) == u);

    auto s1 = Backend::scalar(1);
    CHECK(parse_expr("inv(xi1^2 - mu^2)", s1) == inv(xi(s1, 0, 2) - mu_pow(s1, 2.0)));
    CHECK(expr_to_string(parse_expr("inv(xi1^2 - mu^2)", s1)) == "inv((xi1^2 - mu^2))");
    CHECK(parse_expr("absxi^-1", s1) == abs_xi(s1, -1.0));
    CHECK(parse_expr("dxi1(xi1^3)", s1) == 3.0 * xi(s1, 0, 2));
    CHECK_THROWS_AS(parse_expr("xi3", s1), ConfigError);
    CHECK_THROWS_AS(parse_expr("inv(xi1", s1), ConfigError);
}

TEST_CASE("expressions are shareable across threads", "[expr]") {
    auto b = Backend::scalar();
    const Expr keep = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
    std::vector<std::thread> pool;
    std::vector<int> same(4, 0);
    for (int t = 0; t < 4; ++t)
        pool.emplace_back([&, t] {
            for (int r = 0; r < 200; ++r) {
                Expr e = inv(xi(b, 0, 2) - mu_pow(b, 2.0));
                same[static_cast<std::size_t>(t)] += (e == keep);
                (void)expr_dxi(e, 0);
            }
        });
    for (auto& th : pool) th.join();
    for (int v : same) CHECK(v == 200);
}
