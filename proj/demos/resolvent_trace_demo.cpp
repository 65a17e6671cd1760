// Trace expansion of a shifted matrix resolvent, compared with direct quadrature.
#include <cstdio>

#include "twisted_psido/trace_asym.hpp"

using namespace tpsido;

int main() {
    auto b = Backend::matrix({(Eigen::VectorXd(3) << 0.0, 1.0, 2.5).finished()});
    Eigen::MatrixXcd vm(3, 3);
    vm << 1.0, 0.3, 0.0, 0.3, 2.0, 0.2, 0.0, 0.2, 0.5;
    const AlgebraElement v(b, vm);

    // f = xi^2 + v, amplitude 1
    auto f = make_symbol({component(2, xi(b, 0, 2)), component(1, zero_expr(b)), component(0, coef(v))}, 2, 6,
                         TwistMatrix(1), b);
    auto a = make_symbol({component(0, one_expr(b))}, 0, 6, TwistMatrix(1), b);
    QuadratureSpec q;
    q.rel_tol = 1e-12;
    const SectorSpec sector;
    auto e = trace_expansion_full(a, f, 2, 1, 6, sector, q);

    std::printf("%-6s %12s %24s\n", "kind", "(-lambda)^s", "coefficient");
    for (const auto& t : e.terms)
        if (t.mu_value != cplx{})
            std::printf("%-6s %12.3f %24.15f\n", to_string(t.kind).c_str(), t.lambda_exponent, t.lambda_value.real());

    // the pointwise inverse is the exact symbol of the resolvent when v is constant in x
    Expr exact = inv(xi(b, 0, 2) + coef(v) - mu_pow(b, 2));
    std::printf("\n%8s %24s %14s %14s\n", "|mu|", "trace", "err 1 term", "err 3 terms");
    for (double r : {5.0, 10.0, 20.0, 40.0, 80.0}) {
        const cplx mu = std::polar(r, sector.center());
        const cplx tr = trace_quadrature_oracle(exact, mu, q);
        std::printf("%8.1f %24.15f %14.3e %14.3e\n", r, tr.real(), std::abs(tr - e.partial_sum(mu, 1)),
                    std::abs(tr - e.partial_sum(mu, 3)));
    }
}
