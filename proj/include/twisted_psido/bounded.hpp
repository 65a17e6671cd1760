#pragma once

#include <boost/math/quadrature/ooura_fourier_integrals.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "twisted_psido/calculus.hpp"
#include "twisted_psido/expr_io.hpp"
#include "twisted_psido/parallel.hpp"
#include "twisted_psido/quadrature.hpp"

namespace tpsido {

// Samples of ||k(x_i, y_j)|| on the trapezoid grid of [-L, L], with Schur weights p, q.
struct KernelGrid {
    double L = 1.0;
    int G = 2;
    Eigen::MatrixXd norms;
    Eigen::VectorXd p, q;

    double node(int i) const { return -L + 2.0 * L * i / (G - 1); }
    Eigen::VectorXd weights() const {
        Eigen::VectorXd w = Eigen::VectorXd::Constant(G, 2.0 * L / (G - 1));
        w(0) *= 0.5;
        w(G - 1) *= 0.5;
        return w;
    }

    void validate() const {
        if (!(L > 0.0)) throw Error("kernel grid needs L > 0");
        if (G < 2) throw Error("kernel grid needs G >= 2");
        if (norms.rows() != G || norms.cols() != G || p.size() != G || q.size() != G)
            throw Error("kernel grid arrays do not match G");
        if (!norms.allFinite() || (norms.array() < 0.0).any()) throw Error("kernel norms must be finite and >= 0");
    }
};

using ScalarKernel = std::function<double(double, double)>;
using BlockKernel = std::function<Eigen::MatrixXcd(double, double)>;

inline KernelGrid kernel_grid(double L, int G, const ScalarKernel& k, const std::function<double(double)>& p = {},
                              const std::function<double(double)>& q = {}) {
    KernelGrid kg;
    kg.L = L;
    kg.G = G;
    if (!(L > 0.0) || G < 2) throw Error("kernel grid needs L > 0 and G >= 2");
    kg.norms.resize(G, G);
    kg.p.resize(G);
    kg.q.resize(G);
    for (int i = 0; i < G; ++i) {
        kg.p(i) = p ? p(kg.node(i)) : 1.0;
        kg.q(i) = q ? q(kg.node(i)) : 1.0;
    }
    parallel_for(static_cast<std::size_t>(G), [&](std::size_t i) {
        for (int j = 0; j < G; ++j) kg.norms(static_cast<Eigen::Index>(i), j) = k(kg.node(static_cast<int>(i)), kg.node(j));
    });
    kg.validate();
    return kg;
}

// Norms of a block kernel, for the Schur bound of an algebra-valued kernel.
inline KernelGrid kernel_grid(double L, int G, const BlockKernel& k) {
    return kernel_grid(L, G, [&](double x, double y) {
        Eigen::JacobiSVD<Eigen::MatrixXcd> svd(k(x, y));
        return svd.singularValues()(0);
    });
}

struct SchurBound {
    double alpha = 0.0;
    double beta = 0.0;
    double bound = 0.0;           // 4 sqrt(alpha beta)
    double positive_bound = 0.0;  // sqrt(alpha beta), valid for nonnegative scalar kernels
};

inline SchurBound schur_bound(const KernelGrid& kg) {
    kg.validate();
    if ((kg.p.array() <= 0.0).any() || (kg.q.array() <= 0.0).any()) throw Error("Schur weights p, q must be positive");
    const Eigen::VectorXd w = kg.weights();
    const Eigen::VectorXd rows = kg.norms * (kg.q.array() * w.array()).matrix();
    const Eigen::VectorXd cols = kg.norms.transpose() * (kg.p.array() * w.array()).matrix();
    SchurBound s;
    s.alpha = (rows.array() / kg.p.array()).maxCoeff();
    s.beta = (cols.array() / kg.q.array()).maxCoeff();
    s.positive_bound = std::sqrt(s.alpha * s.beta);
    s.bound = 4.0 * s.positive_bound;
    return s;
}

// Largest singular value of W^{1/2} A W^{1/2}.
inline double weighted_top_singular(Eigen::MatrixXcd A, const Eigen::VectorXd& w) {
    if (A.size() == 0) return 0.0;
    const Eigen::VectorXd s = w.cwiseSqrt();
    A = s.asDiagonal() * A * s.asDiagonal();
    if (A.imag().isZero(0.0) && A.real().isApprox(A.real().transpose(), 1e-14)) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A.real(), Eigen::EigenvaluesOnly);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }
    if (A.isApprox(A.adjoint(), 1e-14)) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(A, Eigen::EigenvaluesOnly);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }
    Eigen::BDCSVD<Eigen::MatrixXcd> svd(A);
    return svd.singularValues()(0);
}

// Operator norm of the discretized kernel with the payload collapsed to its norm.
inline double discretized_opnorm(const KernelGrid& kg) {
    kg.validate();
    return weighted_top_singular(kg.norms.cast<cplx>(), kg.weights());
}

// Full block discretization: the (G N) x (G N) matrix of k(x_i, y_j).
inline double discretized_opnorm(double L, int G, const BlockKernel& k) {
    KernelGrid shape;
    shape.L = L;
    shape.G = G;
    if (!(L > 0.0) || G < 2) throw Error("kernel grid needs L > 0 and G >= 2");
    const Eigen::MatrixXcd k00 = k(shape.node(0), shape.node(0));
    const Eigen::Index N = k00.rows();
    if (k00.cols() != N) throw Error("block kernel must return square blocks");
    Eigen::MatrixXcd A(G * N, G * N);
    parallel_for(static_cast<std::size_t>(G), [&](std::size_t i) {
        for (int j = 0; j < G; ++j)
            A.block(static_cast<Eigen::Index>(i) * N, j * N, N, N) = k(shape.node(static_cast<int>(i)), shape.node(j));
    });
    Eigen::VectorXd w(G * N);
    const Eigen::VectorXd wg = shape.weights();
    for (int i = 0; i < G; ++i) w.segment(i * N, N).setConstant(wg(i));
    return weighted_top_singular(A, w);
}

// ---------------------------------------------------------------- kernels of symbols

namespace detail {

// Values of a symbol (or a plain expression) at mu-free points, with the cutoff policy applied.
class SymbolValues {
public:
    explicit SymbolValues(const Expr& e) : backend_(e.backend()) { parts_.push_back({Program(e), false}); }
    explicit SymbolValues(const Symbol& s) : backend_(s.backend) {
        for (const auto& c : s.components)
            if (!c.expr.is_zero())
                parts_.push_back({Program(c.expr), c.extension == Extension::cutoff && c.interior == Interior::zero});
    }

    Eigen::MatrixXcd operator()(double xi) const {
        const std::vector<double> x{xi};
        AlgebraElement s = AlgebraElement::zero(backend_);
        for (const auto& p : parts_)
            if (!(p.zero_inside && std::abs(xi) < 1.0)) s = s + p.prog(x, 1.0);
        return detail::as_operator(s);
    }

    const BackendPtr& backend() const { return backend_; }

private:
    struct Part {
        Program prog;
        bool zero_inside;
    };
    BackendPtr backend_;
    std::vector<Part> parts_;
};

}  // namespace detail

struct KernelSpec {
    double rel_tol = 1e-9;
    QuadratureSpec quadrature{};
};

// int e^{i t xi} f(xi + s) dbar xi for n = 1, before the action is applied.
// Returned as the operator matrix of the algebra element (1 x 1 for scalars).
inline Eigen::MatrixXcd difference_kernel(const detail::SymbolValues& f, double t, double shift = 0.0,
                                          const KernelSpec& spec = {}) {
    const auto& be = *f.backend();
    if (be.dim() != 1) throw DomainError("kernel quadrature is implemented for n = 1 only");
    if (be.kind() == BackendKind::nctorus) throw DomainError("kernel quadrature needs a scalar or matrix backend");
    std::map<double, Eigen::MatrixXcd> cache;
    auto at = [&](double xi) -> const Eigen::MatrixXcd& {
        auto it = cache.find(xi);
        if (it == cache.end()) it = cache.emplace(xi, f(xi + shift)).first;
        return it->second;
    };
    const Eigen::MatrixXcd f0 = at(0.0);
    const Eigen::Index N = f0.rows();
    Eigen::MatrixXcd out(N, N);
    boost::math::quadrature::ooura_fourier_cos<double> cosine(spec.rel_tol);
    boost::math::quadrature::ooura_fourier_sin<double> sine(spec.rel_tol);
    for (Eigen::Index r = 0; r < N; ++r)
        for (Eigen::Index c = 0; c < N; ++c) {
            auto even = [&](double xi, bool imag) {
                const cplx v = at(xi)(r, c) + at(-xi)(r, c);
                return imag ? v.imag() : v.real();
            };
            auto odd = [&](double xi, bool imag) {
                const cplx v = at(xi)(r, c) - at(-xi)(r, c);
                return imag ? v.imag() : v.real();
            };
            cplx cos_part, sin_part;
            if (t == 0.0) {
                auto F = [&](double xi) { return cplx{even(xi, false), even(xi, true)}; };
                cos_part = radial_integral(F, 0.0, 1.0, spec.quadrature) + radial_tail(F, 1.0, spec.quadrature);
            } else {
                // int_0^inf g(xi) cos(|t| xi), and the sine part flips sign with t
                const double w = std::abs(t);
                cos_part = {cosine.integrate([&](double xi) { return even(xi, false); }, w).first,
                            cosine.integrate([&](double xi) { return even(xi, true); }, w).first};
                sin_part = cplx{sine.integrate([&](double xi) { return odd(xi, false); }, w).first,
                                sine.integrate([&](double xi) { return odd(xi, true); }, w).first} *
                           (t > 0 ? 1.0 : -1.0);
            }
            out(r, c) = (cos_part + I * sin_part) / (2 * std::numbers::pi);
        }
    if (!out.allFinite()) throw QuadratureError("kernel quadrature did not converge");
    return out;
}

// K(x, y) = int e^{i (x - y) xi} alpha_{-x}(f(xi + B x)) dbar xi for n = 1.
inline Eigen::MatrixXcd kernel_values(const detail::SymbolValues& f, const TwistMatrix& B, double x, double y,
                                      const KernelSpec& spec = {}) {
    // B x vanishes for n = 1, kept for the general formula
    Eigen::MatrixXcd out = difference_kernel(f, x - y, B(0, 0) * x, spec);
    if (f.backend()->kind() == BackendKind::matrix) out = alg_alpha(AlgebraElement(f.backend(), out), {-x}).data();
    return out;
}

inline AlgebraElement kernel_from_symbol(const Symbol& f, double x, double y, const KernelSpec& spec = {}) {
    const int n = f.backend->dim();
    if (f.parametric()) throw SymbolError("kernel quadrature takes a classical symbol");
    if (f.order > -n - 1)
        throw DomainError("kernel integral needs order <= -n - 1; got " + format_double(f.order));
    auto K = kernel_values(detail::SymbolValues(f), f.twist, x, y, spec);
    return f.backend->kind() == BackendKind::scalar ? AlgebraElement::constant(f.backend, K(0, 0))
                                                    : AlgebraElement(f.backend, K);
}

// Same for an explicit mu-free expression, which need not be homogeneous.
inline AlgebraElement kernel_from_symbol(const Expr& f, const TwistMatrix& B, double x, double y,
                                         const KernelSpec& spec = {}) {
    if (f.depends_on_mu()) throw SymbolError("kernel quadrature takes a mu-free expression");
    auto K = kernel_values(detail::SymbolValues(f), B, x, y, spec);
    return f.backend()->kind() == BackendKind::scalar ? AlgebraElement::constant(f.backend(), K(0, 0))
                                                      : AlgebraElement(f.backend(), K);
}

// Measured norm against sqrt(alpha beta) for an algebra-valued kernel. Numerical evidence only.
struct SharpnessReport {
    SchurBound schur;
    double measured = 0.0;
    double ratio_to_positive_bound = 0.0;  // measured / sqrt(alpha beta)
};

inline SharpnessReport schur_sharpness(double L, int G, const BlockKernel& k) {
    SharpnessReport r;
    r.schur = schur_bound(kernel_grid(L, G, k));
    r.measured = discretized_opnorm(L, G, k);
    r.ratio_to_positive_bound = r.schur.positive_bound > 0.0 ? r.measured / r.schur.positive_bound : 0.0;
    return r;
}

inline std::string to_csv(const KernelGrid& kg) {
    std::ostringstream os;
    os << "x,y,norm\n";
    for (int i = 0; i < kg.G; ++i)
        for (int j = 0; j < kg.G; ++j)
            os << format_double(kg.node(i)) << ',' << format_double(kg.node(j)) << ',' << format_double(kg.norms(i, j))
               << '\n';
    return os.str();
}

}  // namespace tpsido
