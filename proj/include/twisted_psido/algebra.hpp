#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "multi_index.hpp"

namespace tpsido {

using cplx = std::complex<double>;
inline constexpr cplx I{0.0, 1.0};

enum class BackendKind { scalar, matrix, nctorus };

inline const char* to_string(BackendKind k) {
    switch (k) {
        case BackendKind::scalar: return "scalar";
        case BackendKind::matrix: return "matrix";
        case BackendKind::nctorus: return "nctorus";
    }
    return "?";
}

// Concrete smooth algebra with an R^n action.
//   scalar:  C, trivial action
//   matrix:  M_N(C), alpha_t(a) = e^{i<t,H>} a e^{-i<t,H>} with diagonal H_j
//   nctorus: band-truncated Weyl-ordered Fourier series sum a_k U^k
class Backend {
public:
    static std::shared_ptr<const Backend> scalar(int n = 1) {
        if (n < 1) throw Error("action dimension must be >= 1");
        auto b = std::shared_ptr<Backend>(new Backend);
        b->kind_ = BackendKind::scalar;
        b->n_ = n;
        b->size_ = 1;
        return b;
    }

    // generators[j] holds the diagonal of H_j.
    static std::shared_ptr<const Backend> matrix(std::vector<Eigen::VectorXd> generators) {
        if (generators.empty()) throw Error("matrix backend needs at least one generator");
        const auto N = generators.front().size();
        if (N < 1) throw Error("matrix backend needs N >= 1");
        for (const auto& h : generators) {
            if (h.size() != N) throw Error("matrix generators must share dimension N");
            if (!h.allFinite()) throw Error("matrix generator has non-finite entries");
        }
        auto b = std::shared_ptr<Backend>(new Backend);
        b->kind_ = BackendKind::matrix;
        b->n_ = static_cast<int>(generators.size());
        b->size_ = static_cast<int>(N);
        b->gens_ = std::move(generators);
        return b;
    }

    static std::shared_ptr<const Backend> nctorus(const Eigen::MatrixXd& theta, int band) {
        const auto n = theta.rows();
        if (n < 1 || theta.cols() != n) throw Error("theta must be a square n x n matrix");
        if (band < 1) throw Error("nctorus band radius K must be >= 1");
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j)
                if (std::abs(theta(i, j) + theta(j, i)) > 1e-14)
                    throw Error("theta is not skew-symmetric at entry (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
        auto b = std::shared_ptr<Backend>(new Backend);
        b->kind_ = BackendKind::nctorus;
        b->n_ = static_cast<int>(n);
        b->band_ = band;
        b->theta_ = theta;
        b->side_ = 2 * band + 1;
        int count = 1;
        for (int i = 0; i < b->n_; ++i) count *= b->side_;
        b->size_ = count;
        b->build_tables();
        return b;
    }

    BackendKind kind() const { return kind_; }
    int dim() const { return n_; }
    // Matrix size N, or number of Fourier modes for nctorus.
    int size() const { return size_; }
    int band() const { return band_; }
    const Eigen::MatrixXd& theta() const { return theta_; }
    const std::vector<Eigen::VectorXd>& generators() const { return gens_; }

    bool same_as(const Backend& o) const {
        if (this == &o) return true;
        if (kind_ != o.kind_ || n_ != o.n_ || size_ != o.size_) return false;
        if (kind_ == BackendKind::matrix) {
            for (std::size_t j = 0; j < gens_.size(); ++j)
                if (gens_[j] != o.gens_[j]) return false;
        }
        if (kind_ == BackendKind::nctorus) return band_ == o.band_ && theta_ == o.theta_;
        return true;
    }

    // nctorus mode bookkeeping
    int mode_index(const std::vector<int>& k) const {
        int idx = 0, stride = 1;
        for (int i = 0; i < n_; ++i) {
            if (std::abs(k[static_cast<std::size_t>(i)]) > band_) return -1;
            idx += (k[static_cast<std::size_t>(i)] + band_) * stride;
            stride *= side_;
        }
        return idx;
    }
    const std::vector<int>& mode(int idx) const { return modes_[static_cast<std::size_t>(idx)]; }
    int zero_mode() const { return zero_mode_; }
    // Index of k+l, or -1 when it leaves the band.
    int mode_sum(int a, int b) const { return sum_[static_cast<std::size_t>(a * size_ + b)]; }
    cplx weyl_phase(int a, int b) const { return phase_[static_cast<std::size_t>(a * size_ + b)]; }

private:
    Backend() = default;

    void build_tables() {
        modes_.resize(static_cast<std::size_t>(size_));
        for (int idx = 0; idx < size_; ++idx) {
            std::vector<int> k(static_cast<std::size_t>(n_));
            int r = idx;
            for (int i = 0; i < n_; ++i) {
                k[static_cast<std::size_t>(i)] = r % side_ - band_;
                r /= side_;
            }
            modes_[static_cast<std::size_t>(idx)] = k;
        }
        zero_mode_ = mode_index(std::vector<int>(static_cast<std::size_t>(n_), 0));
        sum_.assign(static_cast<std::size_t>(size_) * size_, -1);
        phase_.assign(static_cast<std::size_t>(size_) * size_, cplx{1.0, 0.0});
        std::vector<int> s(static_cast<std::size_t>(n_));
        for (int a = 0; a < size_; ++a) {
            const auto& k = modes_[static_cast<std::size_t>(a)];
            for (int b = 0; b < size_; ++b) {
                const auto& l = modes_[static_cast<std::size_t>(b)];
                double ph = 0.0;
                for (int i = 0; i < n_; ++i) {
                    s[static_cast<std::size_t>(i)] = k[static_cast<std::size_t>(i)] + l[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n_; ++j) ph += k[static_cast<std::size_t>(i)] * theta_(i, j) * l[static_cast<std::size_t>(j)];
                }
                const auto at = static_cast<std::size_t>(a * size_ + b);
                sum_[at] = mode_index(s);
                phase_[at] = std::polar(1.0, 0.5 * ph);
            }
        }
    }

    BackendKind kind_ = BackendKind::scalar;
    int n_ = 1;
    int size_ = 1;
    int band_ = 0;
    int side_ = 1;
    int zero_mode_ = 0;
    Eigen::MatrixXd theta_;
    std::vector<Eigen::VectorXd> gens_;
    std::vector<std::vector<int>> modes_;
    std::vector<int> sum_;
    std::vector<cplx> phase_;
};

using BackendPtr = std::shared_ptr<const Backend>;

inline void require_same(const BackendPtr& a, const BackendPtr& b) {
    if (!a || !b || !a->same_as(*b))
        throw BackendMismatch(std::string("backend mismatch: ") + (a ? to_string(a->kind()) : "null") + " vs " +
                              (b ? to_string(b->kind()) : "null"));
}

// Payload: 1x1 (scalar), N x N (matrix), or a column of Fourier coefficients (nctorus).
class AlgebraElement {
public:
    AlgebraElement() = default;
    AlgebraElement(BackendPtr backend, Eigen::MatrixXcd data) : backend_(std::move(backend)), data_(std::move(data)) {
        if (!backend_) throw Error("algebra element without backend");
        const auto expect_rows = backend_->size();
        const auto expect_cols = backend_->kind() == BackendKind::matrix ? backend_->size() : 1;
        if (data_.rows() != expect_rows || data_.cols() != expect_cols)
            throw Error("payload shape does not fit the backend");
    }

    static AlgebraElement constant(BackendPtr b, cplx c) {
        Eigen::MatrixXcd d;
        switch (b->kind()) {
            case BackendKind::scalar: d = Eigen::MatrixXcd::Constant(1, 1, c); break;
            case BackendKind::matrix: d = c * Eigen::MatrixXcd::Identity(b->size(), b->size()); break;
            case BackendKind::nctorus:
                d = Eigen::MatrixXcd::Zero(b->size(), 1);
                d(b->zero_mode(), 0) = c;
                break;
        }
        return {std::move(b), std::move(d)};
    }
    static AlgebraElement identity(BackendPtr b) { return constant(std::move(b), 1.0); }
    static AlgebraElement zero(BackendPtr b) { return constant(std::move(b), 0.0); }

    // U^k on the noncommutative torus.
    static AlgebraElement monomial(BackendPtr b, const std::vector<int>& k, cplx c = 1.0) {
        if (b->kind() != BackendKind::nctorus) throw Error("monomials U^k need the nctorus backend");
        if (static_cast<int>(k.size()) != b->dim()) throw Error("mode dimension mismatch");
        const int idx = b->mode_index(k);
        if (idx < 0) throw Error("mode outside the Fourier band");
        Eigen::MatrixXcd d = Eigen::MatrixXcd::Zero(b->size(), 1);
        d(idx, 0) = c;
        return {std::move(b), std::move(d)};
    }

    const BackendPtr& backend() const { return backend_; }
    const Eigen::MatrixXcd& data() const { return data_; }
    bool empty() const { return !backend_; }

    // Returns c if the element equals c*1 exactly.
    std::optional<cplx> as_scalar() const {
        switch (backend_->kind()) {
            case BackendKind::scalar: return data_(0, 0);
            case BackendKind::matrix: {
                const cplx c = data_(0, 0);
                for (Eigen::Index i = 0; i < data_.rows(); ++i)
                    for (Eigen::Index j = 0; j < data_.cols(); ++j)
                        if (data_(i, j) != (i == j ? c : cplx{}) ) return std::nullopt;
                return c;
            }
            case BackendKind::nctorus: {
                const int z = backend_->zero_mode();
                for (Eigen::Index i = 0; i < data_.rows(); ++i)
                    if (i != z && data_(i, 0) != cplx{}) return std::nullopt;
                return data_(z, 0);
            }
        }
        return std::nullopt;
    }

    bool is_zero() const { return data_.isZero(0.0); }

    friend bool operator==(const AlgebraElement& a, const AlgebraElement& b) {
        return a.backend_ && b.backend_ && a.backend_->same_as(*b.backend_) && a.data_ == b.data_;
    }

private:
    BackendPtr backend_;
    Eigen::MatrixXcd data_;
};

inline AlgebraElement operator+(const AlgebraElement& a, const AlgebraElement& b) {
    require_same(a.backend(), b.backend());
    return {a.backend(), a.data() + b.data()};
}

inline AlgebraElement operator-(const AlgebraElement& a, const AlgebraElement& b) {
    require_same(a.backend(), b.backend());
    return {a.backend(), a.data() - b.data()};
}

inline AlgebraElement operator-(const AlgebraElement& a) { return {a.backend(), -a.data()}; }

inline AlgebraElement operator*(cplx c, const AlgebraElement& a) { return {a.backend(), c * a.data()}; }

namespace detail {

// Matrix of x -> a*x on the truncated band.
inline Eigen::MatrixXcd left_multiplication(const AlgebraElement& a) {
    const auto& b = *a.backend();
    const int D = b.size();
    Eigen::MatrixXcd L = Eigen::MatrixXcd::Zero(D, D);
    for (int p = 0; p < D; ++p) {
        const cplx ap = a.data()(p, 0);
        if (ap == cplx{}) continue;
        for (int q = 0; q < D; ++q) {
            const int s = b.mode_sum(p, q);
            if (s >= 0) L(s, q) += ap * b.weyl_phase(p, q);
        }
    }
    return L;
}

inline Eigen::MatrixXcd as_operator(const AlgebraElement& a) {
    switch (a.backend()->kind()) {
        case BackendKind::scalar:
        case BackendKind::matrix: return a.data();
        case BackendKind::nctorus: return left_multiplication(a);
    }
    return {};
}

}  // namespace detail

inline AlgebraElement operator*(const AlgebraElement& a, const AlgebraElement& b) {
    require_same(a.backend(), b.backend());
    const auto& be = *a.backend();
    if (be.kind() != BackendKind::nctorus) return {a.backend(), a.data() * b.data()};
    const int D = be.size();
    Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(D, 1);
    for (int p = 0; p < D; ++p) {
        const cplx ap = a.data()(p, 0);
        if (ap == cplx{}) continue;
        for (int q = 0; q < D; ++q) {
            const cplx bq = b.data()(q, 0);
            if (bq == cplx{}) continue;
            const int s = be.mode_sum(p, q);
            if (s >= 0) out(s, 0) += ap * bq * be.weyl_phase(p, q);
        }
    }
    return {a.backend(), std::move(out)};
}

inline AlgebraElement alg_adjoint(const AlgebraElement& a) {
    const auto& be = *a.backend();
    if (be.kind() != BackendKind::nctorus) return {a.backend(), a.data().adjoint()};
    // (a_k U^k)* = conj(a_k) U^{-k}
    Eigen::MatrixXcd out(be.size(), 1);
    for (int p = 0; p < be.size(); ++p) {
        auto k = be.mode(p);
        for (auto& v : k) v = -v;
        out(be.mode_index(k), 0) = std::conj(a.data()(p, 0));
    }
    return {a.backend(), std::move(out)};
}

// Operator norm; for nctorus the norm of left multiplication on the band.
inline double alg_norm(const AlgebraElement& a) {
    if (a.backend()->kind() == BackendKind::scalar) return std::abs(a.data()(0, 0));
    const Eigen::MatrixXcd op = detail::as_operator(a);
    if (op.isZero(0.0)) return 0.0;
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(op);
    return svd.singularValues()(0);
}

inline double alg_condition(const AlgebraElement& a) {
    if (a.backend()->kind() == BackendKind::scalar) {
        return a.data()(0, 0) == cplx{} ? std::numeric_limits<double>::infinity() : 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(detail::as_operator(a));
    const auto& s = svd.singularValues();
    const double lo = s(s.size() - 1);
    return lo == 0.0 ? std::numeric_limits<double>::infinity() : s(0) / lo;
}

inline AlgebraElement alg_inverse(const AlgebraElement& a, double tol = 1e-10) {
    const auto& be = *a.backend();
    if (be.kind() == BackendKind::scalar) {
        const cplx c = a.data()(0, 0);
        if (c == cplx{}) throw SingularElement("scalar element is zero", 1.0, std::numeric_limits<double>::infinity());
        return AlgebraElement::constant(a.backend(), 1.0 / c);
    }
    const Eigen::MatrixXcd op = detail::as_operator(a);
    Eigen::MatrixXcd rhs;
    if (be.kind() == BackendKind::matrix) {
        rhs = Eigen::MatrixXcd::Identity(be.size(), be.size());
    } else {
        rhs = Eigen::MatrixXcd::Zero(be.size(), 1);
        rhs(be.zero_mode(), 0) = 1.0;
    }
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(op);
    if (!lu.isInvertible()) {
        throw SingularElement("element is singular", 1.0, std::numeric_limits<double>::infinity());
    }
    Eigen::MatrixXcd x = lu.solve(rhs);
    AlgebraElement inv{a.backend(), x};
    const AlgebraElement one = AlgebraElement::identity(a.backend());
    const double residual = alg_norm(a * inv - one);
    if (!(residual <= tol) || !x.allFinite()) {
        const double rc = lu.rcond();
        throw SingularElement("inverse residual " + std::to_string(residual) + " exceeds tolerance", residual,
                              rc > 0 ? 1.0 / rc : std::numeric_limits<double>::infinity());
    }
    return inv;
}

// delta^gamma
inline AlgebraElement alg_delta(const AlgebraElement& a, const MultiIndex& gamma) {
    const auto& be = *a.backend();
    if (static_cast<int>(gamma.size()) != be.dim()) throw Error("derivation index has wrong dimension");
    if (order(gamma) == 0) return a;
    switch (be.kind()) {
        case BackendKind::scalar: return AlgebraElement::zero(a.backend());
        case BackendKind::matrix: {
            Eigen::MatrixXcd out = a.data();
            const int N = be.size();
            for (int p = 0; p < N; ++p)
                for (int q = 0; q < N; ++q) {
                    double w = 1.0;
                    for (int j = 0; j < be.dim(); ++j) {
                        const double d = be.generators()[static_cast<std::size_t>(j)](p) -
                                         be.generators()[static_cast<std::size_t>(j)](q);
                        for (int r = 0; r < gamma[static_cast<std::size_t>(j)]; ++r) w *= d;
                    }
                    out(p, q) *= w;
                }
            return {a.backend(), std::move(out)};
        }
        case BackendKind::nctorus: {
            Eigen::MatrixXcd out = a.data();
            for (int p = 0; p < be.size(); ++p) {
                double w = 1.0;
                const auto& k = be.mode(p);
                for (int j = 0; j < be.dim(); ++j)
                    for (int r = 0; r < gamma[static_cast<std::size_t>(j)]; ++r) w *= k[static_cast<std::size_t>(j)];
                out(p, 0) *= w;
            }
            return {a.backend(), std::move(out)};
        }
    }
    return a;
}

inline AlgebraElement alg_alpha(const AlgebraElement& a, const std::vector<double>& t) {
    const auto& be = *a.backend();
    if (static_cast<int>(t.size()) != be.dim()) throw Error("action parameter has wrong dimension");
    switch (be.kind()) {
        case BackendKind::scalar: return a;
        case BackendKind::matrix: {
            Eigen::MatrixXcd out = a.data();
            const int N = be.size();
            Eigen::VectorXd h = Eigen::VectorXd::Zero(N);
            for (int j = 0; j < be.dim(); ++j) h += t[static_cast<std::size_t>(j)] * be.generators()[static_cast<std::size_t>(j)];
            for (int p = 0; p < N; ++p)
                for (int q = 0; q < N; ++q) out(p, q) *= std::polar(1.0, h(p) - h(q));
            return {a.backend(), std::move(out)};
        }
        case BackendKind::nctorus: {
            Eigen::MatrixXcd out = a.data();
            for (int p = 0; p < be.size(); ++p) {
                double ph = 0.0;
                const auto& k = be.mode(p);
                for (int j = 0; j < be.dim(); ++j) ph += t[static_cast<std::size_t>(j)] * k[static_cast<std::size_t>(j)];
                out(p, 0) *= std::polar(1.0, ph);
            }
            return {a.backend(), std::move(out)};
        }
    }
    return a;
}

inline cplx alg_trace_psi(const AlgebraElement& a) {
    const auto& be = *a.backend();
    switch (be.kind()) {
        case BackendKind::scalar: return a.data()(0, 0);
        case BackendKind::matrix: return a.data().trace() / static_cast<double>(be.size());
        case BackendKind::nctorus: return a.data()(be.zero_mode(), 0);
    }
    return {};
}

}  // namespace tpsido
