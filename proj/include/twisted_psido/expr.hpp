#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "algebra.hpp"
#include "error.hpp"
#include "multi_index.hpp"

namespace tpsido {

enum class NodeKind { coef, xi_monomial, abs_xi_power, mu_power, sum, prod, inv };

class Expr;

namespace detail {

struct Node;
std::shared_ptr<const Node> intern(Node&& candidate);

}  // namespace detail

// Immutable, hash-consed expression for algebra-valued functions of (xi, mu).
// Structurally equal expressions share one node, so == is pointer equality.
class Expr {
public:
    Expr() = default;

    NodeKind kind() const;
    const BackendPtr& backend() const;
    std::optional<double> degree() const;
    bool depends_on_mu() const;
    bool depends_on_xi() const;
    // Scalar-valued: commutes with everything and is fixed by the action.
    bool is_central() const;
    bool is_zero() const;
    bool is_one() const;
    const AlgebraElement& coefficient() const;
    const MultiIndex& exponents() const;
    double power() const;
    const std::vector<Expr>& children() const;
    std::size_t hash() const;
    const detail::Node* id() const { return node_.get(); }
    explicit operator bool() const { return static_cast<bool>(node_); }

    friend bool operator==(const Expr& a, const Expr& b) { return a.node_ == b.node_; }

private:
    friend std::shared_ptr<const detail::Node> detail::intern(detail::Node&&);
    friend Expr make_node(detail::Node&&);
    explicit Expr(std::shared_ptr<const detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<const detail::Node> node_;
};

namespace detail {

struct Node {
    NodeKind kind = NodeKind::coef;
    BackendPtr backend;
    AlgebraElement coef;
    MultiIndex exps;
    double power = 0.0;
    std::vector<Expr> children;

    std::optional<double> degree;
    bool has_mu = false;
    bool has_xi = false;
    bool central = false;
    bool zero = false;
    bool one = false;
    std::size_t hash = 0;
};

inline void hash_mix(std::size_t& h, std::size_t v) { h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2); }

inline std::size_t hash_double(double x) {
    if (x == 0.0) x = 0.0;  // fold -0
    return std::hash<std::uint64_t>{}(std::bit_cast<std::uint64_t>(x));
}

inline bool same_payload(const Node& a, const Node& b) {
    if (a.kind != b.kind || a.backend != b.backend) return false;
    switch (a.kind) {
        case NodeKind::coef: return a.coef.data() == b.coef.data();
        case NodeKind::xi_monomial: return a.exps == b.exps;
        case NodeKind::abs_xi_power:
        case NodeKind::mu_power: return a.power == b.power;
        default: return a.children == b.children;
    }
}

class InternTable {
public:
    std::shared_ptr<const Node> get(Node&& n) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto range = table_.equal_range(n.hash);
        for (auto it = range.first; it != range.second;) {
            if (auto sp = it->second.lock()) {
                if (same_payload(*sp, n)) return sp;
                ++it;
            } else {
                it = table_.erase(it);
            }
        }
        auto sp = std::make_shared<const Node>(std::move(n));
        table_.emplace(sp->hash, sp);
        if (++inserts_ % 65536 == 0) sweep();
        return sp;
    }

private:
    void sweep() {
        for (auto it = table_.begin(); it != table_.end();) it = it->second.expired() ? table_.erase(it) : std::next(it);
    }
    std::mutex mutex_;
    std::unordered_multimap<std::size_t, std::weak_ptr<const Node>> table_;
    std::size_t inserts_ = 0;
};

inline InternTable& intern_table() {
    static InternTable t;
    return t;
}

inline std::shared_ptr<const Node> intern(Node&& n) {
    std::size_t h = static_cast<std::size_t>(n.kind) * 1000003u;
    hash_mix(h, std::hash<const void*>{}(n.backend.get()));
    switch (n.kind) {
        case NodeKind::coef: {
            const auto& d = n.coef.data();
            for (Eigen::Index i = 0; i < d.size(); ++i) {
                hash_mix(h, hash_double(d.data()[i].real()));
                hash_mix(h, hash_double(d.data()[i].imag()));
            }
            break;
        }
        case NodeKind::xi_monomial:
            for (int v : n.exps) hash_mix(h, static_cast<std::size_t>(v));
            break;
        case NodeKind::abs_xi_power:
        case NodeKind::mu_power: hash_mix(h, hash_double(n.power)); break;
        default:
            for (const auto& c : n.children) hash_mix(h, std::hash<const void*>{}(c.id()));
    }
    n.hash = h;
    return intern_table().get(std::move(n));
}

}  // namespace detail

inline NodeKind Expr::kind() const { return node_->kind; }
inline const BackendPtr& Expr::backend() const { return node_->backend; }
inline std::optional<double> Expr::degree() const { return node_->degree; }
inline bool Expr::depends_on_mu() const { return node_->has_mu; }
inline bool Expr::depends_on_xi() const { return node_->has_xi; }
inline bool Expr::is_central() const { return node_->central; }
inline bool Expr::is_zero() const { return node_->zero; }
inline bool Expr::is_one() const { return node_->one; }
inline const AlgebraElement& Expr::coefficient() const { return node_->coef; }
inline const MultiIndex& Expr::exponents() const { return node_->exps; }
inline double Expr::power() const { return node_->power; }
inline const std::vector<Expr>& Expr::children() const { return node_->children; }
inline std::size_t Expr::hash() const { return node_->hash; }

inline Expr make_node(detail::Node&& n) { return Expr(detail::intern(std::move(n))); }

// ---------------------------------------------------------------- atoms

inline Expr coef(const AlgebraElement& a) {
    detail::Node n;
    n.kind = NodeKind::coef;
    n.backend = a.backend();
    Eigen::MatrixXcd d = a.data();
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] += cplx{0.0, 0.0};  // fold -0
    n.coef = AlgebraElement(a.backend(), std::move(d));
    n.degree = 0.0;
    const auto s = n.coef.as_scalar();
    n.central = s.has_value();
    n.zero = n.coef.is_zero();
    n.one = s && *s == cplx{1.0, 0.0};
    return make_node(std::move(n));
}

inline Expr scalar(const BackendPtr& b, cplx c) { return coef(AlgebraElement::constant(b, c)); }
inline Expr zero_expr(const BackendPtr& b) { return scalar(b, 0.0); }
inline Expr one_expr(const BackendPtr& b) { return scalar(b, 1.0); }

inline Expr xi_monomial(const BackendPtr& b, MultiIndex beta) {
    if (static_cast<int>(beta.size()) != b->dim()) throw Error("xi exponent has wrong dimension");
    for (int v : beta)
        if (v < 0) throw Error("xi exponents must be nonnegative");
    if (order(beta) == 0) return one_expr(b);
    detail::Node n;
    n.kind = NodeKind::xi_monomial;
    n.backend = b;
    n.exps = std::move(beta);
    n.degree = static_cast<double>(order(n.exps));
    n.has_xi = true;
    n.central = true;
    return make_node(std::move(n));
}

inline Expr xi(const BackendPtr& b, int axis, int p = 1) {
    if (axis < 0 || axis >= b->dim()) throw Error("xi axis out of range");
    MultiIndex beta(static_cast<std::size_t>(b->dim()), 0);
    beta[static_cast<std::size_t>(axis)] = p;
    return xi_monomial(b, std::move(beta));
}

inline Expr abs_xi(const BackendPtr& b, double s) {
    if (!std::isfinite(s)) throw Error("|xi| exponent must be finite");
    if (s == 0.0) return one_expr(b);
    detail::Node n;
    n.kind = NodeKind::abs_xi_power;
    n.backend = b;
    n.power = s;
    n.degree = s;
    n.has_xi = true;
    n.central = true;
    return make_node(std::move(n));
}

inline Expr mu_pow(const BackendPtr& b, double d) {
    if (!std::isfinite(d)) throw Error("mu exponent must be finite");
    if (d == 0.0) return one_expr(b);
    detail::Node n;
    n.kind = NodeKind::mu_power;
    n.backend = b;
    n.power = d;
    n.degree = d;
    n.has_mu = true;
    n.central = true;
    return make_node(std::move(n));
}

// ---------------------------------------------------------------- composites

Expr prod(std::vector<Expr> factors);

namespace detail {

inline Node composite(NodeKind kind, std::vector<Expr> children) {
    Node n;
    n.kind = kind;
    n.backend = children.front().backend();
    n.central = true;
    for (const auto& c : children) {
        n.has_mu = n.has_mu || c.depends_on_mu();
        n.has_xi = n.has_xi || c.depends_on_xi();
        n.central = n.central && c.is_central();
    }
    n.children = std::move(children);
    return n;
}

inline void check_backends(const std::vector<Expr>& xs) {
    for (const auto& x : xs) {
        if (!x) throw Error("null expression");
        require_same(xs.front().backend(), x.backend());
    }
}

inline bool integral(double x) { return std::floor(x) == x; }

}  // namespace detail

inline Expr sum(std::vector<Expr> terms) {
    if (terms.empty()) throw Error("empty sum needs a backend; use zero_expr");
    detail::check_backends(terms);
    const BackendPtr b = terms.front().backend();

    std::vector<Expr> flat;
    for (auto& t : terms) {
        if (t.kind() == NodeKind::sum)
            flat.insert(flat.end(), t.children().begin(), t.children().end());
        else
            flat.push_back(std::move(t));
    }

    // Combine like terms: c * rest, in first-occurrence order.
    struct Entry {
        Expr rest;  // empty for the constant bucket
        cplx c;
        AlgebraElement constant;
    };
    std::vector<Entry> entries;
    std::unordered_map<const detail::Node*, std::size_t> where;
    std::optional<std::size_t> const_at;
    for (const auto& t : flat) {
        if (t.kind() == NodeKind::coef) {
            if (!const_at) {
                const_at = entries.size();
                entries.push_back({Expr{}, 0.0, t.coefficient()});
            } else {
                entries[*const_at].constant = entries[*const_at].constant + t.coefficient();
            }
            continue;
        }
        cplx c = 1.0;
        Expr rest = t;
        if (t.kind() == NodeKind::prod && t.children().front().kind() == NodeKind::coef) {
            if (auto s = t.children().front().coefficient().as_scalar()) {
                c = *s;
                rest = prod(std::vector<Expr>(t.children().begin() + 1, t.children().end()));
            }
        }
        auto it = where.find(rest.id());
        if (it == where.end()) {
            where.emplace(rest.id(), entries.size());
            entries.push_back({rest, c, {}});
        } else {
            entries[it->second].c += c;
        }
    }

    std::vector<Expr> out;
    for (auto& e : entries) {
        if (!e.rest) {
            if (!e.constant.is_zero()) out.push_back(coef(e.constant));
        } else if (e.c != cplx{}) {
            out.push_back(e.c == cplx{1.0, 0.0} ? e.rest : prod({scalar(b, e.c), e.rest}));
        }
    }
    if (out.empty()) return zero_expr(b);
    if (out.size() == 1) return out.front();

    auto n = detail::composite(NodeKind::sum, std::move(out));
    const auto d0 = n.children.front().degree();
    bool same = d0.has_value();
    for (const auto& c : n.children) same = same && c.degree() && *c.degree() == *d0;
    if (same) n.degree = d0;
    return make_node(std::move(n));
}

inline Expr prod(std::vector<Expr> factors) {
    if (factors.empty()) throw Error("empty product needs a backend; use one_expr");
    detail::check_backends(factors);
    const BackendPtr b = factors.front().backend();
    const int n_dim = b->dim();

    std::vector<Expr> flat;
    for (auto& f : factors) {
        if (f.kind() == NodeKind::prod)
            flat.insert(flat.end(), f.children().begin(), f.children().end());
        else
            flat.push_back(std::move(f));
    }

    cplx c = 1.0;
    MultiIndex beta(static_cast<std::size_t>(n_dim), 0);
    double s = 0.0, d = 0.0;
    std::vector<Expr> rest;
    for (const auto& f : flat) {
        if (f.is_zero()) return zero_expr(b);
        switch (f.kind()) {
            case NodeKind::coef:
                if (auto v = f.coefficient().as_scalar()) {
                    c *= *v;
                } else if (!rest.empty() && rest.back().kind() == NodeKind::coef) {
                    const auto merged = rest.back().coefficient() * f.coefficient();
                    if (merged.is_zero()) return zero_expr(b);
                    rest.back() = coef(merged);
                } else {
                    rest.push_back(f);
                }
                break;
            case NodeKind::xi_monomial:
                for (int j = 0; j < n_dim; ++j) beta[static_cast<std::size_t>(j)] += f.exponents()[static_cast<std::size_t>(j)];
                break;
            case NodeKind::abs_xi_power: s += f.power(); break;
            case NodeKind::mu_power: d += f.power(); break;
            default: rest.push_back(f);
        }
    }
    if (c == cplx{}) return zero_expr(b);
    // merged coefficients may have become scalar
    for (auto it = rest.begin(); it != rest.end();) {
        if (it->kind() == NodeKind::coef) {
            if (auto v = it->coefficient().as_scalar()) {
                c *= *v;
                it = rest.erase(it);
                continue;
            }
        }
        ++it;
    }
    if (c == cplx{}) return zero_expr(b);

    std::vector<Expr> out;
    if (c != cplx{1.0, 0.0}) out.push_back(scalar(b, c));
    if (order(beta) > 0) out.push_back(xi_monomial(b, beta));
    if (s != 0.0) out.push_back(abs_xi(b, s));
    if (d != 0.0) out.push_back(mu_pow(b, d));
    out.insert(out.end(), rest.begin(), rest.end());
    if (out.empty()) return one_expr(b);
    if (out.size() == 1) return out.front();

    auto n = detail::composite(NodeKind::prod, std::move(out));
    double deg = 0.0;
    bool ok = true;
    for (const auto& f : n.children) {
        if (!f.degree()) ok = false;
        else deg += *f.degree();
    }
    if (ok) n.degree = deg;
    return make_node(std::move(n));
}

inline Expr inv(const Expr& u) {
    const BackendPtr& b = u.backend();
    if (u.is_zero()) throw DomainError("inverse of the zero expression");
    switch (u.kind()) {
        case NodeKind::coef: return coef(alg_inverse(u.coefficient()));
        case NodeKind::inv: return u.children().front();
        case NodeKind::abs_xi_power: return abs_xi(b, -u.power());
        case NodeKind::mu_power: return mu_pow(b, -u.power());
        case NodeKind::prod: {
            // pure c |xi|^s mu^d folds
            bool foldable = true;
            for (const auto& f : u.children())
                foldable = foldable && (f.kind() == NodeKind::abs_xi_power || f.kind() == NodeKind::mu_power ||
                                        (f.kind() == NodeKind::coef && f.is_central()));
            if (foldable) {
                std::vector<Expr> parts;
                for (const auto& f : u.children()) parts.push_back(inv(f));
                return prod(std::move(parts));
            }
            break;
        }
        default: break;
    }
    auto n = detail::composite(NodeKind::inv, {u});
    if (u.degree()) n.degree = -*u.degree();
    return make_node(std::move(n));
}

inline Expr operator+(const Expr& a, const Expr& b) { return sum({a, b}); }
inline Expr operator*(const Expr& a, const Expr& b) { return prod({a, b}); }
inline Expr operator-(const Expr& a) { return prod({scalar(a.backend(), -1.0), a}); }
inline Expr operator-(const Expr& a, const Expr& b) { return sum({a, -b}); }
inline Expr operator*(cplx c, const Expr& a) { return prod({scalar(a.backend(), c), a}); }

inline std::optional<double> expr_degree(const Expr& e) { return e.degree(); }

// Rebuilds through the canonical constructors (flattening, zero and unit removal).
inline Expr expr_simplify(const Expr& e) {
    std::unordered_map<const detail::Node*, Expr> memo;
    auto rec = [&](auto&& self, const Expr& x) -> Expr {
        if (auto it = memo.find(x.id()); it != memo.end()) return it->second;
        Expr r = x;
        if (x.kind() == NodeKind::sum || x.kind() == NodeKind::prod || x.kind() == NodeKind::inv) {
            std::vector<Expr> cs;
            for (const auto& c : x.children()) cs.push_back(self(self, c));
            if (x.kind() == NodeKind::sum) r = sum(std::move(cs));
            else if (x.kind() == NodeKind::prod) r = prod(std::move(cs));
            else r = inv(cs.front());
        }
        memo.emplace(x.id(), r);
        return r;
    };
    return rec(rec, e);
}

// ---------------------------------------------------------------- evaluation

namespace detail {

inline cplx int_pow(cplx z, long k) {
    if (k < 0) return 1.0 / int_pow(z, -k);
    cplx r = 1.0;
    while (k) {
        if (k & 1) r *= z;
        z *= z;
        k >>= 1;
    }
    return r;
}

}  // namespace detail

// Principal-branch mu^d.
inline cplx mu_power_value(cplx mu, double d) {
    if (detail::integral(d) && std::abs(d) < 1e6) return detail::int_pow(mu, static_cast<long>(d));
    return std::pow(mu, d);
}

// Flattened, topologically ordered form of an expression for repeated evaluation.
class Program {
public:
    Program() = default;
    explicit Program(Expr root) : root_(std::move(root)) {
        std::unordered_map<const detail::Node*, int> index;
        auto visit = [&](auto&& self, const Expr& x) -> int {
            if (auto it = index.find(x.id()); it != index.end()) return it->second;
            Op op;
            op.node = x.id();
            op.expr = x;
            for (const auto& c : x.children()) op.args.push_back(self(self, c));
            const int at = static_cast<int>(ops_.size());
            ops_.push_back(std::move(op));
            index.emplace(x.id(), at);
            return at;
        };
        visit(visit, root_);
    }

    const Expr& expr() const { return root_; }

    AlgebraElement operator()(std::span<const double> xi, cplx mu) const {
        auto vals = run(xi, mu);
        auto& v = vals.back();
        if (v.central) return AlgebraElement::constant(root_.backend(), v.s);
        return v.a;
    }

    // psi(eval(xi, mu))
    cplx trace(std::span<const double> xi, cplx mu) const {
        auto vals = run(xi, mu);
        auto& v = vals.back();
        return v.central ? v.s : alg_trace_psi(v.a);
    }

private:
    struct Op {
        const detail::Node* node = nullptr;
        Expr expr;
        std::vector<int> args;
    };
    struct Value {
        bool central = true;
        cplx s;
        AlgebraElement a;
    };

    static Value combine_mul(const Value& x, const Value& y) {
        if (x.central && y.central) return {true, x.s * y.s, {}};
        if (x.central) return {false, {}, x.s * y.a};
        if (y.central) return {false, {}, y.s * x.a};
        return {false, {}, x.a * y.a};
    }

    std::vector<Value> run(std::span<const double> xi, cplx mu) const {
        const auto& b = root_.backend();
        if (static_cast<int>(xi.size()) != b->dim()) throw Error("xi has wrong dimension");
        double r2 = 0.0;
        for (double v : xi) r2 += v * v;
        const double r = std::sqrt(r2);
        std::vector<Value> vals(ops_.size());
        for (std::size_t i = 0; i < ops_.size(); ++i) {
            const Op& op = ops_[i];
            const Expr& e = op.expr;
            Value& out = vals[i];
            switch (e.kind()) {
                case NodeKind::coef:
                    if (e.is_central()) out = {true, *e.coefficient().as_scalar(), {}};
                    else out = {false, {}, e.coefficient()};
                    break;
                case NodeKind::xi_monomial: {
                    double p = 1.0;
                    for (int j = 0; j < b->dim(); ++j)
                        for (int q = 0; q < e.exponents()[static_cast<std::size_t>(j)]; ++q) p *= xi[static_cast<std::size_t>(j)];
                    out = {true, p, {}};
                    break;
                }
                case NodeKind::abs_xi_power:
                    if (r == 0.0 && e.power() < 0.0) throw DomainError("negative power of |xi| at xi = 0");
                    out = {true, std::pow(r, e.power()), {}};
                    break;
                case NodeKind::mu_power: out = {true, mu_power_value(mu, e.power()), {}}; break;
                case NodeKind::sum: {
                    Value acc = vals[static_cast<std::size_t>(op.args[0])];
                    for (std::size_t k = 1; k < op.args.size(); ++k) {
                        const Value& y = vals[static_cast<std::size_t>(op.args[k])];
                        if (acc.central && y.central) acc.s += y.s;
                        else if (acc.central) acc = {false, {}, y.a + AlgebraElement::constant(b, acc.s)};
                        else if (y.central) acc.a = acc.a + AlgebraElement::constant(b, y.s);
                        else acc.a = acc.a + y.a;
                    }
                    out = std::move(acc);
                    break;
                }
                case NodeKind::prod: {
                    Value acc = vals[static_cast<std::size_t>(op.args[0])];
                    for (std::size_t k = 1; k < op.args.size(); ++k)
                        acc = combine_mul(acc, vals[static_cast<std::size_t>(op.args[k])]);
                    out = std::move(acc);
                    break;
                }
                case NodeKind::inv: {
                    const Value& u = vals[static_cast<std::size_t>(op.args[0])];
                    if (u.central) {
                        if (u.s == cplx{})
                            throw SingularElement("inverse of a vanishing scalar", 1.0, std::numeric_limits<double>::infinity());
                        out = {true, 1.0 / u.s, {}};
                    } else {
                        out = {false, {}, alg_inverse(u.a)};
                    }
                    break;
                }
            }
        }
        return vals;
    }

    Expr root_;
    std::vector<Op> ops_;
};

inline AlgebraElement expr_eval(const Expr& e, std::span<const double> xi, cplx mu) { return Program(e)(xi, mu); }

inline AlgebraElement expr_eval(const Expr& e, std::initializer_list<double> xi, cplx mu) {
    std::vector<double> v(xi);
    return Program(e)(v, mu);
}

// ---------------------------------------------------------------- derivatives

namespace detail {

using Memo = std::unordered_map<const Node*, Expr>;

template <class Leaf>
Expr derive(const Expr& x, Memo& memo, const Leaf& leaf, bool (*skip)(const Expr&)) {
    if (auto it = memo.find(x.id()); it != memo.end()) return it->second;
    const BackendPtr& b = x.backend();
    Expr r;
    if (skip(x)) {
        r = zero_expr(b);
    } else {
        switch (x.kind()) {
            case NodeKind::sum: {
                std::vector<Expr> parts;
                for (const auto& c : x.children()) parts.push_back(derive(c, memo, leaf, skip));
                r = sum(std::move(parts));
                break;
            }
            case NodeKind::prod: {
                std::vector<Expr> parts;
                const auto& cs = x.children();
                for (std::size_t i = 0; i < cs.size(); ++i) {
                    Expr d = derive(cs[i], memo, leaf, skip);
                    if (d.is_zero()) continue;
                    std::vector<Expr> fs(cs.begin(), cs.end());
                    fs[i] = d;
                    parts.push_back(prod(std::move(fs)));
                }
                r = parts.empty() ? zero_expr(b) : sum(std::move(parts));
                break;
            }
            case NodeKind::inv: {
                Expr d = derive(x.children().front(), memo, leaf, skip);
                r = d.is_zero() ? zero_expr(b) : prod({scalar(b, -1.0), x, d, x});
                break;
            }
            default: r = leaf(x);
        }
    }
    memo.emplace(x.id(), r);
    return r;
}

}  // namespace detail

// d/dxi_j
inline Expr expr_dxi(const Expr& e, int j) {
    const BackendPtr& b = e.backend();
    if (j < 0 || j >= b->dim()) throw Error("xi axis out of range");
    detail::Memo memo;
    auto leaf = [&](const Expr& x) -> Expr {
        switch (x.kind()) {
            case NodeKind::xi_monomial: {
                MultiIndex beta = x.exponents();
                const int p = beta[static_cast<std::size_t>(j)];
                if (p == 0) return zero_expr(b);
                beta[static_cast<std::size_t>(j)] -= 1;
                return prod({scalar(b, static_cast<double>(p)), xi_monomial(b, beta)});
            }
            case NodeKind::abs_xi_power:
                return prod({scalar(b, x.power()), xi(b, j), abs_xi(b, x.power() - 2.0)});
            default: return zero_expr(b);
        }
    };
    return detail::derive(e, memo, leaf, +[](const Expr& x) { return !x.depends_on_xi(); });
}

inline Expr expr_dxi(const Expr& e, const MultiIndex& alpha) {
    Expr r = e;
    for (std::size_t j = 0; j < alpha.size(); ++j)
        for (int q = 0; q < alpha[j]; ++q) r = expr_dxi(r, static_cast<int>(j));
    return r;
}

inline Expr expr_delta(const Expr& e, int j) {
    const BackendPtr& b = e.backend();
    if (j < 0 || j >= b->dim()) throw Error("derivation index out of range");
    detail::Memo memo;
    auto leaf = [&](const Expr& x) -> Expr {
        if (x.kind() == NodeKind::coef) return coef(alg_delta(x.coefficient(), unit_index(b->dim(), j)));
        return zero_expr(b);
    };
    return detail::derive(e, memo, leaf, +[](const Expr& x) { return x.is_central(); });
}

inline Expr expr_delta(const Expr& e, const MultiIndex& gamma) {
    if (static_cast<int>(gamma.size()) != e.backend()->dim()) throw Error("derivation index has wrong dimension");
    Expr r = e;
    for (std::size_t j = 0; j < gamma.size(); ++j)
        for (int q = 0; q < gamma[j]; ++q) r = expr_delta(r, static_cast<int>(j));
    return r;
}

// Real skew-symmetric n x n twist.
class TwistMatrix {
public:
    explicit TwistMatrix(int n) : b_(Eigen::MatrixXd::Zero(n, n)) {}
    explicit TwistMatrix(Eigen::MatrixXd b) : b_(std::move(b)) {
        if (b_.rows() != b_.cols() || b_.rows() < 1) throw Error("twist matrix must be square");
        for (Eigen::Index i = 0; i < b_.rows(); ++i)
            for (Eigen::Index j = 0; j < b_.cols(); ++j)
                if (!(std::abs(b_(i, j) + b_(j, i)) <= 1e-14))
                    throw Error("twist matrix is not skew-symmetric at entry (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
    }
    int dim() const { return static_cast<int>(b_.rows()); }
    double operator()(int k, int j) const { return b_(k, j); }
    const Eigen::MatrixXd& matrix() const { return b_; }
    bool is_zero() const { return b_.isZero(0.0); }
    friend bool operator==(const TwistMatrix& a, const TwistMatrix& b) { return a.b_ == b.b_; }

private:
    Eigen::MatrixXd b_;
};

// d_{B,xi_j} = sum_k B_kj d_{xi_k}
inline Expr expr_dB(const Expr& e, int j, const TwistMatrix& B) {
    const BackendPtr& b = e.backend();
    std::vector<Expr> parts;
    for (int k = 0; k < B.dim(); ++k)
        if (B(k, j) != 0.0) parts.push_back(prod({scalar(b, B(k, j)), expr_dxi(e, k)}));
    return parts.empty() ? zero_expr(b) : sum(std::move(parts));
}

inline Expr expr_dB(const Expr& e, const MultiIndex& gamma, const TwistMatrix& B) {
    if (B.dim() != e.backend()->dim()) throw Error("twist dimension does not match the backend");
    Expr r = e;
    for (std::size_t j = 0; j < gamma.size(); ++j)
        for (int q = 0; q < gamma[j]; ++q) r = expr_dB(r, static_cast<int>(j), B);
    return r;
}

// f^{B,alpha} = sum_{beta+gamma=alpha} binom(alpha,beta) i^{|beta|} delta^beta d_B^gamma f
inline Expr expr_twisted(const Expr& e, const MultiIndex& alpha, const TwistMatrix& B) {
    if (order(alpha) == 0) return e;
    const BackendPtr& b = e.backend();
    std::vector<Expr> parts;
    for (const auto& [beta, gamma] : splits(alpha)) {
        Expr t = expr_delta(expr_dB(e, gamma, B), beta);
        if (t.is_zero()) continue;
        const cplx w = binomial(alpha, beta) * detail::int_pow(I, order(beta));
        parts.push_back(prod({scalar(b, w), t}));
    }
    return parts.empty() ? zero_expr(b) : sum(std::move(parts));
}

// Pointwise adjoint f(xi)*; mu-free expressions only.
inline Expr expr_adjoint(const Expr& e) {
    if (e.depends_on_mu()) throw Error("adjoint is defined for mu-free expressions only");
    detail::Memo memo;
    auto rec = [&](auto&& self, const Expr& x) -> Expr {
        if (auto it = memo.find(x.id()); it != memo.end()) return it->second;
        Expr r = x;
        switch (x.kind()) {
            case NodeKind::coef: r = coef(alg_adjoint(x.coefficient())); break;
            case NodeKind::sum: {
                std::vector<Expr> cs;
                for (const auto& c : x.children()) cs.push_back(self(self, c));
                r = sum(std::move(cs));
                break;
            }
            case NodeKind::prod: {
                std::vector<Expr> cs;
                for (auto it = x.children().rbegin(); it != x.children().rend(); ++it) cs.push_back(self(self, *it));
                r = prod(std::move(cs));
                break;
            }
            case NodeKind::inv: r = inv(self(self, x.children().front())); break;
            default: break;
        }
        memo.emplace(x.id(), r);
        return r;
    };
    return rec(rec, e);
}

// ---------------------------------------------------------------- large-mu expansion

namespace detail {

inline constexpr std::size_t unbounded = std::numeric_limits<std::size_t>::max();

// e ~ sum_nu c[nu] mu^{lead - nu}; entries in [c.size(), valid) are zero.
struct MuSeries {
    bool zero = false;
    double lead = 0.0;
    std::vector<Expr> c;
    std::size_t valid = unbounded;

    Expr at(std::size_t nu, const BackendPtr& b) const { return nu < c.size() ? c[nu] : zero_expr(b); }
};

inline std::size_t sat_add(std::size_t a, std::size_t b) { return a == unbounded ? unbounded : a + b; }

class MuExpander {
public:
    explicit MuExpander(std::size_t request) : request_(request) {}

    MuSeries series(const Expr& x) {
        if (auto it = memo_.find(x.id()); it != memo_.end()) return it->second;
        MuSeries s = compute(x);
        memo_.emplace(x.id(), s);
        return s;
    }

private:
    MuSeries compute(const Expr& x) {
        const BackendPtr& b = x.backend();
        if (x.is_zero()) return {true, 0.0, {}, unbounded};
        if (!x.depends_on_mu()) return {false, 0.0, {x}, unbounded};
        switch (x.kind()) {
            case NodeKind::mu_power: return {false, x.power(), {one_expr(b)}, unbounded};
            case NodeKind::sum: {
                std::vector<MuSeries> kids;
                for (const auto& c : x.children()) {
                    auto s = series(c);
                    if (!s.zero) kids.push_back(std::move(s));
                }
                if (kids.empty()) return {true, 0.0, {}, unbounded};
                double lead = kids.front().lead;
                for (const auto& k : kids) lead = std::max(lead, k.lead);
                std::vector<std::size_t> shift;
                std::size_t valid = unbounded, length = 0;
                for (const auto& k : kids) {
                    const double sh = lead - k.lead;
                    const double rs = std::round(sh);
                    if (std::abs(sh - rs) > 1e-9)
                        throw ExpansionError("mu exponents of summands differ by a non-integer");
                    shift.push_back(static_cast<std::size_t>(rs));
                    valid = std::min(valid, sat_add(k.valid, shift.back()));
                    length = std::max(length, k.c.size() + shift.back());
                }
                const std::size_t upto = std::min({request_, valid, length});
                MuSeries out{false, lead, {}, valid};
                for (std::size_t nu = 0; nu < upto; ++nu) {
                    std::vector<Expr> parts;
                    for (std::size_t i = 0; i < kids.size(); ++i)
                        if (nu >= shift[i]) parts.push_back(kids[i].at(nu - shift[i], b));
                    out.c.push_back(sum(std::move(parts)));
                }
                if (upto < std::min(valid, length)) out.valid = upto;
                return out;
            }
            case NodeKind::prod: {
                MuSeries acc = series(x.children().front());
                for (std::size_t i = 1; i < x.children().size(); ++i) {
                    MuSeries nx = series(x.children()[i]);
                    if (acc.zero || nx.zero) return {true, 0.0, {}, unbounded};
                    acc = cauchy(acc, nx, b);
                }
                return acc;
            }
            case NodeKind::inv: {
                MuSeries u = series(x.children().front());
                if (u.zero) throw ExpansionError("inverse of a zero series");
                std::size_t z = 0;
                while (z < u.c.size() && u.c[z].is_zero()) ++z;
                if (z >= u.c.size())
                    throw ExpansionError("unexpandable inverse: no nonvanishing leading mu-term within reach");
                MuSeries v{false, u.lead - static_cast<double>(z),
                           std::vector<Expr>(u.c.begin() + static_cast<std::ptrdiff_t>(z), u.c.end()),
                           u.valid == unbounded ? unbounded : u.valid - z};
                const std::size_t upto = std::min(request_, v.valid);
                const Expr w0 = inv(v.c.front());
                MuSeries out{false, -v.lead, {w0}, upto};
                for (std::size_t nu = 1; nu < upto; ++nu) {
                    std::vector<Expr> parts;
                    for (std::size_t i = 1; i <= nu; ++i) {
                        Expr ui = v.at(i, b);
                        if (ui.is_zero() || out.c[nu - i].is_zero()) continue;
                        parts.push_back(prod({ui, out.c[nu - i]}));
                    }
                    out.c.push_back(parts.empty() ? zero_expr(b) : prod({scalar(b, -1.0), w0, sum(std::move(parts))}));
                }
                return out;
            }
            default: break;
        }
        throw ExpansionError("unexpandable node");
    }

    MuSeries cauchy(const MuSeries& a, const MuSeries& bser, const BackendPtr& b) const {
        const std::size_t valid = std::min(a.valid, bser.valid);
        const std::size_t length = a.c.size() + bser.c.size() - 1;
        const std::size_t upto = std::min({request_, valid, length});
        MuSeries out{false, a.lead + bser.lead, {}, valid};
        for (std::size_t nu = 0; nu < upto; ++nu) {
            std::vector<Expr> parts;
            for (std::size_t i = 0; i <= nu; ++i) {
                Expr x = a.at(i, b), y = bser.at(nu - i, b);
                if (x.is_zero() || y.is_zero()) continue;
                parts.push_back(prod({x, y}));
            }
            out.c.push_back(parts.empty() ? zero_expr(b) : sum(std::move(parts)));
        }
        if (upto < std::min(valid, length)) out.valid = upto;
        return out;
    }

    std::size_t request_;
    std::unordered_map<const Node*, MuSeries> memo_;
};

}  // namespace detail

struct MuTerm {
    double exponent;
    Expr coefficient;  // mu-free
};

// Integer-step large-mu expansion: e ~ sum_{nu < steps} q_nu mu^{lead - nu}.
// Entries may be zero. Returns the lead exponent and the coefficients.
inline std::pair<double, std::vector<Expr>> mu_ladder(const Expr& e, std::size_t steps) {
    detail::MuExpander ex(steps);
    auto s = ex.series(e);
    if (s.zero) return {0.0, std::vector<Expr>(steps, zero_expr(e.backend()))};
    if (s.valid < steps) throw ExpansionError("expansion order not reachable");
    std::vector<Expr> out(steps, zero_expr(e.backend()));
    for (std::size_t i = 0; i < std::min(steps, s.c.size()); ++i) out[i] = s.c[i];
    return {s.lead, std::move(out)};
}

// First M nonvanishing terms of the large-mu expansion.
inline std::vector<MuTerm> expr_mu_expand(const Expr& e, std::size_t M) {
    std::vector<MuTerm> out;
    if (M == 0 || e.is_zero()) return out;
    const std::size_t cap = 8 * M + 16;
    for (std::size_t request = M;; request = std::min(cap, 2 * request)) {
        detail::MuExpander ex(request);
        auto s = ex.series(e);
        out.clear();
        if (s.zero) return out;
        const std::size_t have = std::min(s.c.size(), s.valid);
        for (std::size_t nu = 0; nu < have && out.size() < M; ++nu)
            if (!s.c[nu].is_zero()) out.push_back({s.lead - static_cast<double>(nu), s.c[nu]});
        const bool complete = s.valid == detail::unbounded && s.c.size() <= request;
        if (out.size() >= M || complete || request >= cap) return out;
    }
}

}  // namespace tpsido
