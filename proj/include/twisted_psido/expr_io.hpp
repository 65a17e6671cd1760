#pragma once

#include <cctype>
#include <cstdio>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "expr.hpp"

namespace tpsido {

inline std::string format_double(double x) {
    if (x == 0.0) x = 0.0;
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string format_complex(cplx c) {
    const double re = c.real(), im = c.imag();
    if (im == 0.0) return format_double(re);
    std::string imag = im == 1.0 ? "i" : im == -1.0 ? "-i" : format_double(im) + "*i";
    if (re == 0.0) return imag;
    if (imag.front() == '-') return "(" + format_double(re) + imag + ")";
    return "(" + format_double(re) + "+" + imag + ")";
}

// Named algebra constants shared by the parser and the printer.
class SymbolTable {
public:
    explicit SymbolTable(BackendPtr backend) : backend_(std::move(backend)) {
        if (backend_->kind() == BackendKind::matrix) {
            for (int j = 0; j < backend_->dim(); ++j) {
                Eigen::MatrixXcd h = backend_->generators()[static_cast<std::size_t>(j)].cast<cplx>().asDiagonal();
                define("H" + std::to_string(j + 1), AlgebraElement(backend_, h));
            }
        }
    }

    const BackendPtr& backend() const { return backend_; }

    void define(const std::string& name, const AlgebraElement& a) {
        require_same(backend_, a.backend());
        for (auto& [n, v] : entries_)
            if (n == name) {
                v = a;
                return;
            }
        entries_.emplace_back(name, a);
    }

    const AlgebraElement* find(std::string_view name) const {
        for (const auto& [n, v] : entries_)
            if (n == name) return &v;
        return nullptr;
    }

    const std::string* name_of(const AlgebraElement& a) const {
        for (const auto& [n, v] : entries_)
            if (v.data() == a.data()) return &n;
        return nullptr;
    }

    const std::vector<std::pair<std::string, AlgebraElement>>& entries() const { return entries_; }

private:
    BackendPtr backend_;
    std::vector<std::pair<std::string, AlgebraElement>> entries_;
};

namespace detail {

inline std::string print_constant(const AlgebraElement& a, const SymbolTable* names) {
    if (auto s = a.as_scalar()) return format_complex(*s);
    if (names)
        if (const auto* n = names->name_of(a)) return *n;
    const auto& b = *a.backend();
    std::string out;
    if (b.kind() == BackendKind::matrix) {
        out = "mat(";
        for (int p = 0; p < b.size(); ++p)
            for (int q = 0; q < b.size(); ++q) {
                if (p || q) out += ", ";
                out += format_complex(a.data()(p, q));
            }
        return out + ")";
    }
    // nctorus: sum of c*U(k)
    std::vector<std::string> terms;
    for (int p = 0; p < b.size(); ++p) {
        const cplx c = a.data()(p, 0);
        if (c == cplx{}) continue;
        std::string u = "U(";
        const auto& k = b.mode(p);
        for (std::size_t j = 0; j < k.size(); ++j) u += (j ? "," : "") + std::to_string(k[j]);
        u += ")";
        terms.push_back(c == cplx{1.0, 0.0} ? u : format_complex(c) + "*" + u);
    }
    out = "(";
    for (std::size_t t = 0; t < terms.size(); ++t) out += (t ? " + " : "") + terms[t];
    return out + ")";
}

}  // namespace detail

// Deterministic printer; output reparses to the same DAG.
inline std::string expr_to_string(const Expr& e, const SymbolTable* names = nullptr) {
    const auto& b = *e.backend();
    switch (e.kind()) {
        case NodeKind::coef: return detail::print_constant(e.coefficient(), names);
        case NodeKind::xi_monomial: {
            std::string out;
            for (int j = 0; j < b.dim(); ++j) {
                const int p = e.exponents()[static_cast<std::size_t>(j)];
                if (!p) continue;
                if (!out.empty()) out += "*";
                out += "xi" + std::to_string(j + 1);
                if (p != 1) out += "^" + std::to_string(p);
            }
            return out;
        }
        case NodeKind::abs_xi_power: return e.power() == 1.0 ? "absxi" : "absxi^" + format_double(e.power());
        case NodeKind::mu_power: return e.power() == 1.0 ? "mu" : "mu^" + format_double(e.power());
        case NodeKind::sum: {
            std::string out = "(";
            bool first = true;
            for (const auto& c : e.children()) {
                std::string t = expr_to_string(c, names);
                if (first) out += t;
                else if (t.front() == '-') out += " - " + t.substr(1);
                else out += " + " + t;
                first = false;
            }
            return out + ")";
        }
        case NodeKind::prod: {
            std::string out;
            std::size_t first = 0;
            const Expr& lead = e.children().front();
            if (lead.kind() == NodeKind::coef && lead.is_central() && *lead.coefficient().as_scalar() == cplx{-1.0, 0.0}) {
                out = "-";
                first = 1;
            }
            for (std::size_t i = first; i < e.children().size(); ++i) {
                if (i > first) out += "*";
                out += expr_to_string(e.children()[i], names);
            }
            return out;
        }
        case NodeKind::inv: return "inv(" + expr_to_string(e.children().front(), names) + ")";
    }
    return "?";
}

namespace detail {

class Parser {
public:
    Parser(std::string_view src, const SymbolTable& names) : src_(src), names_(names), b_(names.backend()) {}

    Expr parse() {
        Expr e = expr();
        skip();
        if (pos_ != src_.size()) fail("unexpected '" + std::string(1, src_[pos_]) + "'");
        return e;
    }

private:
    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError(msg + " in expression \"" + std::string(src_) + "\"", "column " + std::to_string(pos_ + 1));
    }

    void skip() {
        while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }

    bool eat(char c) {
        skip();
        if (pos_ < src_.size() && src_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void expect(char c) {
        if (!eat(c)) fail(std::string("expected '") + c + "'");
    }

    Expr expr() {
        std::vector<Expr> terms{term()};
        for (;;) {
            if (eat('+')) terms.push_back(term());
            else if (eat('-')) terms.push_back(-term());
            else break;
        }
        return terms.size() == 1 ? terms.front() : sum(std::move(terms));
    }

    Expr term() {
        std::vector<Expr> fs{unary()};
        while (eat('*')) fs.push_back(unary());
        return fs.size() == 1 ? fs.front() : prod(std::move(fs));
    }

    Expr unary() {
        if (eat('-')) return -unary();
        if (eat('+')) return unary();
        return power();
    }

    double number() {
        skip();
        const char* begin = src_.data() + pos_;
        char* end = nullptr;
        const std::string tmp(begin, src_.size() - pos_);
        const double v = std::strtod(tmp.c_str(), &end);
        if (end == tmp.c_str()) fail("expected a number");
        pos_ += static_cast<std::size_t>(end - tmp.c_str());
        return v;
    }

    double signed_number() {
        skip();
        double sign = 1.0;
        if (eat('-')) sign = -1.0;
        else if (eat('+')) sign = 1.0;
        if (eat('(')) {
            const double v = signed_number();
            expect(')');
            return sign * v;
        }
        return sign * number();
    }

    Expr power() {
        skip();
        const std::size_t start = pos_;
        auto [base, kind] = atom();
        if (!eat('^')) return base;
        const double p = signed_number();
        if (kind == AtomKind::xi) {
            if (p < 0 || !integral(p)) { pos_ = start; fail("xi powers must be nonnegative integers"); }
            MultiIndex beta = base.exponents();
            for (auto& v : beta) v *= static_cast<int>(p);
            return xi_monomial(b_, beta);
        }
        if (kind == AtomKind::absxi) return abs_xi(b_, p);
        if (kind == AtomKind::mu) return mu_pow(b_, p);
        if (!integral(p)) fail("non-integer power of a general expression");
        Expr f = p < 0 ? inv(base) : base;
        const int k = static_cast<int>(std::abs(p));
        if (k == 0) return one_expr(b_);
        return prod(std::vector<Expr>(static_cast<std::size_t>(k), f));
    }

    enum class AtomKind { other, xi, absxi, mu };

    std::string ident() {
        skip();
        std::size_t s = pos_;
        while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) ++pos_;
        return std::string(src_.substr(s, pos_ - s));
    }

    static bool indexed(const std::string& id, std::string_view prefix, int& j) {
        if (id.size() <= prefix.size() || id.compare(0, prefix.size(), prefix) != 0) return false;
        for (std::size_t i = prefix.size(); i < id.size(); ++i)
            if (!std::isdigit(static_cast<unsigned char>(id[i]))) return false;
        j = std::stoi(id.substr(prefix.size())) - 1;
        return true;
    }

    int axis(int j) const {
        if (j < 0 || j >= b_->dim()) fail("index out of range for dimension " + std::to_string(b_->dim()));
        return j;
    }

    std::pair<Expr, AtomKind> atom() {
        skip();
        if (pos_ >= src_.size()) fail("unexpected end of expression");
        const char c = src_[pos_];
        if (c == '(') {
            ++pos_;
            Expr e = expr();
            expect(')');
            return {e, AtomKind::other};
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return {scalar(b_, number()), AtomKind::other};
        if (!std::isalpha(static_cast<unsigned char>(c)) && c != '_') fail("unexpected '" + std::string(1, c) + "'");
        const std::size_t at = pos_;
        const std::string id = ident();
        int j = 0;
        if (id == "i") return {scalar(b_, I), AtomKind::other};
        if (id == "pi") return {scalar(b_, std::numbers::pi), AtomKind::other};
        if (id == "mu") return {mu_pow(b_, 1.0), AtomKind::mu};
        if (id == "absxi") return {abs_xi(b_, 1.0), AtomKind::absxi};
        if (indexed(id, "xi", j)) return {xi(b_, axis(j)), AtomKind::xi};
        if (id == "inv") {
            expect('(');
            Expr e = expr();
            expect(')');
            return {inv(e), AtomKind::other};
        }
        if (indexed(id, "delta", j)) {
            expect('(');
            Expr e = expr();
            expect(')');
            return {expr_delta(e, axis(j)), AtomKind::other};
        }
        if (indexed(id, "dxi", j)) {
            expect('(');
            Expr e = expr();
            expect(')');
            return {expr_dxi(e, axis(j)), AtomKind::other};
        }
        if (id == "mat") return {matrix_literal(), AtomKind::other};
        if (b_->kind() == BackendKind::nctorus) {
            if (id == "U" && eat('(')) {
                std::vector<int> k;
                do {
                    const double v = signed_number();
                    if (!integral(v)) fail("mode indices must be integers");
                    k.push_back(static_cast<int>(v));
                } while (eat(','));
                expect(')');
                if (static_cast<int>(k.size()) != b_->dim()) fail("mode has wrong dimension");
                if (b_->mode_index(k) < 0) fail("mode outside the Fourier band");
                return {coef(AlgebraElement::monomial(b_, k)), AtomKind::other};
            }
            if (indexed(id, "U", j) && !names_.find(id)) {
                std::vector<int> k(static_cast<std::size_t>(b_->dim()), 0);
                k[static_cast<std::size_t>(axis(j))] = 1;
                return {coef(AlgebraElement::monomial(b_, k)), AtomKind::other};
            }
        }
        if (const auto* a = names_.find(id)) return {coef(*a), AtomKind::other};
        pos_ = at;
        fail("unknown identifier '" + id + "'");
    }

    Expr matrix_literal() {
        if (b_->kind() != BackendKind::matrix) fail("mat(...) needs the matrix backend");
        expect('(');
        const int N = b_->size();
        Eigen::MatrixXcd m(N, N);
        for (int p = 0; p < N; ++p)
            for (int q = 0; q < N; ++q) {
                if (p || q) expect(',');
                Expr v = expr();
                if (v.kind() != NodeKind::coef || !v.is_central()) fail("matrix entries must be numeric constants");
                m(p, q) = *v.coefficient().as_scalar();
            }
        expect(')');
        return coef(AlgebraElement(b_, m));
    }

    std::string_view src_;
    const SymbolTable& names_;
    BackendPtr b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline Expr parse_expr(std::string_view src, const SymbolTable& names) { return detail::Parser(src, names).parse(); }

inline Expr parse_expr(std::string_view src, const BackendPtr& backend) {
    SymbolTable names(backend);
    return parse_expr(src, names);
}

}  // namespace tpsido
