#pragma once

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "twisted_psido/bounded.hpp"
#include "twisted_psido/calculus.hpp"
#include "twisted_psido/expr_io.hpp"
#include "twisted_psido/trace_asym.hpp"

namespace tpsido {

using json = nlohmann::json;

constexpr int config_version = 1;

// ---------------------------------------------------------------- JSON output with 17 significant digits

inline void write_json(std::ostream& os, const json& j, int indent = 2, int depth = 0) {
    const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
    const std::string close(static_cast<std::size_t>(indent * depth), ' ');
    switch (j.type()) {
        case json::value_t::object: {
            if (j.empty()) {
                os << "{}";
                return;
            }
            os << "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) os << ",\n";
                first = false;
                os << pad << json(it.key()).dump() << ": ";
                write_json(os, it.value(), indent, depth + 1);
            }
            os << '\n' << close << '}';
            return;
        }
        case json::value_t::array: {
            if (j.empty()) {
                os << "[]";
                return;
            }
            const bool flat = std::all_of(j.begin(), j.end(), [](const json& x) { return x.is_primitive(); });
            if (flat) {
                os << '[';
                for (std::size_t i = 0; i < j.size(); ++i) {
                    if (i) os << ", ";
                    write_json(os, j[i], indent, depth + 1);
                }
                os << ']';
                return;
            }
            os << "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) os << ",\n";
                os << pad;
                write_json(os, j[i], indent, depth + 1);
            }
            os << '\n' << close << ']';
            return;
        }
        case json::value_t::number_float: {
            const double x = j.get<double>();
            os << (std::isfinite(x) ? format_double(x) : "null");
            return;
        }
        default: os << j.dump();
    }
}

inline std::string json_text(const json& j) {
    std::ostringstream os;
    write_json(os, j);
    os << '\n';
    return os.str();
}

// ---------------------------------------------------------------- configuration

struct SymbolDef {
    std::string name;
    Symbol symbol;
    std::vector<std::string> sources;
};

struct TraceDef {
    std::string op;
    std::optional<std::string> amplitude;
    std::optional<std::string> oracle;  // expression; defaults to the truncated composed symbol
    std::vector<double> fit_angles;
    std::vector<double> fit_radii;
    int fit_subtract = 2;
};

struct SchurDef {
    std::string kernel = "exponential";  // or "symbol"
    double rate = 1.0;
    std::optional<std::string> symbol;
    double L = 20.0;
    int G = 512;
};

struct ScenarioConfig {
    int version = config_version;
    BackendPtr backend;
    TwistMatrix twist{1};
    std::unique_ptr<SymbolTable> names;
    std::vector<SymbolDef> symbols;
    double m = 2.0;
    int truncation = 3;
    int terms = 2;
    int power = 1;
    SectorSpec sector{};
    QuadratureSpec quadrature{};
    std::optional<std::pair<std::string, std::string>> compose;
    std::optional<std::string> adjoint;
    std::optional<std::string> parametrix;
    std::optional<TraceDef> trace;
    std::optional<SchurDef> schur;
    std::optional<std::string> output_dir;

    const SymbolDef& symbol(const std::string& name, const std::string& where) const {
        for (const auto& s : symbols)
            if (s.name == name) return s;
        throw ConfigError("unknown symbol '" + name + "'", where);
    }
};

namespace detail {

// A JSON node together with its pointer, for error locations.
class Field {
public:
    Field(const json& j, std::string ptr) : j_(&j), ptr_(std::move(ptr)) {}

    const json& value() const { return *j_; }
    const std::string& where() const { return ptr_; }
    std::string where(const std::string& key) const { return ptr_ + "/" + key; }

    bool has(const std::string& key) const { return j_->is_object() && j_->contains(key); }

    Field at(const std::string& key) const {
        if (!j_->is_object()) fail("expected an object");
        if (!j_->contains(key)) throw ConfigError("missing required field '" + key + "'", ptr_.empty() ? "/" : ptr_);
        return {(*j_)[key], where(key)};
    }
    Field at(std::size_t i) const {
        if (i >= size()) fail("index " + std::to_string(i) + " out of range");
        return {(*j_)[i], ptr_ + "/" + std::to_string(i)};
    }

    std::size_t size() const {
        if (!j_->is_array()) fail("expected an array");
        return j_->size();
    }

    double number() const {
        if (!j_->is_number()) fail("expected a number");
        return j_->get<double>();
    }
    int integer() const {
        if (!j_->is_number_integer()) fail("expected an integer");
        return j_->get<int>();
    }
    std::string string() const {
        if (!j_->is_string()) fail("expected a string");
        return j_->get<std::string>();
    }
    cplx complex() const {
        if (j_->is_number()) return j_->get<double>();
        if (j_->is_array() && j_->size() == 2 && (*j_)[0].is_number() && (*j_)[1].is_number())
            return {(*j_)[0].get<double>(), (*j_)[1].get<double>()};
        fail("expected a number or a [re, im] pair");
        return {};
    }

    [[noreturn]] void fail(const std::string& what) const { throw ConfigError(what, ptr_.empty() ? "/" : ptr_); }

private:
    const json* j_;
    std::string ptr_;
};

inline std::vector<double> number_list(const Field& n) {
    std::vector<double> out;
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(n.at(i).number());
    return out;
}

inline Eigen::MatrixXd real_matrix(const Field& n, int rows, int cols) {
    if (static_cast<int>(n.size()) != rows) n.fail("expected " + std::to_string(rows) + " rows");
    Eigen::MatrixXd M(rows, cols);
    for (int i = 0; i < rows; ++i) {
        auto r = n.at(static_cast<std::size_t>(i));
        if (static_cast<int>(r.size()) != cols) r.fail("expected " + std::to_string(cols) + " entries");
        for (int j = 0; j < cols; ++j) M(i, j) = r.at(static_cast<std::size_t>(j)).number();
    }
    return M;
}

inline BackendPtr parse_backend(const Field& n) {
    const std::string kind = n.at("kind").string();
    try {
        if (kind == "scalar") return Backend::scalar(n.has("n") ? n.at("n").integer() : 1);
        if (kind == "matrix") {
            auto H = n.at("H");
            const int N = n.at("N").integer();
            std::vector<Eigen::VectorXd> diags;
            for (std::size_t j = 0; j < H.size(); ++j) {
                auto v = number_list(H.at(j));
                if (static_cast<int>(v.size()) != N)
                    H.at(j).fail("diagonal has " + std::to_string(v.size()) + " entries, expected N = " + std::to_string(N));
                diags.push_back(Eigen::Map<Eigen::VectorXd>(v.data(), N));
            }
            return Backend::matrix(diags);
        }
        if (kind == "nctorus") {
            auto T = n.at("theta");
            const int dim = static_cast<int>(T.size());
            return Backend::nctorus(real_matrix(T, dim, dim), n.at("K").integer());
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what(), n.where());
    }
    n.at("kind").fail("unknown backend kind '" + kind + "' (scalar, matrix, nctorus)");
}

inline TwistMatrix parse_twist(const Field& n, int dim) {
    const Eigen::MatrixXd B = real_matrix(n, dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j)
            if (B(i, j) != -B(j, i))
                throw ConfigError("twist must be skew-symmetric: entry [" + std::to_string(i) + "][" +
                                      std::to_string(j) + "] = " + format_double(B(i, j)) + " but [" +
                                      std::to_string(j) + "][" + std::to_string(i) + "] = " + format_double(B(j, i)),
                                  n.where() + "/" + std::to_string(i) + "/" + std::to_string(j));
    return TwistMatrix(B);
}

inline AlgebraElement parse_constant(const Field& n, const BackendPtr& b) {
    if (b->kind() == BackendKind::matrix) {
        const int N = b->size();
        if (static_cast<int>(n.size()) != N) n.fail("expected " + std::to_string(N) + " rows");
        Eigen::MatrixXcd M(N, N);
        for (int i = 0; i < N; ++i) {
            auto r = n.at(static_cast<std::size_t>(i));
            if (static_cast<int>(r.size()) != N) r.fail("expected " + std::to_string(N) + " entries");
            for (int j = 0; j < N; ++j) M(i, j) = r.at(static_cast<std::size_t>(j)).complex();
        }
        return {b, M};
    }
    if (b->kind() == BackendKind::scalar) return AlgebraElement::constant(b, n.complex());
    // nctorus: list of {"mode": [...], "value": c}
    AlgebraElement s = AlgebraElement::zero(b);
    for (std::size_t i = 0; i < n.size(); ++i) {
        auto e = n.at(i);
        std::vector<int> k;
        auto mode = e.at("mode");
        for (std::size_t j = 0; j < mode.size(); ++j) k.push_back(mode.at(j).integer());
        try {
            s = s + AlgebraElement::monomial(b, k, e.at("value").complex());
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& err) {
            throw ConfigError(err.what(), e.where());
        }
    }
    return s;
}

inline Expr parse_expression(const Field& n, const SymbolTable& names) {
    const std::string src = n.string();
    try {
        return parse_expr(src, names);
    } catch (const ConfigError& e) {
        throw ConfigError(e.what(), n.where());
    }
}

inline SymbolDef parse_symbol(const std::string& name, const Field& n, const ScenarioConfig& cfg) {
    SymbolDef def;
    def.name = name;
    const double order = n.at("order").number();
    SymbolKind kind = SymbolKind::classical;
    if (n.has("kind")) {
        const auto k = n.at("kind").string();
        if (k == "parametric")
            kind = SymbolKind::parametric;
        else if (k != "classical")
            n.at("kind").fail("symbol kind must be classical or parametric");
    }
    const double weight = n.has("mu_weight") ? n.at("mu_weight").number() : 0.0;
    auto comps = n.at("components");
    std::vector<HomComponent> out;
    for (std::size_t j = 0; j < comps.size(); ++j) {
        auto c = comps.at(j);
        const double degree = order - static_cast<double>(j);
        if (c.value().is_string()) {
            def.sources.push_back(c.string());
            out.push_back(component(degree, parse_expression(c, *cfg.names), kind));
            continue;
        }
        auto e = c.at("expr");
        def.sources.push_back(e.string());
        HomComponent h = component(degree, parse_expression(e, *cfg.names), kind);
        if (c.has("extension")) {
            const auto x = c.at("extension").string();
            if (x == "cutoff")
                h.extension = Extension::cutoff;
            else if (x == "global")
                h.extension = Extension::global;
            else
                c.at("extension").fail("extension must be global or cutoff");
        }
        if (c.has("interior")) {
            const auto x = c.at("interior").string();
            if (x == "zero")
                h.interior = Interior::zero;
            else if (x == "formula")
                h.interior = Interior::formula;
            else
                c.at("interior").fail("interior must be formula or zero");
        }
        out.push_back(h);
    }
    if (out.empty()) comps.fail("a symbol needs at least one component");
    const int N = std::max(static_cast<int>(out.size()), cfg.truncation);
    try {
        def.symbol = make_symbol(out, order, N, cfg.twist, cfg.backend, kind, weight);
    } catch (const Error& e) {
        throw ConfigError(e.what(), n.where());
    }
    return def;
}

inline void check_keys(const Field& n, std::initializer_list<const char*> allowed) {
    if (!n.value().is_object()) n.fail("expected an object");
    for (auto it = n.value().begin(); it != n.value().end(); ++it)
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
            throw ConfigError("unknown field '" + it.key() + "'", n.where(it.key()));
}

inline std::pair<int, int> line_column(const std::string& text, std::size_t byte) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

}  // namespace detail

inline ScenarioConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        auto [line, col] = detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1);
        throw ConfigError("malformed JSON", "line " + std::to_string(line) + ", column " + std::to_string(col));
    }
    detail::Field root(doc, "");
    detail::check_keys(root, {"version", "backend", "twist", "constants", "symbols", "m", "truncation", "terms",
                              "power", "sector", "quadrature", "compose", "adjoint", "parametrix", "trace", "schur",
                              "output", "description"});
    ScenarioConfig cfg;
    cfg.version = root.at("version").integer();
    if (cfg.version != config_version)
        root.at("version").fail("unsupported config version " + std::to_string(cfg.version) + " (expected " +
                                std::to_string(config_version) + ")");
    cfg.backend = detail::parse_backend(root.at("backend"));
    const int n = cfg.backend->dim();
    cfg.twist = root.has("twist") ? detail::parse_twist(root.at("twist"), n) : TwistMatrix(n);
    cfg.names = std::make_unique<SymbolTable>(cfg.backend);
    if (root.has("constants")) {
        auto c = root.at("constants");
        if (!c.value().is_object()) c.fail("expected an object of named constants");
        for (auto it = c.value().begin(); it != c.value().end(); ++it)
            cfg.names->define(it.key(), detail::parse_constant(c.at(it.key()), cfg.backend));
    }
    if (root.has("m")) cfg.m = root.at("m").number();
    if (root.has("truncation")) cfg.truncation = root.at("truncation").integer();
    if (root.has("terms")) cfg.terms = root.at("terms").integer();
    if (root.has("power")) cfg.power = root.at("power").integer();
    if (cfg.truncation < 1) root.at("truncation").fail("truncation must be >= 1");
    if (cfg.terms < 1) root.at("terms").fail("terms must be >= 1");
    if (cfg.power < 1) root.at("power").fail("power must be >= 1");
    if (cfg.m != std::round(cfg.m) || cfg.m < 1) root.at("m").fail("m must be a positive integer");

    if (root.has("sector")) {
        auto s = root.at("sector");
        detail::check_keys(s, {"arg_min", "arg_max", "r_min", "r_max", "angles", "radii"});
        if (s.has("arg_min")) cfg.sector.arg_min = s.at("arg_min").number();
        if (s.has("arg_max")) cfg.sector.arg_max = s.at("arg_max").number();
        if (s.has("r_min")) cfg.sector.r_min = s.at("r_min").number();
        if (s.has("r_max")) cfg.sector.r_max = s.at("r_max").number();
        if (s.has("angles")) cfg.sector.angles = s.at("angles").integer();
        if (s.has("radii")) cfg.sector.radii = s.at("radii").integer();
        try {
            cfg.sector.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what(), s.where());
        }
    }
    cfg.quadrature.rays = cfg.sector;
    if (root.has("quadrature")) {
        auto q = root.at("quadrature");
        detail::check_keys(q, {"rel_tol", "circle_points"});
        if (q.has("rel_tol")) cfg.quadrature.rel_tol = q.at("rel_tol").number();
        if (q.has("circle_points")) cfg.quadrature.circle_points = q.at("circle_points").integer();
        try {
            cfg.quadrature.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what(), q.where());
        }
    }

    if (root.has("symbols")) {
        auto s = root.at("symbols");
        if (!s.value().is_object()) s.fail("expected an object of named symbols");
        for (auto it = s.value().begin(); it != s.value().end(); ++it) {
            detail::check_keys(s.at(it.key()), {"order", "kind", "mu_weight", "components"});
            cfg.symbols.push_back(detail::parse_symbol(it.key(), s.at(it.key()), cfg));
        }
    }
    auto symbol_ref = [&](const detail::Field& n) {
        const auto name = n.string();
        cfg.symbol(name, n.where());
        return name;
    };
    if (root.has("compose")) {
        auto c = root.at("compose");
        detail::check_keys(c, {"left", "right"});
        cfg.compose = std::make_pair(symbol_ref(c.at("left")), symbol_ref(c.at("right")));
    }
    if (root.has("adjoint")) {
        auto c = root.at("adjoint");
        detail::check_keys(c, {"symbol"});
        cfg.adjoint = symbol_ref(c.at("symbol"));
    }
    if (root.has("parametrix")) {
        auto c = root.at("parametrix");
        detail::check_keys(c, {"symbol"});
        cfg.parametrix = symbol_ref(c.at("symbol"));
    }
    if (root.has("trace")) {
        auto t = root.at("trace");
        detail::check_keys(t, {"operator", "amplitude", "oracle", "fit"});
        TraceDef d;
        d.op = symbol_ref(t.at("operator"));
        if (t.has("amplitude")) d.amplitude = symbol_ref(t.at("amplitude"));
        if (t.has("oracle")) {
            d.oracle = t.at("oracle").string();
            detail::parse_expression(t.at("oracle"), *cfg.names);
        }
        if (t.has("fit")) {
            auto f = t.at("fit");
            detail::check_keys(f, {"angles", "radii", "subtract"});
            if (f.has("angles")) d.fit_angles = detail::number_list(f.at("angles"));
            d.fit_radii = detail::number_list(f.at("radii"));
            if (f.has("subtract")) d.fit_subtract = f.at("subtract").integer();
            if (d.fit_angles.empty()) d.fit_angles = {cfg.sector.center()};
            for (std::size_t i = 0; i < d.fit_angles.size(); ++i)
                if (!cfg.sector.contains(std::polar(1.0, d.fit_angles[i])))
                    f.at("angles").at(i).fail("fit ray lies outside the sector");
            if (d.fit_radii.size() < 2) f.at("radii").fail("a fit needs at least two radii");
        }
        cfg.trace = d;
    }
    if (root.has("schur")) {
        auto s = root.at("schur");
        detail::check_keys(s, {"kernel", "rate", "symbol", "L", "G"});
        SchurDef d;
        if (s.has("kernel")) d.kernel = s.at("kernel").string();
        if (d.kernel != "exponential" && d.kernel != "symbol") s.at("kernel").fail("kernel must be exponential or symbol");
        if (s.has("rate")) d.rate = s.at("rate").number();
        if (s.has("L")) d.L = s.at("L").number();
        if (s.has("G")) d.G = s.at("G").integer();
        if (d.kernel == "symbol") d.symbol = symbol_ref(s.at("symbol"));
        if (!(d.L > 0)) s.at("L").fail("L must be positive");
        if (d.G < 2) s.at("G").fail("G must be >= 2");
        cfg.schur = d;
    }
    if (root.has("output")) {
        auto o = root.at("output");
        detail::check_keys(o, {"dir"});
        cfg.output_dir = o.at("dir").string();
    }
    return cfg;
}

inline ScenarioConfig load_config(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot read config file", p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// ---------------------------------------------------------------- serialization of results

inline const char* to_string(Extension e) { return e == Extension::global ? "global" : "cutoff"; }
inline const char* to_string(Interior i) { return i == Interior::formula ? "formula" : "zero"; }

inline json symbol_json(const Symbol& s, const SymbolTable& names) {
    json j;
    j["kind"] = s.parametric() ? "parametric" : "classical";
    j["order"] = s.order;
    j["mu_weight"] = s.mu_weight;
    j["components"] = json::array();
    for (const auto& c : s.components)
        j["components"].push_back({{"degree", c.degree},
                                   {"expr", expr_to_string(c.expr, &names)},
                                   {"extension", to_string(c.extension)},
                                   {"interior", to_string(c.interior)}});
    return j;
}

struct RunResult {
    int status = 0;
    std::vector<std::filesystem::path> written;
    std::vector<std::string> lines;  // human-readable summary
};

class Scenario {
public:
    Scenario(const ScenarioConfig& cfg, std::filesystem::path out, std::uint64_t seed)
        : cfg_(cfg), out_(std::move(out)), seed_(seed) {}

    RunResult run(const std::string& command) {
        if (command == "compose") return compose();
        if (command == "adjoint") return adjoint();
        if (command == "parametrix") return parametrix_cmd();
        if (command == "trace-expansion") return trace();
        if (command == "schur") return schur();
        if (command == "verify") return verify();
        throw Error("unknown command '" + command + "'");
    }

private:
    const ScenarioConfig& cfg_;
    std::filesystem::path out_;
    std::uint64_t seed_;
    RunResult res_;

    void write(const std::string& name, const std::string& text) {
        std::filesystem::create_directories(out_);
        const auto p = out_ / name;
        std::ofstream os(p, std::ios::binary);
        os << text;
        if (!os) throw Error("cannot write " + p.string());
        res_.written.push_back(p);
    }

    const Symbol& sym(const std::string& name) const { return cfg_.symbol(name, "").symbol; }

    template <class T>
    const T& need(const std::optional<T>& v, const char* section) const {
        if (!v) throw ConfigError(std::string("command needs a '") + section + "' section", "/");
        return *v;
    }

    RunResult compose() {
        const auto& [l, r] = need(cfg_.compose, "compose");
        const auto& f = sym(l);
        const auto& g = sym(r);
        const int N = std::min({cfg_.truncation, f.truncation(), g.truncation()});
        auto h = sharp_compose(f, g, N);
        json j{{"command", "compose"}, {"left", l}, {"right", r}, {"truncation", N}};
        j["result"] = symbol_json(h, *cfg_.names);
        write("compose.json", json_text(j));
        for (const auto& c : h.components)
            res_.lines.push_back("degree " + format_double(c.degree) + ": " + expr_to_string(c.expr, cfg_.names.get()));
        return res_;
    }

    RunResult adjoint() {
        const auto& name = need(cfg_.adjoint, "adjoint");
        const auto& f = sym(name);
        const int N = std::min(cfg_.truncation, f.truncation());
        auto h = adjoint_expand(f, N);
        json j{{"command", "adjoint"}, {"symbol", name}, {"truncation", N}};
        j["result"] = symbol_json(h, *cfg_.names);
        write("adjoint.json", json_text(j));
        for (const auto& c : h.components)
            res_.lines.push_back("degree " + format_double(c.degree) + ": " + expr_to_string(c.expr, cfg_.names.get()));
        return res_;
    }

    RunResult parametrix_cmd() {
        const auto& name = need(cfg_.parametrix, "parametrix");
        const auto& f = sym(name);
        const int m = static_cast<int>(cfg_.m);
        const int N = std::min(cfg_.truncation, f.truncation());
        auto rep = ellipticity_check(f, m, cfg_.sector);
        json j{{"command", "parametrix"}, {"symbol", name}, {"m", m}, {"truncation", N}};
        j["ellipticity"] = {{"pass", rep.pass},
                            {"samples", rep.samples},
                            {"worst_condition", rep.worst_condition},
                            {"worst_residual", rep.worst_residual}};
        if (!rep.pass) {
            j["ellipticity"]["failure"] = rep.failure;
            write("parametrix.json", json_text(j));
            throw SymbolError("not elliptic with parameter: " + rep.failure);
        }
        auto g = parametrix(f, m, N, cfg_.sector);
        j["result"] = symbol_json(g, *cfg_.names);
        write("parametrix.json", json_text(j));
        for (const auto& c : g.components)
            res_.lines.push_back("degree " + format_double(c.degree) + ": " + expr_to_string(c.expr, cfg_.names.get()));
        return res_;
    }

    Symbol amplitude(const TraceDef& d) const {
        if (d.amplitude) return sym(*d.amplitude);
        return make_symbol({component(0, one_expr(cfg_.backend))}, 0, 1, cfg_.twist, cfg_.backend);
    }

    RunResult trace() {
        const auto& d = need(cfg_.trace, "trace");
        const auto& f = sym(d.op);
        const int m = static_cast<int>(cfg_.m);
        auto e = trace_expansion_full(amplitude(d), f, m, cfg_.power, cfg_.terms, cfg_.sector, cfg_.quadrature);
        json j{{"command", "trace-expansion"}, {"operator", d.op}};
        j["expansion"] = to_json(e);
        write("trace_expansion.csv", to_csv(e));
        for (const auto& t : e.terms)
            if (t.mu_value != cplx{})
                res_.lines.push_back(to_string(t.kind) + " mu^" + format_double(t.mu_exponent) + ": " +
                                     format_complex(t.mu_value) + "  (-lambda)^" + format_double(t.lambda_exponent) +
                                     ": " + format_complex(t.lambda_value));
        if (!d.fit_radii.empty()) {
            auto rep = run_fit(d, e);
            write("fit.csv", to_csv(rep));
            write("fit_lines.csv", fit_lines_csv(rep));
            j["fit"] = json::array();
            for (const auto& l : rep.lines)
                j["fit"].push_back({{"angle", l.angle},
                                    {"subtracted", l.subtracted},
                                    {"slope", l.slope},
                                    {"predicted", std::isfinite(l.predicted) ? json(l.predicted) : json()},
                                    {"deviation", std::isfinite(l.deviation) ? json(l.deviation) : json()}});
        }
        write("trace_expansion.json", json_text(j));
        return res_;
    }

    FitReport run_fit(const TraceDef& d, const TraceExpansion& e) const {
        std::function<cplx(cplx)> oracle;
        if (d.oracle) {
            Expr x = parse_expr(*d.oracle, *cfg_.names);
            oracle = [x, q = cfg_.quadrature](cplx mu) { return trace_quadrature_oracle(x, mu, q); };
        } else {
            const auto& f = sym(d.op);
            Symbol a = amplitude(d);
            while (a.truncation() < e.J)
                a.components.push_back({a.order - a.truncation(), zero_expr(a.backend), Extension::global, Interior::formula});
            auto G = resolvent_power_symbol(parametrix(f, static_cast<int>(cfg_.m), e.J, cfg_.sector), cfg_.power, e.J);
            oracle = symbol_oracle(sharp_compose(a, G, e.J), cfg_.quadrature);
        }
        return expansion_fit(e, oracle, d.fit_angles, d.fit_radii, static_cast<std::size_t>(d.fit_subtract));
    }

    struct SchurOutcome {
        SchurBound bound;
        double measured;
        bool dominance;
    };

    SchurOutcome schur_numbers(const SchurDef& d) const {
        if (d.kernel == "exponential") {
            const double rate = d.rate;
            auto kg = kernel_grid(d.L, d.G, [rate](double x, double y) { return std::exp(-rate * std::abs(x - y)); });
            auto b = schur_bound(kg);
            const double m = discretized_opnorm(kg);
            return {b, m, m <= b.bound + 1e-6};
        }
        const auto& f = sym(*d.symbol);
        if (f.parametric()) throw SymbolError("kernel quadrature takes a classical symbol");
        if (f.order > -f.backend->dim() - 1)
            throw DomainError("kernel integral needs order <= -n - 1; got " + format_double(f.order));
        // on a uniform grid the integral depends on x - y only; the action is applied per pair
        const detail::SymbolValues values(f);
        const double h = 2 * d.L / (d.G - 1);
        std::vector<Eigen::MatrixXcd> by_offset(static_cast<std::size_t>(2 * d.G - 1));
        parallel_for(by_offset.size(), [&](std::size_t k) {
            by_offset[k] = difference_kernel(values, (static_cast<double>(k) - (d.G - 1)) * h);
        });
        const bool act = f.backend->kind() == BackendKind::matrix;
        auto lookup = [&](double x, double y) -> Eigen::MatrixXcd {
            const long i = std::lround((x + d.L) / h), j = std::lround((y + d.L) / h);
            const Eigen::MatrixXcd& K = by_offset[static_cast<std::size_t>(i - j + d.G - 1)];
            return act ? alg_alpha(AlgebraElement(f.backend, K), {-x}).data() : K;
        };
        auto b = schur_bound(kernel_grid(d.L, d.G, BlockKernel(lookup)));
        const double m = discretized_opnorm(d.L, d.G, lookup);
        return {b, m, m <= b.bound + 1e-6};
    }

    RunResult schur() {
        const auto& d = need(cfg_.schur, "schur");
        auto s = schur_numbers(d);
        json j{{"command", "schur"},
               {"kernel", d.kernel},
               {"L", d.L},
               {"G", d.G},
               {"alpha", s.bound.alpha},
               {"beta", s.bound.beta},
               {"bound", s.bound.bound},
               {"positive_bound", s.bound.positive_bound},
               {"measured", s.measured},
               {"dominance", s.dominance}};
        write("schur.json", json_text(j));
        write("schur.csv", "alpha,beta,bound,positive_bound,measured,dominance\n" + format_double(s.bound.alpha) + "," +
                               format_double(s.bound.beta) + "," + format_double(s.bound.bound) + "," +
                               format_double(s.bound.positive_bound) + "," + format_double(s.measured) + "," +
                               (s.dominance ? "true" : "false") + "\n");
        res_.lines.push_back("bound 4 sqrt(alpha beta) = " + format_double(s.bound.bound));
        res_.lines.push_back("measured = " + format_double(s.measured));
        res_.lines.push_back(std::string("dominance: ") + (s.dominance ? "pass" : "fail"));
        if (!s.dominance) res_.status = 1;
        return res_;
    }

    // ---------------------------------------------------------------- verify

    struct Check {
        std::string name;
        bool pass;
        std::string detail;
    };

    std::vector<double> random_xi(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> r(0.5, 2.0), a(0.0, 2 * std::numbers::pi);
        const int n = cfg_.backend->dim();
        std::vector<double> x(static_cast<std::size_t>(n));
        std::normal_distribution<double> g;
        double s = 0.0;
        for (auto& v : x) {
            v = g(rng);
            s += v * v;
        }
        const double rr = r(rng) / std::sqrt(s);
        for (auto& v : x) v *= rr;
        (void)a;
        return x;
    }

    cplx random_mu(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> r(0.5, 2.0), t(cfg_.sector.arg_min, cfg_.sector.arg_max);
        return std::polar(r(rng), t(rng));
    }

    static double max_diff(const Expr& a, const Expr& b, const std::vector<std::pair<std::vector<double>, cplx>>& pts) {
        double w = 0.0;
        for (const auto& [x, mu] : pts) w = std::max(w, alg_norm(expr_eval(a, x, mu) - expr_eval(b, x, mu)));
        return w;
    }

    RunResult verify() {
        std::vector<Check> checks;
        std::mt19937_64 rng(seed_);
        std::vector<std::pair<std::vector<double>, cplx>> pts;
        for (int i = 0; i < 20; ++i) {
            auto x = random_xi(rng);
            pts.emplace_back(x, random_mu(rng));
        }
        auto guarded = [&](const std::string& name, auto&& body) {
            try {
                checks.push_back(body());
            } catch (const std::exception& e) {
                checks.push_back({name, false, e.what()});
            }
        };

        for (const auto& s : cfg_.symbols)
            guarded(s.name + " homogeneity", [&]() -> Check {
                double worst = 0.0;
                for (const auto& c : s.symbol.components)
                    for (double t : {0.5, 2.0, 7.0})
                        for (const auto& [x, mu] : pts) {
                            std::vector<double> y = x;
                            double r2 = 0.0;
                            for (auto& v : y) r2 += v * v;
                            if (c.extension == Extension::cutoff && (r2 < 1.0 || t * t * r2 < 1.0)) continue;
                            for (auto& v : y) v *= t;
                            const double tw = s.symbol.parametric() ? t : 1.0;
                            auto lhs = expr_eval(c.expr, y, tw * mu);
                            auto rhs = std::pow(t, c.degree) * expr_eval(c.expr, x, mu);
                            worst = std::max(worst, alg_norm(lhs - rhs) / std::max(1.0, alg_norm(rhs)));
                        }
                return {s.name + " homogeneity", worst <= 1e-10, "max rel " + format_double(worst)};
            });

        if (cfg_.compose) {
            const auto& [l, r] = *cfg_.compose;
            guarded("j ≤ 1 twist-independence", [&]() -> Check {
                Symbol f = sym(l), g = sym(r);
                const int N = std::min({2, f.truncation(), g.truncation()});
                auto twisted = sharp_compose(f, g, N);
                f.twist = g.twist = TwistMatrix(cfg_.backend->dim());
                auto plain = sharp_compose(f, g, N);
                double w = 0.0;
                for (int j = 0; j < N; ++j) w = std::max(w, max_diff(twisted.expr(j), plain.expr(j), pts));
                return {"j ≤ 1 twist-independence", w <= 1e-10, "max diff " + format_double(w)};
            });
            guarded("associativity to truncation", [&]() -> Check {
                const auto& f = sym(l);
                const auto& g = sym(r);
                const int N = std::min({cfg_.truncation, f.truncation(), g.truncation()});
                auto lhs = sharp_compose(sharp_compose(f, g, N), f, N);
                auto rhs = sharp_compose(f, sharp_compose(g, f, N), N);
                double w = 0.0;
                for (int j = 0; j < N; ++j) w = std::max(w, max_diff(lhs.expr(j), rhs.expr(j), pts));
                return {"associativity to truncation", w <= 1e-8, "max diff " + format_double(w)};
            });
        }
        if (cfg_.adjoint)
            guarded("adjoint involution", [&]() -> Check {
                const auto& f = sym(*cfg_.adjoint);
                const int N = std::min(cfg_.truncation, f.truncation());
                auto back = adjoint_expand(adjoint_expand(f, N), N);
                double w = 0.0;
                for (int j = 0; j < N; ++j) w = std::max(w, max_diff(back.expr(j), f.expr(j), pts));
                return {"adjoint involution", w <= 1e-8, "max diff " + format_double(w)};
            });
        if (cfg_.parametrix)
            guarded("parametrix identity", [&]() -> Check {
                const auto& f = sym(*cfg_.parametrix);
                const int m = static_cast<int>(cfg_.m);
                const int N = std::min(cfg_.truncation, f.truncation());
                auto g = parametrix(f, m, N, cfg_.sector);
                auto id = sharp_compose(subtract_mu_power(f, m), g, N);
                const auto one = AlgebraElement::identity(cfg_.backend);
                double w = 0.0;
                for (const auto& [x, mu] : pts) {
                    w = std::max(w, alg_norm(expr_eval(id.expr(0), x, mu) - one));
                    for (int j = 1; j < N; ++j) w = std::max(w, alg_norm(expr_eval(id.expr(j), x, mu)));
                }
                return {"parametrix identity", w <= 1e-8, "max residual " + format_double(w)};
            });
        if (cfg_.trace) {
            const auto& d = *cfg_.trace;
            guarded("power coefficients ray-independent", [&]() -> Check {
                const auto& f = sym(d.op);
                const int m = static_cast<int>(cfg_.m);
                auto G = resolvent_power_symbol(parametrix(f, m, cfg_.terms, cfg_.sector), cfg_.power, cfg_.terms);
                Symbol a = amplitude(d);
                while (a.truncation() < cfg_.terms)
                    a.components.push_back({a.order - a.truncation(), zero_expr(a.backend), Extension::global, Interior::formula});
                auto A = sharp_compose(a, G, cfg_.terms);
                double w = 0.0;
                for (const auto& c : A.components) {
                    if (c.extension != Extension::global || c.expr.is_zero()) continue;
                    const cplx ref = coeff_power(c, std::polar(1.0, cfg_.sector.center()), cfg_.quadrature).c;
                    for (double t : cfg_.sector.angle_samples()) {
                        const cplx v = coeff_power(c, std::polar(1.0, t), cfg_.quadrature).c;
                        if (std::abs(ref) > 0) w = std::max(w, std::abs(v - ref) / std::abs(ref));
                    }
                }
                return {"power coefficients ray-independent", w <= 1e-6, "max rel spread " + format_double(w)};
            });
            if (!d.fit_radii.empty())
                guarded("expansion fit slopes", [&]() -> Check {
                    const auto& f = sym(d.op);
                    auto e = trace_expansion_full(amplitude(d), f, static_cast<int>(cfg_.m), cfg_.power, cfg_.terms,
                                                  cfg_.sector, cfg_.quadrature);
                    auto rep = run_fit(d, e);
                    double w = 0.0;
                    for (const auto& l : rep.lines)
                        if (std::isfinite(l.deviation)) w = std::max(w, l.deviation);
                    return {"expansion fit slopes", rep.within(0.2), "max deviation " + format_double(w)};
                });
        }
        if (cfg_.schur)
            guarded("schur dominance", [&]() -> Check {
                auto s = schur_numbers(*cfg_.schur);
                return {"schur dominance", s.dominance,
                        "measured " + format_double(s.measured) + " <= bound " + format_double(s.bound.bound)};
            });

        json j{{"command", "verify"}, {"seed", seed_}, {"checks", json::array()}};
        bool all = true;
        std::size_t width = 0;
        for (const auto& c : checks) width = std::max(width, c.name.size());
        for (const auto& c : checks) {
            all = all && c.pass;
            j["checks"].push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
            res_.lines.push_back(c.name + ": " + (c.pass ? "pass" : "fail") + "  (" + c.detail + ")");
        }
        j["pass"] = all;
        write("verify.json", json_text(j));
        res_.status = all ? 0 : 1;
        return res_;
    }
};

inline RunResult run_scenario(const ScenarioConfig& cfg, const std::string& command, const std::filesystem::path& out,
                              std::uint64_t seed = 1) {
    return Scenario(cfg, out, seed).run(command);
}

inline std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const SymbolError*>(&e)) return "symbol";
    if (dynamic_cast<const DomainError*>(&e)) return "domain";
    if (dynamic_cast<const QuadratureError*>(&e)) return "quadrature";
    if (dynamic_cast<const ExpansionError*>(&e)) return "expansion";
    if (dynamic_cast<const SingularElement*>(&e)) return "singular";
    if (dynamic_cast<const BackendMismatch*>(&e)) return "backend";
    return "error";
}

inline json failure_json(const std::exception& e) {
    json j{{"status", "failed"}, {"error", error_kind(e)}, {"message", e.what()}};
    if (auto* c = dynamic_cast<const ConfigError*>(&e)) j["location"] = c->location();
    return j;
}

}  // namespace tpsido
