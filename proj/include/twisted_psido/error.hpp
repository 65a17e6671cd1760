#pragma once

#include <stdexcept>
#include <string>

namespace tpsido {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BackendMismatch : public Error {
public:
    using Error::Error;
};

class SingularElement : public Error {
public:
    SingularElement(const std::string& what, double residual, double condition)
        : Error(what), residual_(residual), condition_(condition) {}
    double residual() const { return residual_; }
    double condition() const { return condition_; }

private:
    double residual_;
    double condition_;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ExpansionError : public Error {
public:
    using Error::Error;
};

class SymbolError : public Error {
public:
    using Error::Error;
};

class QuadratureError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& what, std::string location)
        : Error(location.empty() ? what : location + ": " + what), location_(std::move(location)) {}
    const std::string& location() const { return location_; }

private:
    std::string location_;
};

}  // namespace tpsido
