#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sac {

// Base class for every error the library raises on purpose.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer dimension disagreement.
class shape_error : public error {
public:
    explicit shape_error(const std::string& msg) : error(msg) {}
};

// Non-finite or otherwise malformed numeric input.
class invalid_input_error : public error {
public:
    explicit invalid_input_error(const std::string& msg) : error(msg) {}
};

// Class index or element index out of range.
class index_error : public error {
public:
    explicit index_error(const std::string& msg) : error(msg) {}
};

// Bad run configuration (split sizes, kernel mismatch, empty pools, ...).
class config_error : public error {
public:
    explicit config_error(const std::string& msg) : error(msg) {}
};

// Checkpoint / record file problems.
class io_error : public error {
public:
    explicit io_error(const std::string& msg) : error(msg) {}
};

// Training diverged; carries the epoch where the loss went non-finite.
class train_error : public error {
public:
    train_error(const std::string& msg, int epoch) : error(msg), epoch_(epoch) {}
    int epoch() const { return epoch_; }

private:
    int epoch_;
};

// Too few qualifying fingerprint samples; carries how many were found.
class insufficient_samples_error : public error {
public:
    insufficient_samples_error(const std::string& msg, std::size_t found)
        : error(msg), found_(found) {}
    std::size_t found() const { return found_; }

private:
    std::size_t found_;
};

// Suspect query transport failure.
class query_error : public error {
public:
    explicit query_error(const std::string& msg) : error(msg) {}
};

} // namespace sac
