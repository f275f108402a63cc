#pragma once

#include <stdexcept>
#include <string>

namespace apd {

// Error taxonomy used across the library. The CLI maps these onto
// distinct exit codes.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct input_error : std::runtime_error {
    explicit input_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct attack_error : std::runtime_error {
    explicit attack_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct train_error : std::runtime_error {
    explicit train_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct eval_error : std::runtime_error {
    explicit eval_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct load_error : std::runtime_error {
    explicit load_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace apd
