#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tokmerge {

// Violated precondition or call contract. CLI maps this to exit code 2.
struct ContractViolation : std::invalid_argument {
    explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// Schedule text that does not parse or validate; carries the byte offset
// of the offending token so callers can point at it.
struct ScheduleParseError : ContractViolation {
    ScheduleParseError(const std::string& what, size_t pos)
        : ContractViolation(what + " (at position " + std::to_string(pos) + ")"), position(pos) {}
    size_t position;
};

// Schedule that parses but cannot run on the given model config
// (e.g. token count would drop to or below the protected CLS count).
struct InfeasibleSchedule : ContractViolation {
    explicit InfeasibleSchedule(const std::string& what) : ContractViolation(what) {}
};

// Runtime numerical failure (NaN loss, divergence). CLI maps this to exit code 3.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

}  // namespace tokmerge
