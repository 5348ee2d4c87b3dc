// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace slotmerge {

// Error taxonomy shared across the library. Each maps to a stable CLI exit
// code (see docs/file-formats.md).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ScheduleError : std::runtime_error {
    explicit ScheduleError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CalibrationError : std::runtime_error {
    explicit CalibrationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateHistogramError : CalibrationError {
    explicit DegenerateHistogramError(const std::string& msg) : CalibrationError(msg) {}
};

struct SceneSpecError : std::runtime_error {
    explicit SceneSpecError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace slotmerge
