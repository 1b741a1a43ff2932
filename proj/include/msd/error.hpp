// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace msd {

/// Error categories map onto CLI exit codes (usage=2, data=3, numeric=4).
enum class ErrorKind { kUsage = 2, kData = 3, kNumeric = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what)
        , kind_(kind)
    {
    }

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

/// Bad flags, unsupported formats, invalid configuration.
class UsageError : public Error {
public:
    explicit UsageError(const std::string& what)
        : Error(ErrorKind::kUsage, what)
    {
    }
};

/// Malformed files, mapping failures, structural mismatches between models.
class DataError : public Error {
public:
    explicit DataError(const std::string& what)
        : Error(ErrorKind::kData, what)
    {
    }
};

/// Zero-norm operands, divergence, and other numeric domain failures.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what)
        : Error(ErrorKind::kNumeric, what)
    {
    }
};

} // namespace msd
