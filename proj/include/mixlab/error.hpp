// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared by every mixlab module.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mixlab {

/// Precondition on an argument was violated (shapes, divisibility, ranges).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A named entity (op id, task id, metric) does not exist.
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// An expert was handed an image at a resolution it does not accept.
class AdaptationRequired : public InvalidArgument {
public:
    AdaptationRequired(const std::string& expert, int expected, int actual)
        : InvalidArgument("expert '" + expert + "' requires " + std::to_string(expected) +
                          "px input but got " + std::to_string(actual) +
                          "px; interpolate its position embeddings or resize the image first"),
          expected_(expected),
          actual_(actual) {}

    int expected() const noexcept { return expected_; }
    int actual() const noexcept { return actual_; }

private:
    int expected_;
    int actual_;
};

/// A spec/config object violates one of its invariants.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed text input; carries the 1-based line number (0 when unknown).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& stage, int step)
        : std::runtime_error("training diverged in stage '" + stage + "' at step " +
                             std::to_string(step) + " (non-finite loss)"),
          step_(step) {}

    int step() const noexcept { return step_; }

private:
    int step_;
};

/// An input file does not exist or cannot be opened.
class FileNotFound : public std::runtime_error {
public:
    explicit FileNotFound(const std::string& path) : std::runtime_error("cannot open " + path), path_(path) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// A score fixture lacks a row that greedy selection needs to evaluate.
class CompletenessError : public std::runtime_error {
public:
    explicit CompletenessError(const std::string& combination)
        : std::runtime_error("fixture has no row for required combination " + combination),
          combination_(combination) {}

    const std::string& combination() const noexcept { return combination_; }

private:
    std::string combination_;
};

/// Wraps a failure raised by a selection evaluator with the combination being scored.
class EvaluationError : public std::runtime_error {
public:
    EvaluationError(const std::string& combination, const std::string& cause)
        : std::runtime_error("evaluating " + combination + ": " + cause), combination_(combination) {}

    const std::string& combination() const noexcept { return combination_; }

private:
    std::string combination_;
};

}  // namespace mixlab
