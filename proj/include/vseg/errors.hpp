#ifndef VSEG_ERRORS_HPP
#define VSEG_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace vseg {

/// Input is structurally valid but degenerate for the requested operation
/// (constant volume passed to normalize, empty mask passed to tight_box, ...).
struct degenerate_input : std::runtime_error {
    explicit degenerate_input(const std::string& what) : std::runtime_error(what) {}
};

/// Too few samples to build a statistical model.
struct insufficient_data : std::runtime_error {
    explicit insufficient_data(const std::string& what) : std::runtime_error(what) {}
};

/// The global stage produced no usable probability mass to fit against.
struct localization_failure : std::runtime_error {
    explicit localization_failure(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed text input; `line` is 1-based.
struct parse_error : std::runtime_error {
    int line;
    parse_error(const std::string& what, int line_no)
        : std::runtime_error(what + " (line " + std::to_string(line_no) + ")"), line(line_no) {}
};

/// Header and payload of a file disagree, or a binary file is truncated.
struct corrupt_file : std::runtime_error {
    explicit corrupt_file(const std::string& what) : std::runtime_error(what) {}
};

} // namespace vseg

#endif
