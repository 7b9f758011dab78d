#pragma once

#include <stdexcept>
#include <string>

namespace veinmatch {

// Base for all recoverable domain errors. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/image shape disagreements.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid operator parameters (CLAHE clip limit, log scale, ...).
class ParamError : public Error {
public:
    explicit ParamError(const std::string& msg) : Error(msg) {}
};

// Dataset construction / batch sampling failures.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// A required precondition on inputs does not hold (missing pair class,
// empty score class, non-normalized probability rows, ...).
class ConstraintError : public Error {
public:
    explicit ConstraintError(const std::string& msg) : Error(msg) {}
};

// Zero-norm embedding where a direction is required.
class DegenerateEmbeddingError : public Error {
public:
    explicit DegenerateEmbeddingError(const std::string& msg) : Error(msg) {}
};

// Freeze mask names a parameter group that does not exist.
class MaskError : public Error {
public:
    explicit MaskError(const std::string& msg) : Error(msg) {}
};

// Malformed dataset layout or unreadable image files.
class IngestError : public Error {
public:
    explicit IngestError(const std::string& msg) : Error(msg) {}
};

// Gallery file problems: unknown subject, model hash mismatch, lock held.
class GalleryError : public Error {
public:
    explicit GalleryError(const std::string& msg) : Error(msg) {}
};

// Invalid ModelSpec.
class SpecError : public Error {
public:
    explicit SpecError(const std::string& msg) : Error(msg) {}
};

} // namespace veinmatch
