#pragma once

#include <stdexcept>
#include <string>

namespace slidepipe {

// Base of all library errors. The three direct subcategories map onto the
// CLI exit codes: ConfigError -> 2, DataError -> 3, ModelError -> 4.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

class ModelError : public Error {
public:
    explicit ModelError(const std::string& msg) : Error(msg) {}
};

#define SLIDEPIPE_DEFINE_ERROR(Name, Base)                                  \
    class Name : public Base {                                              \
    public:                                                                  \
        explicit Name(const std::string& msg) : Base(#Name ": " + msg) {}    \
    }

// tiling
SLIDEPIPE_DEFINE_ERROR(SlideTooSmall, DataError);
SLIDEPIPE_DEFINE_ERROR(PatchOutOfBounds, DataError);
// labeling
SLIDEPIPE_DEFINE_ERROR(RatioOutOfRange, DataError);
SLIDEPIPE_DEFINE_ERROR(NonDistribution, DataError);
SLIDEPIPE_DEFINE_ERROR(EmptyClass, DataError);
// classification
SLIDEPIPE_DEFINE_ERROR(EmptyInput, DataError);
SLIDEPIPE_DEFINE_ERROR(NoPatches, DataError);
SLIDEPIPE_DEFINE_ERROR(RaggedInput, DataError);
// backbone / nn
SLIDEPIPE_DEFINE_ERROR(InvalidConfig, ConfigError);
SLIDEPIPE_DEFINE_ERROR(ShapeMismatch, DataError);
SLIDEPIPE_DEFINE_ERROR(BadShape, DataError);
// adversarial
SLIDEPIPE_DEFINE_ERROR(ShapeIncompatible, ModelError);
SLIDEPIPE_DEFINE_ERROR(DegenerateData, DataError);
SLIDEPIPE_DEFINE_ERROR(EmptyDomain, DataError);
// metrics
SLIDEPIPE_DEFINE_ERROR(OneClassOnly, DataError);
SLIDEPIPE_DEFINE_ERROR(LengthMismatch, DataError);
SLIDEPIPE_DEFINE_ERROR(DivisionUndefined, DataError);
// pipeline
SLIDEPIPE_DEFINE_ERROR(ModelMissing, ModelError);
SLIDEPIPE_DEFINE_ERROR(SpecInfeasible, ConfigError);
SLIDEPIPE_DEFINE_ERROR(IoError, DataError);

#undef SLIDEPIPE_DEFINE_ERROR

} // namespace slidepipe
