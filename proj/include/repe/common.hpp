#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace repe {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define REPE_DEFINE_ERROR(Name) \
    struct Name : Error {        \
        using Error::Error;      \
    }

REPE_DEFINE_ERROR(DimensionMismatch);
REPE_DEFINE_ERROR(ZeroVariance);
REPE_DEFINE_ERROR(ZeroVector);
REPE_DEFINE_ERROR(DegenerateLabels);
REPE_DEFINE_ERROR(NonFiniteInput);
REPE_DEFINE_ERROR(ContextOverflow);
REPE_DEFINE_ERROR(TokenOutOfRange);
REPE_DEFINE_ERROR(InvalidPlan);
REPE_DEFINE_ERROR(NonFiniteLoss);
REPE_DEFINE_ERROR(MissingField);
REPE_DEFINE_ERROR(EmptyOutput);
REPE_DEFINE_ERROR(TooFewRecords);
REPE_DEFINE_ERROR(InvalidLayer);
REPE_DEFINE_ERROR(UnusableLayer);
REPE_DEFINE_ERROR(ParseError);
REPE_DEFINE_ERROR(SchemaError);
REPE_DEFINE_ERROR(MissingReadingVector);
REPE_DEFINE_ERROR(NotApplicable);
REPE_DEFINE_ERROR(IoError);

#undef REPE_DEFINE_ERROR

}  // namespace repe
