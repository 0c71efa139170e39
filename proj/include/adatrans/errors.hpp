#pragma once

#include <stdexcept>
#include <string>

namespace adatrans {

#define ADATRANS_DEFINE_ERROR(NAME)                          \
  struct NAME : std::runtime_error {                         \
    explicit NAME(const std::string& msg)                    \
        : std::runtime_error(std::string(#NAME ": ") + msg) {} \
  }

ADATRANS_DEFINE_ERROR(SchemaMismatch);
ADATRANS_DEFINE_ERROR(ValueError);
ADATRANS_DEFINE_ERROR(EmptyPopulation);
ADATRANS_DEFINE_ERROR(SplitTooLarge);
ADATRANS_DEFINE_ERROR(DimMismatch);
ADATRANS_DEFINE_ERROR(ShapeMismatch);
ADATRANS_DEFINE_ERROR(BadCategory);
ADATRANS_DEFINE_ERROR(NonFiniteLoss);
ADATRANS_DEFINE_ERROR(NonFiniteGradient);
ADATRANS_DEFINE_ERROR(NoConvergence);
ADATRANS_DEFINE_ERROR(DegenerateTreatment);
ADATRANS_DEFINE_ERROR(EmptyGroup);
ADATRANS_DEFINE_ERROR(ModelSchemaMismatch);
ADATRANS_DEFINE_ERROR(LengthMismatch);
ADATRANS_DEFINE_ERROR(IOFailure);
ADATRANS_DEFINE_ERROR(ConfigError);

#undef ADATRANS_DEFINE_ERROR

}  // namespace adatrans
