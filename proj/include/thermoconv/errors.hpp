#pragma once

#include <stdexcept>
#include <string>

namespace thermoconv {

// One type per failure kind so callers (and the CLI) can map them without
// parsing messages.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define THERMOCONV_ERROR(Name) \
  struct Name : Error {        \
    using Error::Error;        \
  }

THERMOCONV_ERROR(NotStable);
THERMOCONV_ERROR(DimensionMismatch);
THERMOCONV_ERROR(Overflow);
THERMOCONV_ERROR(SingularBlock);
THERMOCONV_ERROR(SingularCovariance);
THERMOCONV_ERROR(FastBlockNotPD);
THERMOCONV_ERROR(EmptyGrid);
THERMOCONV_ERROR(InvalidBounds);
THERMOCONV_ERROR(SimulationBlowup);
THERMOCONV_ERROR(SingularA);
THERMOCONV_ERROR(QuadratureDivergence);
THERMOCONV_ERROR(SamplerNotConverged);
THERMOCONV_ERROR(ConfigError);

#undef THERMOCONV_ERROR

}  // namespace thermoconv
