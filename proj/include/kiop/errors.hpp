// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kiop {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define KIOP_DEFINE_ERROR(NAME)                                                \
  class NAME : public Error {                                                  \
  public:                                                                      \
    using Error::Error;                                                        \
  }

KIOP_DEFINE_ERROR(InvalidPartition);
KIOP_DEFINE_ERROR(InvalidDepth);
KIOP_DEFINE_ERROR(ShapeMismatch);
KIOP_DEFINE_ERROR(CorruptCheckpoint);
KIOP_DEFINE_ERROR(MappingInfeasible);
KIOP_DEFINE_ERROR(FrozenViolation);
KIOP_DEFINE_ERROR(UnsupportedModel);
KIOP_DEFINE_ERROR(InvalidLabel);
KIOP_DEFINE_ERROR(DegenerateContrast);
KIOP_DEFINE_ERROR(SynthesisDiverged);
KIOP_DEFINE_ERROR(EmptyBank);
KIOP_DEFINE_ERROR(EmptyDataset);
KIOP_DEFINE_ERROR(SnapshotMismatch);
KIOP_DEFINE_ERROR(UnknownLayer);
KIOP_DEFINE_ERROR(IngestError);
KIOP_DEFINE_ERROR(ConfigError);

#undef KIOP_DEFINE_ERROR

} // namespace kiop
