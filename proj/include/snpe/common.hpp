#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace snpe {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

//! Base of every error the library raises on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define SNPE_DECLARE_ERROR(Name)                                               \
  struct Name : Error {                                                        \
    using Error::Error;                                                        \
  }

SNPE_DECLARE_ERROR(NonFiniteLoss);
SNPE_DECLARE_ERROR(NonFiniteOutput);
SNPE_DECLARE_ERROR(DimensionMismatch);
SNPE_DECLARE_ERROR(NonPositivePrecision);
SNPE_DECLARE_ERROR(AllZeroWeights);
SNPE_DECLARE_ERROR(DegenerateProposal);
SNPE_DECLARE_ERROR(ProposalStarvation);
SNPE_DECLARE_ERROR(NoAcceptances);
SNPE_DECLARE_ERROR(ParticleCollapse);
SNPE_DECLARE_ERROR(NonConvergence);
SNPE_DECLARE_ERROR(SingularF);
SNPE_DECLARE_ERROR(IncompatibleRuns);
SNPE_DECLARE_ERROR(ConfigError);
SNPE_DECLARE_ERROR(FormatError);

#undef SNPE_DECLARE_ERROR

inline void require_dim(Index got, Index want, const char* what) {
  if (got != want)
    throw DimensionMismatch(std::string(what) + ": expected dimension " +
                            std::to_string(want) + ", got " +
                            std::to_string(got));
}

} // namespace snpe
