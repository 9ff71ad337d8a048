#pragma once
#include <stdexcept>
#include <string>

namespace gridflow {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// case ingestion / model validity
struct ParseError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct NotFoundError : Error { using Error::Error; };
struct DisconnectionError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct ModeDataMissingError : Error { using Error::Error; };

// solvers
struct InfeasibleDcError : Error { using Error::Error; };
struct SingularJacobianError : Error { using Error::Error; };
struct NoConvergenceError : Error {
  int iterations;
  double final_mismatch;
  NoConvergenceError(const std::string& what, int iters, double mismatch)
      : Error(what), iterations(iters), final_mismatch(mismatch) {}
};
struct ConvergenceError : Error { using Error::Error; };

// autodiff / training
struct ShapeMismatchError : Error { using Error::Error; };
struct NotScalarError : Error { using Error::Error; };
struct TapeConsumedError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct DivergenceError : Error { using Error::Error; };

}  // namespace gridflow
