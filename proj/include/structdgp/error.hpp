#pragma once

#include <stdexcept>
#include <string>

namespace sdgp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A Cholesky pivot stayed non-positive after all jitter was applied.
class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

/// Raised by desk-scale oracles and exports that densify T*M x T*M matrices.
class TooLarge : public Error {
 public:
  using Error::Error;
};

/// Importance weights collapsed onto too few samples to be trusted.
class DegenerateWeights : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite objective.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace sdgp
