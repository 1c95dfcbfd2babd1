#pragma once

#include <stdexcept>
#include <string>

namespace icptraj {

/// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An input violates a documented precondition (size mismatch, bad config).
struct InvalidInputError : Error {
  using Error::Error;
};

/// A required input collection is empty (no unmasked points, empty dataset).
struct EmptyInputError : Error {
  using Error::Error;
};

/// The geometry does not determine a solution (collinear points, zero scatter).
struct DegenerateGeometryError : Error {
  using Error::Error;
};

/// A file is malformed: missing section, bad token, truncated data.
struct ParseError : Error {
  using Error::Error;
};

/// A structurally valid document contradicts its declared schema.
struct SchemaError : Error {
  using Error::Error;
};

/// Training produced a non-finite loss; the message names step and probe.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace icptraj
