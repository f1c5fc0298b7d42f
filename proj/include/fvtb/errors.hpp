#pragma once

#include <stdexcept>
#include <string>

namespace fvtb {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or size of an input does not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Requested template geometry exceeds what a model was estimated for.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure, non-finite values, or a singular system.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Container or corpus file is damaged (truncated, bad hash, bad header).
class CorruptError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

}  // namespace fvtb
