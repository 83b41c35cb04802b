#pragma once

#include <stdexcept>
#include <string>

namespace mfpp {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Segmentation or sampling parameters outside their valid domain.
class InvalidParams : public Error {
public:
    using Error::Error;
};

/// Pyramid, mask or explanation configuration that cannot be honored.
class InvalidConfig : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// Malformed wire payload or a response whose shape disagrees with the request.
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// The predictor endpoint could not be reached after all retries.
class TransportError : public Error {
public:
    using Error::Error;
};

/// Annotation or sidecar file that does not follow its expected format.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A predictor call failed while explaining; carries the first mask index of the failed batch.
class PredictorError : public Error {
public:
    PredictorError(std::size_t first_mask, const std::string& what)
        : Error("predictor failed on batch starting at mask " + std::to_string(first_mask) + ": " + what),
          first_mask_(first_mask) {}

    std::size_t first_mask() const noexcept { return first_mask_; }

private:
    std::size_t first_mask_;
};

} // namespace mfpp
