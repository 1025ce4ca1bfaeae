#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace precis {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument or violated precondition (bad hyperparameters, wrong shapes of config).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// A factorization met a pivot <= 0: the matrix is not a valid precision/covariance.
class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

class EmptyAverage : public Error {
public:
    using Error::Error;
};

/// AUC requested on a truth graph with only one class.
class SingleClass : public Error {
public:
    using Error::Error;
};

class AllCellsFailed : public Error {
public:
    using Error::Error;
};

class MissingRawIntensities : public Error {
public:
    using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

class ZeroVarianceFeature : public Error {
public:
    explicit ZeroVarianceFeature(std::vector<std::string> labels)
        : Error(describe(labels)), labels_(std::move(labels)) {}

    const std::vector<std::string>& labels() const noexcept { return labels_; }

private:
    static std::string describe(const std::vector<std::string>& labels) {
        std::string msg = "zero-variance feature(s):";
        for (const auto& l : labels) msg += " " + l;
        return msg;
    }

    std::vector<std::string> labels_;
};

}  // namespace precis
