// SPDX-License-Identifier: Apache-2.0

#ifndef ENCAP_ERRORS_HPP_
#define ENCAP_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace encap
{

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an operation's arity rules.
class ShapeError : public Error
{
public:
    using Error::Error;
};

/// A NaN or infinity appeared where a finite value is required.
class NumericError : public Error
{
public:
    using Error::Error;
};

/// An index (token id, module index, target class) is out of range.
class IndexError : public Error
{
public:
    using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error
{
public:
    using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error
{
public:
    using Error::Error;
};

} // namespace encap

#endif // ENCAP_ERRORS_HPP_
