#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace idfcr {

enum class ErrorKind { config, parameter, data, listing, dependency, version, io };

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::data: return "data";
    case ErrorKind::listing: return "listing";
    case ErrorKind::dependency: return "dependency";
    case ErrorKind::version: return "version";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define IDFCR_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& message) : Error(Kind, message) {}  \
  };

IDFCR_DEFINE_ERROR(ConfigError, ErrorKind::config)
IDFCR_DEFINE_ERROR(ParameterError, ErrorKind::parameter)
IDFCR_DEFINE_ERROR(DataError, ErrorKind::data)
IDFCR_DEFINE_ERROR(ListingError, ErrorKind::listing)
IDFCR_DEFINE_ERROR(DependencyError, ErrorKind::dependency)
IDFCR_DEFINE_ERROR(VersionError, ErrorKind::version)
IDFCR_DEFINE_ERROR(IoError, ErrorKind::io)

#undef IDFCR_DEFINE_ERROR

}  // namespace idfcr
