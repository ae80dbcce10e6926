#pragma once

#include <stdexcept>
#include <string>

namespace cmnet {

// Base of every error thrown by the library. `kind()` is the short tag written
// into machine-readable error records by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CMNET_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& message) : Error(tag, message) {} \
  };

CMNET_DEFINE_ERROR(ConfigError, "config")
CMNET_DEFINE_ERROR(InputError, "input")
CMNET_DEFINE_ERROR(ShapeError, "shape")
CMNET_DEFINE_ERROR(LoadError, "load")
CMNET_DEFINE_ERROR(FusionError, "fusion")
CMNET_DEFINE_ERROR(JoinError, "join")
CMNET_DEFINE_ERROR(IngestionError, "ingestion")
CMNET_DEFINE_ERROR(SamplerError, "sampler")
CMNET_DEFINE_ERROR(TrainingError, "training")
CMNET_DEFINE_ERROR(EvaluationError, "evaluation")
CMNET_DEFINE_ERROR(MappingError, "mapping")
CMNET_DEFINE_ERROR(IoError, "io")

#undef CMNET_DEFINE_ERROR

}  // namespace cmnet
