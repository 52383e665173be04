#pragma once

#include <stdexcept>
#include <string>

namespace kindepth {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KINDEPTH_ERROR(Name)             \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

KINDEPTH_ERROR(ConfigError);        // invalid configuration values
KINDEPTH_ERROR(LookupError);        // unknown person / token / tensor name
KINDEPTH_ERROR(SamplingExhausted);  // no chain of the requested shape exists
KINDEPTH_ERROR(MutationError);      // counterfactual violates gender matching
KINDEPTH_ERROR(IndexError);         // position outside a sequence
KINDEPTH_ERROR(SplitError);
KINDEPTH_ERROR(FormatError);        // malformed input file
KINDEPTH_ERROR(DecodeError);        // token id outside the vocabulary
KINDEPTH_ERROR(AlignmentError);     // character span does not map onto a token start
KINDEPTH_ERROR(LoadError);          // weights/config could not be loaded
KINDEPTH_ERROR(LengthError);        // sequence longer than the position table
KINDEPTH_ERROR(PatchError);
KINDEPTH_ERROR(CapabilityError);    // requested data was not captured
KINDEPTH_ERROR(ReportError);

#undef KINDEPTH_ERROR

/// Raised when a pipeline stage fails; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace kindepth
