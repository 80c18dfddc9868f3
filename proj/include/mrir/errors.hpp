#pragma once

#include <stdexcept>
#include <string>

namespace mrir {

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caption source was requested explicitly but could not deliver.
struct ProvenanceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Carries the name of the loss term that went non-finite.
struct TrainingError : std::runtime_error {
  TrainingError(std::string term_name, const std::string& what)
      : std::runtime_error(what), term(std::move(term_name)) {}
  std::string term;
};

// Carries the index of the sampling step whose latent went non-finite.
struct SamplingError : std::runtime_error {
  SamplingError(int step_index, const std::string& what) : std::runtime_error(what), step(step_index) {}
  int step;
};

}  // namespace mrir
