#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hessdiag {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
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

// A required input file (checkpoint, report artifact) does not exist.
class MissingArtifactError : public IoError {
 public:
  using IoError::IoError;
};

// Raised by the autodiff tape the moment a node produces NaN or Inf.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::size_t node_id, std::string op_name)
      : Error("non-finite value produced at node " + std::to_string(node_id) +
              " (" + op_name + ")"),
        node_id_(node_id),
        op_name_(std::move(op_name)) {}

  std::size_t node_id() const noexcept { return node_id_; }
  const std::string& op_name() const noexcept { return op_name_; }

 private:
  std::size_t node_id_;
  std::string op_name_;
};

// Training hit a non-finite loss; carries the coordinates where it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int batch, const std::string& detail)
      : Error("training diverged at epoch " + std::to_string(epoch) +
              ", batch " + std::to_string(batch) + ": " + detail),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace hessdiag
