#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uld {

// Violated call contract: bad state, invalid argument combination.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Shape or dimension mismatch between tensors.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Bad or inconsistent configuration (unknown method tag, missing template, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Requested corpus size exceeds what the value pools can supply.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Corrupt or truncated checkpoint; carries the byte offset of the failure.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// Training produced a non-finite loss.
class NanLossError : public std::runtime_error {
 public:
  NanLossError(int epoch, int batch_index)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index)),
        epoch_(epoch),
        batch_index_(batch_index) {}

  int epoch() const noexcept { return epoch_; }
  int batch_index() const noexcept { return batch_index_; }

 private:
  int epoch_;
  int batch_index_;
};

// A parameter that must stay frozen was mutated.
class FrozenParamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace uld
