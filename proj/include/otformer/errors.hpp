#pragma once

#include <stdexcept>

namespace otf {

/// Malformed binary input (checkpoints, IDX files, dataset caches).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace otf
