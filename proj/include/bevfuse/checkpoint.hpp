#pragma once

#include <cstdint>
#include <string>

#include "bevfuse/model.hpp"
#include "bevfuse/nn.hpp"

namespace bevfuse::checkpoint {

struct Meta {
  long step = 0;
  std::uint64_t config_hash = 0;
};

// Binary snapshot of all named parameters plus optimizer state. Loading
// verifies the stored config hash against `expected_hash` and refuses on
// mismatch (IncompatError); corrupt or truncated files raise DataError.
void save(const std::string& path, const model::Model& m, const nn::Adam* opt, long step,
          std::uint64_t config_hash);
Meta load(const std::string& path, model::Model& m, nn::Adam* opt, std::uint64_t expected_hash);

// header peek without touching the model
Meta read_meta(const std::string& path);

}  // namespace bevfuse::checkpoint
