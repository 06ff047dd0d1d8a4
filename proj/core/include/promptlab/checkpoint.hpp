#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "promptlab/parameter.hpp"

namespace promptlab {

/// Checkpoint layout: the 5 bytes "PFCK1", a little-endian u64 manifest
/// length, a UTF-8 JSON manifest [{name, shape, offset}] with offsets counted
/// in doubles, then every value as a little-endian f64.
void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter* const> params);

/// All tensors of a checkpoint, keyed by name.
std::map<std::string, Tensor> read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params` by name. Every parameter must be
/// present with a matching shape; extra checkpoint entries are rejected too.
void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace promptlab
