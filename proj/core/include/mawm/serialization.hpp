#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace mawm {

inline constexpr std::int64_t kCheckpointVersion = 1;

/// Stamps a checkpoint archive with a component name and format version.
void write_header(torch::serialize::OutputArchive& archive, const std::string& component);
/// Throws if the archive was written for another component or version.
void check_header(torch::serialize::InputArchive& archive, const std::string& component);

void write_scalar(torch::serialize::OutputArchive& archive, const std::string& key, double value);
double read_scalar(torch::serialize::InputArchive& archive, const std::string& key);
void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value);
std::string read_string(torch::serialize::InputArchive& archive, const std::string& key);

}  // namespace mawm
