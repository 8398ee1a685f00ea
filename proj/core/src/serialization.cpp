#include "mawm/serialization.hpp"

#include <stdexcept>

namespace mawm {

void write_header(torch::serialize::OutputArchive& archive, const std::string& component) {
  write_string(archive, "component", component);
  archive.write("format_version", torch::tensor({kCheckpointVersion}, torch::kInt64));
}

void check_header(torch::serialize::InputArchive& archive, const std::string& component) {
  const auto found = read_string(archive, "component");
  if (found != component) {
    throw std::runtime_error("checkpoint holds '" + found + "', expected '" + component + "'");
  }
  torch::Tensor version;
  archive.read("format_version", version);
  if (version.item<std::int64_t>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version.item<std::int64_t>()));
  }
}

void write_scalar(torch::serialize::OutputArchive& archive, const std::string& key, double value) {
  archive.write(key, torch::tensor({value}, torch::kFloat64));
}

double read_scalar(torch::serialize::InputArchive& archive, const std::string& key) {
  torch::Tensor t;
  archive.read(key, t);
  return t.item<double>();
}

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value) {
  archive.write(key, c10::IValue(value));
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue value;
  archive.read(key, value);
  return value.toStringRef();
}

}  // namespace mawm
