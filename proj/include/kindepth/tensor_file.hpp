#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kindepth {

enum class DType { f32, f16, bf16 };

struct TensorInfo {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::size_t begin = 0;  // byte offsets into the data section
  std::size_t end = 0;

  std::size_t numel() const;
};

/// Read-only view of a safetensors file. The data section is memory-mapped;
/// tensors are converted to f32 on request.
class TensorFile {
 public:
  /// Throws LoadError for unreadable or truncated files and malformed headers.
  static TensorFile open(const std::filesystem::path& path);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  /// Throws LoadError naming the tensor when it is absent.
  const TensorInfo& info(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// Converts to f32. Throws LoadError naming the tensor on shape mismatch;
  /// an empty `expected_shape` skips the check.
  std::vector<float> read(const std::string& name, std::span<const std::int64_t> expected_shape = {}) const;

 private:
  struct Mapping;
  std::shared_ptr<const Mapping> map_;
  std::filesystem::path path_;
  std::size_t data_offset_ = 0;
  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

/// Writes F32 tensors in safetensors format, sorted by name.
void write_tensor_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

float half_to_float(std::uint16_t h) noexcept;
float bfloat16_to_float(std::uint16_t b) noexcept;

}  // namespace kindepth
