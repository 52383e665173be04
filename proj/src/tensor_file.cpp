#include "kindepth/tensor_file.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "kindepth/error.hpp"

namespace kindepth {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

struct TensorFile::Mapping {
  const unsigned char* data = nullptr;
  std::size_t size = 0;

  Mapping(const Mapping&) = delete;
  Mapping& operator=(const Mapping&) = delete;
  Mapping(const unsigned char* d, std::size_t s) : data(d), size(s) {}
  ~Mapping() {
    if (data && size) munmap(const_cast<unsigned char*>(data), size);
  }
};

namespace {

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 2; }

std::string shape_string(std::span<const std::int64_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

}  // namespace

std::size_t TensorInfo::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalise
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      bits = sign | (exp << 23) | ((mant & 0x3FF) << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t b) noexcept { return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16); }

TensorFile TensorFile::open(const std::filesystem::path& path) {
  const int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw LoadError("cannot open weights file " + path.string());
  struct stat st {};
  if (fstat(fd, &st) != 0) {
    ::close(fd);
    throw LoadError("cannot stat " + path.string());
  }
  const auto size = static_cast<std::size_t>(st.st_size);
  if (size < 8) {
    ::close(fd);
    throw LoadError(path.string() + " is truncated (no header length)");
  }
  void* addr = mmap(nullptr, size, PROT_READ, MAP_PRIVATE, fd, 0);
  ::close(fd);
  if (addr == MAP_FAILED) throw LoadError("cannot map " + path.string());

  TensorFile f;
  f.map_ = std::make_shared<const Mapping>(static_cast<const unsigned char*>(addr), size);
  f.path_ = path;
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, f.map_->data, 8);
  if (header_len > size - 8) throw LoadError(path.string() + " is truncated (header runs past end of file)");
  f.data_offset_ = 8 + header_len;
  const std::size_t data_size = size - f.data_offset_;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(f.map_->data + 8, f.map_->data + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  }
  if (!header.is_object()) throw LoadError(path.string() + ": header is not an object");

  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (entry.is_object())
        for (const auto& [k, v] : entry.items())
          if (v.is_string()) f.metadata_[k] = v.get<std::string>();
      continue;
    }
    try {
      TensorInfo t;
      t.name = name;
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype == "F32")
        t.dtype = DType::f32;
      else if (dtype == "F16")
        t.dtype = DType::f16;
      else if (dtype == "BF16")
        t.dtype = DType::bf16;
      else
        throw LoadError("tensor '" + name + "' has unsupported dtype " + dtype);
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      for (auto d : t.shape)
        if (d < 0) throw LoadError("tensor '" + name + "' has a negative dimension");
      const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
      if (offsets.size() != 2) throw LoadError("tensor '" + name + "' has malformed data_offsets");
      t.begin = offsets[0];
      t.end = offsets[1];
      if (t.begin > t.end || t.end > data_size)
        throw LoadError("tensor '" + name + "' extends past the end of " + path.string() + " (file truncated?)");
      if (t.end - t.begin != t.numel() * dtype_size(t.dtype))
        throw LoadError("tensor '" + name + "' byte size does not match shape " + shape_string(t.shape));
      f.tensors_.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("tensor '" + name + "' has a malformed header entry: " + e.what());
    }
  }
  return f;
}

const TensorInfo& TensorFile::info(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "' in " + path_.string());
  return it->second;
}

std::vector<std::string> TensorFile::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::vector<float> TensorFile::read(const std::string& name, std::span<const std::int64_t> expected_shape) const {
  const TensorInfo& t = info(name);
  if (!expected_shape.empty() && !std::equal(t.shape.begin(), t.shape.end(), expected_shape.begin(),
                                             expected_shape.end()))
    throw LoadError("tensor '" + name + "' has shape " + shape_string(t.shape) + ", expected " +
                    shape_string(expected_shape));
  const unsigned char* src = map_->data + data_offset_ + t.begin;
  const std::size_t n = t.numel();
  std::vector<float> out(n);
  switch (t.dtype) {
    case DType::f32:
      std::memcpy(out.data(), src, n * 4);
      break;
    case DType::f16:
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        out[i] = half_to_float(h);
      }
      break;
    case DType::bf16:
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        out[i] = bfloat16_to_float(h);
      }
      break;
  }
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  std::vector<const NamedTensor*> order;
  for (const auto& t : tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->name < b->name; });

  nlohmann::ordered_json header;
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const NamedTensor* t : order) {
    std::size_t n = 1;
    for (auto d : t->shape) n *= static_cast<std::size_t>(d);
    if (n != t->data.size())
      throw std::invalid_argument("tensor '" + t->name + "' data does not match shape " + shape_string(t->shape));
    header[t->name] = {{"dtype", "F32"}, {"shape", t->shape}, {"data_offsets", {offset, offset + 4 * n}}};
    offset += 4 * n;
  }
  std::string text = header.dump();
  while (text.size() % 8) text += ' ';

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const NamedTensor* t : order)
    out.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(4 * t->data.size()));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace kindepth
