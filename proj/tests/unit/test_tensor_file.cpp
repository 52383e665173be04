#include <doctest.h>

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "kindepth/error.hpp"
#include "kindepth/tensor_file.hpp"
#include "support.hpp"

using namespace kindepth;
using namespace kindepth::testing;

namespace {

// Hand-assembled safetensors file with one tensor of raw payload bytes.
void write_raw(const std::filesystem::path& path, const std::string& name, const std::string& dtype,
               std::vector<std::int64_t> shape, const std::string& payload) {
  nlohmann::json h;
  h[name] = {{"dtype", dtype}, {"shape", shape}, {"data_offsets", {0, payload.size()}}};
  const std::string header = h.dump();
  const std::uint64_t n = header.size();
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out << header << payload;
}

}  // namespace

TEST_SUITE("tensor_file") {
  TEST_CASE("write then read round trips f32 tensors and metadata") {
    TempDir dir;
    write_tensor_file(dir / "t.safetensors",
                      {{"b", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"a", {4}, {0.5f, -1.0f, 1e-8f, 3e8f}}},
                      {{"format", "pt"}});
    const TensorFile f = TensorFile::open(dir / "t.safetensors");
    CHECK(f.names() == std::vector<std::string>{"a", "b"});
    CHECK(f.metadata().at("format") == "pt");
    const std::vector<std::int64_t> shape = {2, 3};
    CHECK(f.read("b", shape) == std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(f.read("a") == std::vector<float>{0.5f, -1.0f, 1e-8f, 3e8f});
    CHECK(f.info("b").numel() == 6);
  }

  TEST_CASE("missing tensors and wrong shapes name the tensor") {
    TempDir dir;
    write_tensor_file(dir / "t.safetensors", {{"w", {2, 2}, {1, 2, 3, 4}}});
    const TensorFile f = TensorFile::open(dir / "t.safetensors");
    try {
      (void)f.read("missing.weight");
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("missing.weight") != std::string::npos);
    }
    const std::vector<std::int64_t> wrong = {4, 1};
    try {
      (void)f.read("w", wrong);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
  }

  TEST_CASE("truncated files fail to open") {
    TempDir dir;
    write_tensor_file(dir / "t.safetensors", {{"w", {16}, std::vector<float>(16, 1.0f)}});
    const std::string full = read_file(dir / "t.safetensors");
    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20}, full.size() - 4}) {
      write_file(dir / "cut.safetensors", full.substr(0, cut));
      CHECK_THROWS_AS(TensorFile::open(dir / "cut.safetensors"), LoadError);
    }
    CHECK_THROWS_AS(TensorFile::open(dir / "absent.safetensors"), LoadError);
  }

  TEST_CASE("half precision payloads convert to f32") {
    CHECK(half_to_float(0x3C00) == 1.0f);
    CHECK(half_to_float(0xC000) == -2.0f);
    CHECK(half_to_float(0x0001) == doctest::Approx(5.960464477539063e-8).epsilon(1e-6));
    CHECK(std::isinf(half_to_float(0x7C00)));
    CHECK(bfloat16_to_float(0x3F80) == 1.0f);
    CHECK(bfloat16_to_float(0xC040) == -3.0f);

    TempDir dir;
    const std::uint16_t h[3] = {0x3C00, 0x3800, 0xBC00};  // 1, 0.5, -1
    write_raw(dir / "h.safetensors", "x", "F16", {3}, std::string(reinterpret_cast<const char*>(h), 6));
    CHECK(TensorFile::open(dir / "h.safetensors").read("x") == std::vector<float>{1.0f, 0.5f, -1.0f});
    const std::uint16_t b[2] = {0x4000, 0x3F00};  // 2, 0.5
    write_raw(dir / "b.safetensors", "x", "BF16", {2}, std::string(reinterpret_cast<const char*>(b), 4));
    CHECK(TensorFile::open(dir / "b.safetensors").read("x") == std::vector<float>{2.0f, 0.5f});
  }

  TEST_CASE("unsupported dtypes and inconsistent offsets are rejected") {
    TempDir dir;
    write_raw(dir / "i.safetensors", "x", "I64", {1}, std::string(8, '\0'));
    CHECK_THROWS_AS((void)TensorFile::open(dir / "i.safetensors").read("x"), LoadError);
    write_raw(dir / "s.safetensors", "x", "F32", {3}, std::string(8, '\0'));
    CHECK_THROWS_AS((void)TensorFile::open(dir / "s.safetensors").read("x"), LoadError);
  }
}
