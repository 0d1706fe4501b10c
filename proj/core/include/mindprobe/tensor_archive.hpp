#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace mindprobe {

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

/// Container used for weights, probing datasets, steering vectors and ITI
/// plans.
///
/// Layout: a little-endian uint64 byte length, that many bytes of UTF-8 JSON
/// (`{"meta": ..., "tensors": [{"name", "shape", "offset"}...]}`), then the
/// float32 little-endian payloads in manifest order. Every payload starts at a
/// file offset that is a multiple of 64; the gaps are zero-filled.
struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data);
};

inline constexpr std::size_t kArchiveAlignment = 64;

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(std::span<const std::uint8_t> bytes);

/// Writes via a temporary sibling file and a rename, so readers never observe
/// a partially written archive.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

/// Atomic text/binary write helper shared by the other serialisers.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for fingerprints and config hashes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace mindprobe
