#include "mindprobe/tensor_archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

#include "mindprobe/errors.hpp"

namespace mindprobe {
namespace {

static_assert(sizeof(float) == 4);

std::size_t align_up(std::size_t n) {
  return (n + kArchiveAlignment - 1) / kArchiveAlignment * kArchiveAlignment;
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint32_t bswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void copy_floats_le(std::uint8_t* dst, const float* src, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t w;
      std::memcpy(&w, src + i, 4);
      w = bswap32(w);
      std::memcpy(dst + 4 * i, &w, 4);
    }
  }
}

void read_floats_le(float* dst, const std::uint8_t* src, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t w;
      std::memcpy(&w, src + 4 * i, 4);
      w = bswap32(w);
      std::memcpy(dst + i, &w, 4);
    }
  }
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw FormatError("negative tensor dimension");
    n *= d;
  }
  return n;
}

}  // namespace

std::int64_t Tensor::numel() const { return shape_numel(shape); }

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const Tensor& TensorArchive::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw FormatError("archive has no tensor named '" + name + "'");
  return *t;
}

void TensorArchive::add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor '" + name + "' data size does not match its shape");
  }
  tensors.push_back(Tensor{std::move(name), std::move(shape), std::move(data)});
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  // Offsets depend on the header length and the header carries the offsets,
  // so iterate until the layout is stable (two passes in practice).
  std::vector<std::size_t> offsets(archive.tensors.size(), 0);
  std::string header_text;
  for (int pass = 0; pass < 8; ++pass) {
    nlohmann::json manifest = nlohmann::json::array();
    for (std::size_t i = 0; i < archive.tensors.size(); ++i) {
      const auto& t = archive.tensors[i];
      manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offsets[i]}});
    }
    nlohmann::json header = {{"meta", archive.meta}, {"tensors", manifest}};
    header_text = header.dump();
    std::size_t cursor = align_up(8 + header_text.size());
    bool stable = true;
    for (std::size_t i = 0; i < archive.tensors.size(); ++i) {
      if (offsets[i] != cursor) stable = false;
      offsets[i] = cursor;
      cursor = align_up(cursor + archive.tensors[i].data.size() * sizeof(float));
    }
    if (stable) break;
  }

  std::vector<std::uint8_t> out;
  put_u64_le(out, header_text.size());
  out.insert(out.end(), header_text.begin(), header_text.end());
  for (std::size_t i = 0; i < archive.tensors.size(); ++i) {
    const auto& t = archive.tensors[i];
    out.resize(offsets[i], 0);
    const std::size_t start = out.size();
    out.resize(start + t.data.size() * sizeof(float));
    copy_floats_le(out.data() + start, t.data.data(), t.data.size());
  }
  out.resize(align_up(out.size()), 0);
  return out;
}

TensorArchive decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("archive truncated: missing header length");
  const std::uint64_t header_len = get_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) throw FormatError("archive truncated: header extends past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed archive header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("malformed archive header: no tensor manifest");
  }

  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header["tensors"]) {
    Tensor t;
    try {
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed manifest entry: ") + e.what());
    }
    const auto offset = entry.value("offset", std::uint64_t{0});
    if (offset % kArchiveAlignment != 0) throw FormatError("tensor '" + t.name + "' payload is not 64-byte aligned");
    const auto n = static_cast<std::uint64_t>(shape_numel(t.shape));
    if (offset < 8 + header_len || offset > bytes.size() || n * 4 > bytes.size() - offset) {
      throw FormatError("archive truncated: payload of '" + t.name + "' extends past end of file");
    }
    t.data.resize(n);
    read_floats_le(t.data.data(), bytes.data() + offset, n);
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = encode_archive(archive);
  write_file_atomic(path, bytes);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  const std::string raw = read_text_file(path);
  return decode_archive(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& text, std::uint64_t seed) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), seed);
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return s;
}

}  // namespace mindprobe
