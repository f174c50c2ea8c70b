#include "cornerdet/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace cornerdet {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) {
    throw FormatError(std::string("truncated archive while reading ") + what);
  }
  return v;
}

void put_magic(std::ostream& os, const char* magic) { os.write(magic, 4); }

void expect_magic(std::istream& is, const char* magic) {
  std::array<char, 4> m{};
  if (!is.read(m.data(), 4) || std::memcmp(m.data(), magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

void put_body(std::ostream& os, const Tensor<float>& t) {
  if (t.ndim() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor rank too large");
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

Tensor<float> get_body(std::istream& is) {
  const auto ndim = get<std::uint8_t>(is, "ndim");
  if (ndim == 0) throw FormatError("tensor with zero dimensions");
  Shape shape;
  std::uint64_t total = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const auto d = get<std::uint64_t>(is, "dims");
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError("implausible tensor extent");
    total *= d;
    if (total > (std::uint64_t{1} << 32)) throw FormatError("tensor too large");
    shape.push_back(static_cast<std::size_t>(d));
  }
  std::vector<float> data(static_cast<std::size_t>(total));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total * sizeof(float)))) {
    throw FormatError("truncated tensor data");
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

}  // namespace

void write_archive(std::ostream& os, const TensorArchive& archive) {
  put_magic(os, "CNCK");
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, t] : archive) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("entry name too long");
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_body(os, t);
  }
}

TensorArchive read_archive(std::istream& is) {
  expect_magic(is, "CNCK");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(is, "entry count");
  TensorArchive out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated entry name");
    if (!out.emplace(name, get_body(is)).second) throw FormatError("duplicate entry " + name);
  }
  return out;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_archive(os, archive);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return read_archive(is);
}

void write_tensor(std::ostream& os, const Tensor<float>& t) {
  put_magic(os, "CNTF");
  put<std::uint32_t>(os, kTensorFileVersion);
  put_body(os, t);
}

Tensor<float> read_tensor(std::istream& is) {
  expect_magic(is, "CNTF");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kTensorFileVersion) throw FormatError("unsupported tensor file version " + std::to_string(version));
  return get_body(is);
}

void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor<float> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open tensor file: " + path.string());
  return read_tensor(is);
}

}  // namespace cornerdet
