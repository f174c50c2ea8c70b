#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// Raised for unreadable, truncated or malformed archives.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kTensorFileVersion = 1;

/// Named-tensor archive: "CNCK", u32 version, u32 count, then per entry
/// u16 name length + UTF-8 name, u8 ndim, u64 dims, f32 data. Little endian.
/// Entries are written in key order.
using TensorArchive = std::map<std::string, Tensor<float>>;

void write_archive(std::ostream& os, const TensorArchive& archive);
TensorArchive read_archive(std::istream& is);
void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

/// Single tensor container: "CNTF", u32 version, u8 ndim, u64 dims, f32 data.
void write_tensor(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> load_tensor(const std::filesystem::path& path);

}  // namespace cornerdet
