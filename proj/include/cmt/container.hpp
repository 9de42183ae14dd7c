#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cmt/tensor.hpp"

// CMTW binary tensor container. All integers little-endian.
//
//   "CMTW" | version u32 | [spec record] | count u32 | tensor * count
//   tensor := name_len u32 | name utf-8 | dtype u8 (0 f32, 1 f64) | rank u8 |
//             extents u64 * rank | raw little-endian data
//
// The spec record (u32 length + JSON text) is present only in model files.

namespace cmt {

inline constexpr char kContainerMagic[4] = {'C', 'M', 'T', 'W'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedTensor {
  std::string name;
  std::variant<Tensorf, Tensord> value;

  DType dtype() const { return value.index() == 0 ? DType::F32 : DType::F64; }
  const Shape& shape() const;
  /// Widened copy, whatever the stored precision.
  Tensord as_f64() const;
  Tensorf as_f32() const;
};

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors,
                   const std::optional<std::string>& spec_record = std::nullopt);

struct ContainerContents {
  std::optional<std::string> spec_record;
  std::vector<NamedTensor> tensors;
};

/// Throws BadMagicError, VersionError, TruncatedError or FormatError.
ContainerContents read_tensors(std::istream& is, bool expect_spec_record = false);

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer);

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Little-endian primitives shared with the spec-file reader.
void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is, const char* what);

}  // namespace cmt
