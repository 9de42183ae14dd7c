#include "cmt/container.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace cmt {

static_assert(std::endian::native == std::endian::little,
              "CMTW I/O writes native buffers; add byte swapping for big-endian hosts");

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw TruncatedError(std::string("CMTW: file truncated while reading ") + what);
  }
  return v;
}

void read_bytes(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw TruncatedError("CMTW: file truncated while reading " + what);
  }
}

// Guards allocations driven by header fields of a damaged file.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;
constexpr std::uint32_t kMaxNameBytes = 1u << 16;
constexpr std::uint32_t kMaxRecordBytes = 1u << 26;

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
std::uint32_t read_u32(std::istream& is, const char* what) { return read_le<std::uint32_t>(is, what); }

const Shape& NamedTensor::shape() const {
  return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, value);
}

Tensord NamedTensor::as_f64() const {
  return std::visit([](const auto& t) { return t.template cast<double>(); }, value);
}

Tensorf NamedTensor::as_f32() const {
  return std::visit([](const auto& t) { return t.template cast<float>(); }, value);
}

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors,
                   const std::optional<std::string>& spec_record) {
  os.write(kContainerMagic, 4);
  write_le(os, kContainerVersion);
  if (spec_record) {
    write_le(os, static_cast<std::uint32_t>(spec_record->size()));
    os.write(spec_record->data(), static_cast<std::streamsize>(spec_record->size()));
  }
  write_le(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_le(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_le(os, static_cast<std::uint8_t>(t.dtype()));
    const Shape& shape = t.shape();
    write_le(os, static_cast<std::uint8_t>(shape.size()));
    for (Index e : shape) write_le(os, static_cast<std::uint64_t>(e));
    std::visit(
        [&os](const auto& v) {
          using S = typename std::decay_t<decltype(v)>::value_type;
          os.write(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::streamsize>(v.size() * static_cast<Index>(sizeof(S))));
        },
        t.value);
  }
  if (!os) throw IoError("CMTW: write failed");
}

ContainerContents read_tensors(std::istream& is, bool expect_spec_record) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4) throw TruncatedError("CMTW: file truncated while reading magic bytes");
  if (std::memcmp(magic, kContainerMagic, 4) != 0) {
    throw BadMagicError("CMTW: bad magic bytes '" + std::string(magic, 4) +
                        "', expected 'CMTW'");
  }
  const auto version = read_le<std::uint32_t>(is, "format version");
  if (version != kContainerVersion) {
    throw VersionError("CMTW: unsupported format version " + std::to_string(version) +
                       " (this build reads version " + std::to_string(kContainerVersion) + ")");
  }

  ContainerContents out;
  if (expect_spec_record) {
    const auto len = read_le<std::uint32_t>(is, "spec record length");
    if (len > kMaxRecordBytes) throw FormatError("CMTW: implausible spec record length");
    std::string record(len, '\0');
    read_bytes(is, record.data(), len, "spec record");
    out.spec_record = std::move(record);
  }

  const auto count = read_le<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_le<std::uint32_t>(is, "tensor name length");
    if (name_len > kMaxNameBytes) throw FormatError("CMTW: implausible tensor name length");
    std::string name(name_len, '\0');
    read_bytes(is, name.data(), name_len, "tensor name");
    const auto dtype = read_le<std::uint8_t>(is, "dtype");
    if (dtype > 1) throw FormatError("CMTW: unknown dtype code " + std::to_string(dtype) + " for '" + name + "'");
    const auto rank = read_le<std::uint8_t>(is, "rank");
    Shape shape(rank);
    std::uint64_t elements = 1;
    for (auto& e : shape) {
      const auto extent = read_le<std::uint64_t>(is, "extent");
      if (extent == 0 || extent > kMaxElements) {
        throw FormatError("CMTW: invalid extent " + std::to_string(extent) + " for '" + name + "'");
      }
      elements *= extent;
      if (elements > kMaxElements) throw FormatError("CMTW: tensor '" + name + "' too large");
      e = static_cast<Index>(extent);
    }
    auto read_payload = [&](auto tag) {
      using S = decltype(tag);
      std::vector<S> data(static_cast<std::size_t>(elements));
      read_bytes(is, reinterpret_cast<char*>(data.data()), data.size() * sizeof(S),
                 "data of '" + name + "'");
      return Tensor<S>(shape, std::move(data));
    };
    NamedTensor t{name, {}};
    if (dtype == 0) {
      t.value = read_payload(float{});
    } else {
      t.value = read_payload(double{});
    }
    out.tensors.push_back(std::move(t));
  }
  return out;
}

void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    try {
      writer(os);
      os.flush();
      if (!os) throw IoError("write to '" + tmp.string() + "' failed");
    } catch (...) {
      os.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move '" + tmp.string() + "' to '" + path + "'");
  }
}

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, [&](std::ostream& os) { write_tensors(os, tensors); });
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_tensors(is).tensors;
}

}  // namespace cmt
