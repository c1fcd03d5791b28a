#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hitl/tensor.hpp"

namespace hitl {

// Binary layout, all integers little-endian u32:
//   "ATTH" | version | metadata length | metadata (UTF-8 JSON, may be empty)
//   | record count | records...
// record: name length | name | rank | dims... | float32 data (LE)
inline constexpr char kCheckpointMagic[4] = {'A', 'T', 'T', 'H'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> params;
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IncompatibleFormatError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  out += ckpt.metadata;
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : p.value.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw IncompatibleFormatError("not a checkpoint file (bad magic)");
  }
  detail::ByteReader in(bytes);
  in.bytes(4, "magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw IncompatibleFormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.metadata = in.bytes(in.u32("metadata length"), "metadata");
  const std::uint32_t count = in.u32("record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    NamedTensor p;
    p.name = in.bytes(in.u32("name length"), "name");
    const std::uint32_t rank = in.u32("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.u32("dims");
    std::vector<float> data(shape_numel(shape));
    for (auto& f : data) f = std::bit_cast<float>(in.u32("tensor data"));
    p.value = Tensor(std::move(shape), std::move(data));
    ckpt.params.push_back(std::move(p));
  }
  if (!in.done()) throw IncompatibleFormatError("trailing bytes after checkpoint records");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IncompatibleFormatError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace hitl
