#pragma once

// Versioned binary container shared by weights files, prompt pools and
// dataset tensors. Layout (little-endian, doubles as raw IEEE-754 bytes):
//
//   magic            8 bytes, includes format version tag
//   section_count    u32
//   per section:
//     name_len u32, name bytes
//     kind     u8   (0 = tensor, 1 = text)
//     payload_len u64, payload bytes
//   checksum         u64  FNV-1a over all section bytes
//
// Tensor payload: ndims u32, each dim u64, then values as raw doubles.
// Round-trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "odcl/errors.hpp"
#include "odcl/tensor.hpp"

namespace odcl {

inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a_doubles(const std::vector<double>& v, std::uint64_t h = 14695981039346656037ULL) {
  return fnv1a(reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(double), h);
}

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ContractError("archive: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

class ArchiveWriter {
 public:
  explicit ArchiveWriter(std::string magic) : magic_(std::move(magic)) {
    require(magic_.size() == 8, "archive: magic must be exactly 8 bytes");
  }

  void add_tensor(const std::string& name, const std::vector<std::size_t>& shape, const std::vector<double>& values) {
    require(shape_size(shape) == values.size(), "archive: tensor payload disagrees with shape");
    std::vector<std::uint8_t> payload;
    detail::put<std::uint32_t>(payload, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::put<std::uint64_t>(payload, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    payload.insert(payload.end(), p, p + values.size() * sizeof(double));
    add_section(name, 0, std::move(payload));
  }
  void add_tensor(const std::string& name, const Tensor& t) { add_tensor(name, t.shape(), t.values()); }

  void add_text(const std::string& name, const std::string& text) {
    add_section(name, 1, std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  void write(const std::filesystem::path& path) const {
    std::vector<std::uint8_t> body;
    detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& s : sections_) {
      detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(s.name.size()));
      body.insert(body.end(), s.name.begin(), s.name.end());
      detail::put<std::uint8_t>(body, s.kind);
      detail::put<std::uint64_t>(body, s.payload.size());
      body.insert(body.end(), s.payload.begin(), s.payload.end());
    }
    const std::uint64_t checksum = fnv1a(body.data(), body.size());
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFoundError("archive: cannot open for writing: " + path.string());
    out.write(magic_.data(), 8);
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw NotFoundError("archive: write failed: " + path.string());
  }

 private:
  struct Section {
    std::string name;
    std::uint8_t kind;
    std::vector<std::uint8_t> payload;
  };
  void add_section(const std::string& name, std::uint8_t kind, std::vector<std::uint8_t> payload) {
    require(!index_.count(name), "archive: duplicate section '" + name + "'");
    index_[name] = sections_.size();
    sections_.push_back({name, kind, std::move(payload)});
  }
  std::string magic_;
  std::vector<Section> sections_;
  std::map<std::string, std::size_t> index_;
};

class Archive {
 public:
  static Archive read(const std::filesystem::path& path, const std::string& magic) {
    require(magic.size() == 8, "archive: magic must be exactly 8 bytes");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("archive: missing file: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 + sizeof(std::uint64_t)) throw ContractError("archive: truncated file: " + path.string());
    if (std::memcmp(bytes.data(), magic.data(), 8) != 0)
      throw ContractError("archive: bad magic in " + path.string());
    const std::size_t body_len = bytes.size() - 8 - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + 8 + body_len, sizeof(stored));
    if (fnv1a(bytes.data() + 8, body_len) != stored)
      throw ContractError("archive: checksum mismatch in " + path.string());

    Archive a;
    a.checksum_ = stored;
    std::vector<std::uint8_t> body(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(body_len));
    std::size_t pos = 0;
    const auto count = detail::take<std::uint32_t>(body, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = detail::take<std::uint32_t>(body, pos);
      if (pos + name_len > body.size()) throw ContractError("archive: truncated section name");
      std::string name(body.begin() + static_cast<std::ptrdiff_t>(pos),
                       body.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
      pos += name_len;
      const auto kind = detail::take<std::uint8_t>(body, pos);
      const auto payload_len = detail::take<std::uint64_t>(body, pos);
      if (pos + payload_len > body.size()) throw ContractError("archive: truncated payload");
      a.sections_[name] = {kind, std::vector<std::uint8_t>(body.begin() + static_cast<std::ptrdiff_t>(pos),
                                                           body.begin() + static_cast<std::ptrdiff_t>(pos + payload_len))};
      a.order_.push_back(name);
      pos += payload_len;
    }
    return a;
  }

  bool has(const std::string& name) const { return sections_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::uint64_t checksum() const { return checksum_; }

  Tensor tensor(const std::string& name) const {
    const auto& s = section(name, 0);
    std::size_t pos = 0;
    const auto ndims = detail::take<std::uint32_t>(s.payload, pos);
    std::vector<std::size_t> shape(ndims);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::take<std::uint64_t>(s.payload, pos));
    const std::size_t n = shape_size(shape);
    if (pos + n * sizeof(double) != s.payload.size()) throw ContractError("archive: tensor payload size mismatch");
    std::vector<double> values(n);
    std::memcpy(values.data(), s.payload.data() + pos, n * sizeof(double));
    return Tensor::from(std::move(shape), std::move(values));
  }

  std::string text(const std::string& name) const {
    const auto& s = section(name, 1);
    return std::string(s.payload.begin(), s.payload.end());
  }

 private:
  struct Section {
    std::uint8_t kind;
    std::vector<std::uint8_t> payload;
  };
  const Section& section(const std::string& name, std::uint8_t kind) const {
    auto it = sections_.find(name);
    if (it == sections_.end()) throw NotFoundError("archive: missing section '" + name + "'");
    require(it->second.kind == kind, "archive: section '" + name + "' has unexpected kind");
    return it->second;
  }
  std::map<std::string, Section> sections_;
  std::vector<std::string> order_;
  std::uint64_t checksum_ = 0;
};

}  // namespace odcl
