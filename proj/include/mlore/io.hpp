#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mlore {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Unreadable, unwritable or malformed files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Container layout: 8-byte magic, u64 manifest length, JSON manifest, then
// the raw little-endian planes. The manifest lists every plane as
// {name, dtype, shape, offset, bytes}, offsets relative to the payload start.

struct Plane {
  std::string name;
  std::string dtype;  // "float32" or "uint8"
  std::vector<std::size_t> shape;
  std::vector<unsigned char> bytes;

  std::size_t count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "float32") return 4;
  if (dtype == "uint8") return 1;
  throw IoError("unknown dtype '" + dtype + "'");
}

inline Plane make_float_plane(std::string name, std::vector<std::size_t> shape, const std::vector<float>& values) {
  Plane p{std::move(name), "float32", std::move(shape), {}};
  p.bytes.resize(values.size() * 4);
  if (!values.empty()) std::memcpy(p.bytes.data(), values.data(), p.bytes.size());
  return p;
}

inline Plane make_byte_plane(std::string name, std::vector<std::size_t> shape, std::vector<unsigned char> values) {
  return Plane{std::move(name), "uint8", std::move(shape), std::move(values)};
}

inline std::vector<float> float_values(const Plane& p) {
  if (p.dtype != "float32") throw IoError("plane '" + p.name + "' is not float32");
  std::vector<float> v(p.bytes.size() / 4);
  if (!v.empty()) std::memcpy(v.data(), p.bytes.data(), v.size() * 4);
  return v;
}

struct Container {
  nlohmann::json meta;
  std::vector<Plane> planes;

  const Plane& plane(const std::string& name) const {
    for (const auto& p : planes)
      if (p.name == name) return p;
    throw IoError("missing plane '" + name + "'");
  }
};

inline void write_container(const std::string& path, const std::string& magic, const Container& c) {
  if (magic.size() != 8) throw std::logic_error("container magic must be 8 bytes");
  nlohmann::json manifest = c.meta;
  manifest["planes"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : c.planes) {
    if (p.bytes.size() != p.count() * dtype_size(p.dtype)) throw std::logic_error("plane '" + p.name + "': size mismatch");
    manifest["planes"].push_back({{"name", p.name}, {"dtype", p.dtype}, {"shape", p.shape}, {"offset", offset},
                                  {"bytes", p.bytes.size()}});
    offset += p.bytes.size();
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  const std::uint64_t len = text.size();
  out.write(magic.data(), 8);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : c.planes) out.write(reinterpret_cast<const char*>(p.bytes.data()), static_cast<std::streamsize>(p.bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Container read_container(const std::string& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 16 || std::string(blob.data(), 8) != magic) {
    throw IoError(path + ": not a " + magic + " file");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, blob.data() + 8, 8);
  if (len > blob.size() - 16) throw IoError(path + ": truncated manifest");
  Container c;
  try {
    c.meta = nlohmann::json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad manifest: " + e.what());
  }
  const std::size_t base = 16 + len;
  try {
    for (const auto& e : c.meta.at("planes")) {
      Plane p{e.at("name").get<std::string>(), e.at("dtype").get<std::string>(),
              e.at("shape").get<std::vector<std::size_t>>(), {}};
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto bytes = e.at("bytes").get<std::uint64_t>();
      if (bytes != p.count() * dtype_size(p.dtype) || offset > blob.size() - base || bytes > blob.size() - base - offset) {
        throw IoError(path + ": plane '" + p.name + "' out of bounds");
      }
      p.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(base + offset),
                     blob.begin() + static_cast<std::ptrdiff_t>(base + offset + bytes));
      c.planes.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad manifest: " + e.what());
  }
  c.meta.erase("planes");
  return c;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace mlore
