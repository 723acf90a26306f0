#ifndef PHPAV_ARRAY_IO_HPP
#define PHPAV_ARRAY_IO_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "phpav/common.hpp"
#include "phpav/rng.hpp"
#include "phpav/tensor.hpp"

// On-disk array format: magic "PAV1", u32 rank, u64 dims[rank], then raw
// little-endian float32 payload. Shape header is validated against the
// manifest on load. JSON manifests are dumped canonically (sorted keys, no
// timestamps) so that save -> load -> save is byte-identical.

namespace phpav {

namespace fs = std::filesystem;

inline constexpr char kArrayMagic[4] = {'P', 'A', 'V', '1'};

template <typename T>
void write_array(const fs::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open for write: " + path.string());
  f.write(kArrayMagic, 4);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (long d : t.shape) {
    uint64_t v = static_cast<uint64_t>(d);
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  std::vector<float> buf(t.data.begin(), t.data.end());
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw io_error("short write: " + path.string());
}

template <typename T>
Tensor<T> read_array(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kArrayMagic, 4) != 0)
    throw io_error("bad array magic in " + path.string());
  uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  if (!f || rank > 8) throw io_error("bad array rank in " + path.string());
  std::vector<long> shape(rank);
  for (auto& d : shape) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    d = static_cast<long>(v);
  }
  if (!f) throw io_error("truncated array header in " + path.string());
  long n = Tensor<T>::numel_of(shape);
  std::vector<float> buf(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw io_error("truncated array payload in " + path.string());
  // reject trailing bytes: a tampered length must not load silently
  f.peek();
  if (!f.eof()) throw io_error("trailing bytes in " + path.string());
  Tensor<T> t(shape);
  std::copy(buf.begin(), buf.end(), t.data.begin());
  return t;
}

// FNV-1a over the float32 payload (shape included), as a stable hex string.
template <typename T>
std::string array_digest(const Tensor<T>& t) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (long d : t.shape) {
    uint64_t v = static_cast<uint64_t>(d);
    h = fnv1a(&v, 8, h);
  }
  for (T x : t.data) {
    float f = static_cast<float>(x);
    h = fnv1a(&f, 4, h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Combined digest of a named-array set, order-independent of insertion
// (std::map iterates sorted).
template <typename T>
std::string fingerprint_arrays(const std::map<std::string, const Tensor<T>*>& arrays) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : arrays) {
    h = fnv1a(name.data(), name.size(), h);
    std::string d = array_digest(*t);
    h = fnv1a(d.data(), d.size(), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open for write: " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw io_error("short write: " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw io_error("bad json in " + path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace phpav

#endif
