#include "rlab/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace rlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint: short write to " + path);
}

void read_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint: truncated file " + path);
}

template <typename U>
void write_pod(std::FILE* f, U v, const std::string& path) {
  write_bytes(f, &v, sizeof(U), path);
}

template <typename U>
U read_pod(std::FILE* f, const std::string& path) {
  U v;
  read_bytes(f, &v, sizeof(U), path);
  return v;
}

}  // namespace

void save_checkpoint_file(const std::string& path, const CheckpointFile& ck) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_bytes(f.get(), kMagic, sizeof(kMagic), path);
  write_pod<uint32_t>(f.get(), kVersion, path);
  write_pod<uint32_t>(f.get(), static_cast<uint32_t>(ck.meta_json.size()), path);
  write_bytes(f.get(), ck.meta_json.data(), ck.meta_json.size(), path);
  write_pod<uint32_t>(f.get(), static_cast<uint32_t>(ck.arrays.size()), path);
  for (const NamedArray& a : ck.arrays) {
    if (a.name.size() > 0xffff)
      throw std::runtime_error("checkpoint: array name too long: " + a.name);
    write_pod<uint16_t>(f.get(), static_cast<uint16_t>(a.name.size()), path);
    write_bytes(f.get(), a.name.data(), a.name.size(), path);
    write_pod<uint8_t>(f.get(), static_cast<uint8_t>(a.dtype), path);
    write_pod<uint8_t>(f.get(), static_cast<uint8_t>(a.shape.size()), path);
    int64_t n = 1;
    for (int d : a.shape) {
      write_pod<int32_t>(f.get(), d, path);
      n *= d;
    }
    if (n != static_cast<int64_t>(a.values.size()))
      throw std::runtime_error("checkpoint: array '" + a.name + "' size mismatch");
    if (a.dtype == ArrayDType::f32) {
      std::vector<float> tmp(a.values.begin(), a.values.end());
      write_bytes(f.get(), tmp.data(), tmp.size() * sizeof(float), path);
    } else {
      write_bytes(f.get(), a.values.data(), a.values.size() * sizeof(double), path);
    }
  }
}

CheckpointFile load_checkpoint_file(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  read_bytes(f.get(), magic, sizeof(magic), path);
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(f.get(), path);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version) + " in " + path);
  CheckpointFile ck;
  uint32_t meta_len = read_pod<uint32_t>(f.get(), path);
  ck.meta_json.resize(meta_len);
  read_bytes(f.get(), ck.meta_json.data(), meta_len, path);
  uint32_t n_arrays = read_pod<uint32_t>(f.get(), path);
  ck.arrays.resize(n_arrays);
  for (NamedArray& a : ck.arrays) {
    uint16_t name_len = read_pod<uint16_t>(f.get(), path);
    a.name.resize(name_len);
    read_bytes(f.get(), a.name.data(), name_len, path);
    a.dtype = static_cast<ArrayDType>(read_pod<uint8_t>(f.get(), path));
    uint8_t ndim = read_pod<uint8_t>(f.get(), path);
    a.shape.resize(ndim);
    int64_t n = 1;
    for (int i = 0; i < ndim; ++i) {
      a.shape[i] = read_pod<int32_t>(f.get(), path);
      n *= a.shape[i];
    }
    a.values.resize(n);
    if (a.dtype == ArrayDType::f32) {
      std::vector<float> tmp(n);
      read_bytes(f.get(), tmp.data(), tmp.size() * sizeof(float), path);
      for (int64_t i = 0; i < n; ++i) a.values[i] = tmp[i];
    } else if (a.dtype == ArrayDType::f64) {
      read_bytes(f.get(), a.values.data(), n * sizeof(double), path);
    } else {
      throw std::runtime_error("checkpoint: unknown dtype in " + path);
    }
  }
  return ck;
}

}  // namespace rlab
