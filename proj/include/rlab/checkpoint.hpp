#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlab/common.hpp"

namespace rlab {

// Versioned binary container for named parameter arrays. Arrays carry an
// explicit dtype tag: f32 payloads are the default wire format (raw 32-bit
// floats, little-endian); f64 is used by 64-bit-precision training runs so
// that checkpoint/resume round-trips are bit-exact in that mode.
enum class ArrayDType : uint8_t { f32 = 0, f64 = 1 };

struct NamedArray {
  std::string name;
  Shape shape;
  ArrayDType dtype = ArrayDType::f32;
  std::vector<double> values;  // widest type in memory; cast on write
};

struct CheckpointFile {
  std::string meta_json;  // variant config and run metadata
  std::vector<NamedArray> arrays;
};

void save_checkpoint_file(const std::string& path, const CheckpointFile& ck);
CheckpointFile load_checkpoint_file(const std::string& path);

}  // namespace rlab
