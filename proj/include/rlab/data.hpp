#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlab/common.hpp"

namespace rlab {

template <typename T>
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;  // CHW layout, values in [0, 1]

  int64_t plane() const { return static_cast<int64_t>(height) * width; }
  int64_t size() const { return channels * plane(); }
  T& at(int c, int y, int x) { return data[(static_cast<int64_t>(c) * height + y) * width + x]; }
  T at(int c, int y, int x) const { return data[(static_cast<int64_t>(c) * height + y) * width + x]; }
};

enum class KernelKind { gaussian, box, linear_motion };

const char* kernel_kind_name(KernelKind k);
KernelKind kernel_kind_from_name(const std::string& s);

struct BlurDescriptor {
  KernelKind kind = KernelKind::gaussian;
  int size = 5;         // odd
  double sigma = 1.0;   // gaussian
  double angle = 0.0;   // linear_motion, radians
  double length = 3.0;  // linear_motion, pixels
};

template <typename T>
struct BlurKernel {
  BlurDescriptor desc;
  int size = 0;
  std::vector<T> weights;  // size*size, nonnegative, sums to 1
};

template <typename T>
BlurKernel<T> make_kernel(const BlurDescriptor& desc);

// Procedural sharp scene: gradient background, rectangles, disks, oriented
// hard edges and at least one sinusoidal grating above half-Nyquist, then a
// contrast stretch so every image spans most of [0, 1].
template <typename T>
Image<T> generate_synthetic_scene(uint64_t seed, int height, int width);

// Channelwise 2-D correlation with reflected (mirror) border handling.
template <typename T>
Image<T> apply_blur(const Image<T>& img, const BlurKernel<T>& kernel);

template <typename T>
struct ImagePair {
  int64_t id = 0;
  uint64_t scene_seed = 0;
  Image<T> x;        // sharp ground truth
  Image<T> y_clean;  // degraded observation
  BlurDescriptor blur;
};

struct DatasetSpec {
  int n_train = 200;
  int n_test = 50;
  int height = 32;
  int width = 32;
  KernelKind kernel_family = KernelKind::gaussian;
  uint64_t seed = 0;
  double sigma_min = 0.9;
  double sigma_max = 1.6;
};

template <typename T>
struct Dataset {
  std::vector<ImagePair<T>> train;
  std::vector<ImagePair<T>> test;
};

// Deterministic dataset; train and test draw from disjoint seed streams.
template <typename T>
Dataset<T> make_dataset(const DatasetSpec& spec);

// ---- PNG I/O (8-bit RGB; quantization happens only here) ----

template <typename T>
void save_png(const std::string& path, const Image<T>& img);

template <typename T>
Image<T> load_png(const std::string& path);

// Writes train/ and test/ PNG pairs plus manifest.json (ids, seeds, kernel
// descriptors, file paths).
template <typename T>
void write_dataset(const std::string& dir, const Dataset<T>& ds,
                   const DatasetSpec& spec);

// Loads a dataset directory. When the manifest carries a blur descriptor the
// degraded image is recomputed from the stored sharp frame, which keeps
// y_clean == A(x) exact; foreign sharp/blurred pairs fall back to the stored
// blurred PNG.
template <typename T>
Dataset<T> load_dataset(const std::string& dir);

uint64_t file_hash(const std::string& path);

}  // namespace rlab
