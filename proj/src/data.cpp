#include "rlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace rlab {

using nlohmann::json;
namespace fs = std::filesystem;

const char* kernel_kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::gaussian: return "gaussian";
    case KernelKind::box: return "box";
    case KernelKind::linear_motion: return "linear_motion";
  }
  return "?";
}

KernelKind kernel_kind_from_name(const std::string& s) {
  if (s == "gaussian") return KernelKind::gaussian;
  if (s == "box") return KernelKind::box;
  if (s == "linear_motion") return KernelKind::linear_motion;
  throw std::invalid_argument("unknown kernel kind '" + s + "'");
}

template <typename T>
BlurKernel<T> make_kernel(const BlurDescriptor& desc) {
  if (desc.size < 1 || desc.size % 2 == 0)
    throw std::invalid_argument("blur kernel size must be odd, got " +
                                std::to_string(desc.size));
  const int k = desc.size;
  const int c = k / 2;
  BlurKernel<T> ker;
  ker.desc = desc;
  ker.size = k;
  ker.weights.assign(static_cast<size_t>(k) * k, T(0));

  switch (desc.kind) {
    case KernelKind::gaussian: {
      if (desc.sigma <= 0) throw std::invalid_argument("gaussian kernel: sigma must be > 0");
      const double s2 = 2.0 * desc.sigma * desc.sigma;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double dy = i - c, dx = j - c;
          ker.weights[i * k + j] = static_cast<T>(std::exp(-(dy * dy + dx * dx) / s2));
        }
      break;
    }
    case KernelKind::box:
      std::fill(ker.weights.begin(), ker.weights.end(), T(1));
      break;
    case KernelKind::linear_motion: {
      // splat samples along a centered segment, bilinear weights
      const double len = std::max(1.0, desc.length);
      const int steps = std::max(32, 8 * k);
      const double cx = std::cos(desc.angle), sy = std::sin(desc.angle);
      for (int s = 0; s < steps; ++s) {
        const double t = (static_cast<double>(s) / (steps - 1) - 0.5) * (len - 1.0);
        const double py = c + t * sy, px = c + t * cx;
        const int y0 = static_cast<int>(std::floor(py)), x0 = static_cast<int>(std::floor(px));
        const double fy = py - y0, fx = px - x0;
        auto splat = [&](int y, int x, double w) {
          if (y >= 0 && y < k && x >= 0 && x < k)
            ker.weights[y * k + x] += static_cast<T>(w);
        };
        splat(y0, x0, (1 - fy) * (1 - fx));
        splat(y0, x0 + 1, (1 - fy) * fx);
        splat(y0 + 1, x0, fy * (1 - fx));
        splat(y0 + 1, x0 + 1, fy * fx);
      }
      break;
    }
  }

  T sum = T(0);
  for (T w : ker.weights) sum += w;
  for (T& w : ker.weights) w /= sum;
  return ker;
}

// ---- synthetic scenes ----

namespace {

template <typename T>
void fill_gradient(Image<T>& img, Rng& rng) {
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.0, 0.35);
    c1[c] = rng.uniform(0.65, 1.0);
  }
  if (rng.uniform() < 0.5)
    for (int c = 0; c < 3; ++c) std::swap(c0[c], c1[c]);
  const int dir = static_cast<int>(rng.uniform_int(0, 2));  // 0 vert, 1 horiz, 2 diag
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double t;
      if (dir == 0)
        t = static_cast<double>(y) / (img.height - 1);
      else if (dir == 1)
        t = static_cast<double>(x) / (img.width - 1);
      else
        t = 0.5 * (static_cast<double>(y) / (img.height - 1) +
                   static_cast<double>(x) / (img.width - 1));
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<T>(c0[c] + t * (c1[c] - c0[c]));
    }
}

template <typename T>
void draw_rect(Image<T>& img, Rng& rng) {
  const int H = img.height, W = img.width;
  const int w = static_cast<int>(rng.uniform_int(W / 8, W / 2));
  const int h = static_cast<int>(rng.uniform_int(H / 8, H / 2));
  const int x0 = static_cast<int>(rng.uniform_int(0, W - w - 1));
  const int y0 = static_cast<int>(rng.uniform_int(0, H - h - 1));
  double col[3];
  for (double& c : col) c = rng.uniform();
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<T>(col[c]);
}

template <typename T>
void draw_disk(Image<T>& img, Rng& rng) {
  const int H = img.height, W = img.width;
  const double cy = rng.uniform(0.0, H - 1.0), cx = rng.uniform(0.0, W - 1.0);
  const double r = rng.uniform(2.0, std::min(H, W) / 3.0);
  double col[3];
  for (double& c : col) c = rng.uniform();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<T>(col[c]);
}

template <typename T>
void draw_edge(Image<T>& img, Rng& rng) {
  // hard oriented edge: shade one half-plane toward a random color
  const int H = img.height, W = img.width;
  const double theta = rng.uniform(0.0, M_PI);
  const double ny = std::sin(theta), nx = std::cos(theta);
  const double py = rng.uniform(0.2, 0.8) * H, px = rng.uniform(0.2, 0.8) * W;
  const double blend = rng.uniform(0.5, 0.95);
  double col[3];
  for (double& c : col) c = rng.uniform();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if ((y - py) * ny + (x - px) * nx > 0)
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) =
              static_cast<T>((1 - blend) * img.at(c, y, x) + blend * col[c]);
}

template <typename T>
void add_grating(Image<T>& img, Rng& rng, double freq_lo, double freq_hi) {
  const double f = rng.uniform(freq_lo, freq_hi);  // cycles per pixel
  const double theta = rng.uniform(0.0, M_PI);
  const double fy = f * std::sin(theta), fx = f * std::cos(theta);
  const double amp = rng.uniform(0.10, 0.22);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const bool all_channels = rng.uniform() < 0.6;
  const int ch = static_cast<int>(rng.uniform_int(0, 2));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double v = amp * std::sin(2.0 * M_PI * (fy * y + fx * x) + phase);
      for (int c = 0; c < 3; ++c)
        if (all_channels || c == ch)
          img.at(c, y, x) = static_cast<T>(img.at(c, y, x) + v);
    }
}

}  // namespace

template <typename T>
Image<T> generate_synthetic_scene(uint64_t seed, int height, int width) {
  if (height < 16 || width < 16)
    throw std::invalid_argument("generate_synthetic_scene: dims must be >= 16");
  Rng rng(mix_seed(seed, 0x5ce9eull));
  Image<T> img;
  img.channels = 3;
  img.height = height;
  img.width = width;
  img.data.assign(img.size(), T(0));

  fill_gradient(img, rng);
  const int n_rect = static_cast<int>(rng.uniform_int(2, 4));
  for (int i = 0; i < n_rect; ++i) draw_rect(img, rng);
  const int n_disk = static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < n_disk; ++i) draw_disk(img, rng);
  const int n_edge = static_cast<int>(rng.uniform_int(1, 2));
  for (int i = 0; i < n_edge; ++i) draw_edge(img, rng);
  // one grating above half-Nyquist guarantees measurable high-band energy
  add_grating(img, rng, 0.27, 0.45);
  if (rng.uniform() < 0.5) add_grating(img, rng, 0.08, 0.25);

  for (T& v : img.data) v = std::clamp(v, T(0), T(1));

  // contrast stretch to a fixed span; keeps edges sharp, guarantees that the
  // value histogram covers most of [0, 1]
  T lo = img.data[0], hi = img.data[0];
  for (T v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo > T(1e-6)) {
    const T a = T(0.96) / (hi - lo);
    for (T& v : img.data) v = T(0.02) + (v - lo) * a;
  }
  return img;
}

template <typename T>
Image<T> apply_blur(const Image<T>& img, const BlurKernel<T>& kernel) {
  const int k = kernel.size, c0 = k / 2;
  const int H = img.height, W = img.width;
  T wsum = T(0);
  for (T w : kernel.weights) {
    if (w < T(0)) throw std::invalid_argument("apply_blur: kernel has negative weights");
    wsum += w;
  }
  if (std::abs(static_cast<double>(wsum) - 1.0) > 1e-9)
    throw std::invalid_argument("apply_blur: kernel weights must sum to 1");

  auto reflect = [](int i, int n) {
    // mirror without repeating the border sample (-1 -> 1)
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  };

  Image<T> out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T acc = T(0);
        for (int i = 0; i < k; ++i) {
          const int yy = reflect(y + i - c0, H);
          for (int j = 0; j < k; ++j) {
            const int xx = reflect(x + j - c0, W);
            acc += kernel.weights[i * k + j] * img.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = acc;
      }
  return out;
}

// ---- dataset ----

namespace {

BlurDescriptor sample_descriptor(KernelKind family, Rng& rng) {
  BlurDescriptor d;
  d.kind = family;
  switch (family) {
    case KernelKind::gaussian:
      break;  // sigma filled by caller
    case KernelKind::box:
      d.size = rng.uniform() < 0.5 ? 3 : 5;
      break;
    case KernelKind::linear_motion:
      d.size = 7;
      d.angle = rng.uniform(0.0, M_PI);
      d.length = rng.uniform(3.0, 6.0);
      break;
  }
  return d;
}

template <typename T>
ImagePair<T> make_pair(int64_t id, uint64_t scene_seed, const DatasetSpec& spec,
                       Rng& rng) {
  ImagePair<T> p;
  p.id = id;
  p.scene_seed = scene_seed;
  p.x = generate_synthetic_scene<T>(scene_seed, spec.height, spec.width);
  p.blur = sample_descriptor(spec.kernel_family, rng);
  if (spec.kernel_family == KernelKind::gaussian) {
    p.blur.sigma = rng.uniform(spec.sigma_min, spec.sigma_max);
    int sz = 2 * static_cast<int>(std::ceil(2.0 * p.blur.sigma)) + 1;
    p.blur.size = std::clamp(sz, 3, 9);
  }
  p.y_clean = apply_blur(p.x, make_kernel<T>(p.blur));
  return p;
}

}  // namespace

template <typename T>
Dataset<T> make_dataset(const DatasetSpec& spec) {
  if (spec.n_train < 0 || spec.n_test < 0)
    throw std::invalid_argument("make_dataset: negative pair count");
  Dataset<T> ds;
  ds.train.reserve(spec.n_train);
  ds.test.reserve(spec.n_test);
  // disjoint id/seed streams for the two splits
  for (int i = 0; i < spec.n_train; ++i) {
    const uint64_t s = mix_seed(spec.seed, 0x7121a110ull + i);
    Rng rng(mix_seed(s, 0xb102u));
    ds.train.push_back(make_pair<T>(i, s, spec, rng));
  }
  for (int i = 0; i < spec.n_test; ++i) {
    const uint64_t s = mix_seed(spec.seed, 0x7e57000000ull + i);
    Rng rng(mix_seed(s, 0xb102u));
    ds.test.push_back(make_pair<T>((1ll << 32) + i, s, spec, rng));
  }
  return ds;
}

// ---- dataset files ----

namespace {

json descriptor_to_json(const BlurDescriptor& d) {
  json j;
  j["kind"] = kernel_kind_name(d.kind);
  j["size"] = d.size;
  j["sigma"] = d.sigma;
  j["angle"] = d.angle;
  j["length"] = d.length;
  return j;
}

BlurDescriptor descriptor_from_json(const json& j) {
  BlurDescriptor d;
  d.kind = kernel_kind_from_name(j.at("kind").get<std::string>());
  d.size = j.at("size").get<int>();
  d.sigma = j.value("sigma", 1.0);
  d.angle = j.value("angle", 0.0);
  d.length = j.value("length", 3.0);
  return d;
}

std::string pair_file(const std::string& split, int64_t idx, const char* role) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s/%05lld_%s.png", split.c_str(),
                static_cast<long long>(idx), role);
  return buf;
}

}  // namespace

template <typename T>
void write_dataset(const std::string& dir, const Dataset<T>& ds,
                   const DatasetSpec& spec) {
  fs::create_directories(fs::path(dir) / "train");
  fs::create_directories(fs::path(dir) / "test");
  json manifest;
  manifest["schema_version"] = 1;
  manifest["seed"] = spec.seed;
  manifest["height"] = spec.height;
  manifest["width"] = spec.width;
  manifest["kernel_family"] = kernel_kind_name(spec.kernel_family);
  auto dump_split = [&](const std::vector<ImagePair<T>>& pairs,
                        const std::string& split) {
    json arr = json::array();
    for (size_t i = 0; i < pairs.size(); ++i) {
      const ImagePair<T>& p = pairs[i];
      const std::string sharp = pair_file(split, static_cast<int64_t>(i), "sharp");
      const std::string blur = pair_file(split, static_cast<int64_t>(i), "blur");
      save_png(dir + "/" + sharp, p.x);
      save_png(dir + "/" + blur, p.y_clean);
      json e;
      e["id"] = p.id;
      e["scene_seed"] = p.scene_seed;
      e["blur"] = descriptor_to_json(p.blur);
      e["sharp"] = sharp;
      e["blurred"] = blur;
      arr.push_back(e);
    }
    manifest[split] = arr;
  };
  dump_split(ds.train, "train");
  dump_split(ds.test, "test");
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw std::runtime_error("write_dataset: cannot write " + dir + "/manifest.json");
  f << manifest.dump(2) << "\n";
}

template <typename T>
Dataset<T> load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw std::runtime_error("load_dataset: cannot open " + dir + "/manifest.json");
  json manifest = json::parse(f);
  Dataset<T> ds;
  auto load_split = [&](const char* split, std::vector<ImagePair<T>>& out) {
    if (!manifest.contains(split)) return;
    for (const json& e : manifest[split]) {
      ImagePair<T> p;
      p.id = e.at("id").get<int64_t>();
      p.scene_seed = e.value("scene_seed", 0ull);
      p.x = load_png<T>(dir + "/" + e.at("sharp").get<std::string>());
      if (e.contains("blur")) {
        p.blur = descriptor_from_json(e["blur"]);
        p.y_clean = apply_blur(p.x, make_kernel<T>(p.blur));
      } else {
        p.y_clean = load_png<T>(dir + "/" + e.at("blurred").get<std::string>());
      }
      out.push_back(std::move(p));
    }
  };
  load_split("train", ds.train);
  load_split("test", ds.test);
  return ds;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("file_hash: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

#define RLAB_INSTANTIATE_DATA(T)                                                   \
  template struct Image<T>;                                                        \
  template struct BlurKernel<T>;                                                   \
  template BlurKernel<T> make_kernel<T>(const BlurDescriptor&);                    \
  template Image<T> generate_synthetic_scene<T>(uint64_t, int, int);               \
  template Image<T> apply_blur<T>(const Image<T>&, const BlurKernel<T>&);          \
  template Dataset<T> make_dataset<T>(const DatasetSpec&);                         \
  template void write_dataset<T>(const std::string&, const Dataset<T>&,            \
                                 const DatasetSpec&);                              \
  template Dataset<T> load_dataset<T>(const std::string&);

RLAB_INSTANTIATE_DATA(float)
RLAB_INSTANTIATE_DATA(double)

#undef RLAB_INSTANTIATE_DATA

}  // namespace rlab
