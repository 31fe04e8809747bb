#pragma once

#include <complex>
#include <span>
#include <string>
#include <vector>

#include "rlab/data.hpp"

namespace rlab {

// 10*log10(max_val^2 / MSE); identical inputs are capped at 100 dB.
template <typename T>
double psnr(std::span<const T> a, std::span<const T> b, double max_val = 1.0);

// Mean local SSIM, Gaussian window 11 (sigma 1.5), K1=0.01, K2=0.03, L=1,
// computed per channel over the valid (un-padded) region and averaged.
template <typename T>
double ssim(const Image<T>& a, const Image<T>& b);

struct SpectralScores {
  double hf_energy_ratio = 1.0;    // restored/reference energy above half-Nyquist
  double grid_peak_score = 0.0;    // excess DC-normalized magnitude at Nyquist rows/cols
  double color_mixing_score = 0.0; // drop of inter-channel correlation vs reference
};

template <typename T>
SpectralScores spectral_artifact_scores(const Image<T>& restored,
                                        const Image<T>& reference);

// Unnormalized 2-D DFT of a row-major real plane (matrix method; desk-size
// images only).
std::vector<std::complex<double>> dft2d(std::span<const double> plane, int H, int W);

template <typename T>
std::vector<double> luminance(const Image<T>& img);  // Rec.601 weights

// Spectral energy strictly above half-Nyquist (radial frequency > 0.25
// cycles/pixel) of a luminance plane.
double high_band_energy(std::span<const std::complex<double>> spectrum, int H, int W);

// ---- per-image reports ----

struct MetricsRow {
  std::string image_id;
  double psnr = 0, ssim = 0;
  double hf_energy_ratio = 0, grid_peak_score = 0, color_mixing_score = 0;
};

struct MetricsAggregate {
  double psnr_mean = 0, psnr_std = 0;
  double ssim_mean = 0, ssim_std = 0;
  double hf_energy_ratio_mean = 0, grid_peak_score_mean = 0,
         color_mixing_score_mean = 0;
  int n = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::string config_echo;  // one-line provenance note for the CSV header

  MetricsAggregate aggregate() const;
  void write_csv(const std::string& path) const;
};

}  // namespace rlab
