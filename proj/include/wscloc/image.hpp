#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace wscloc::img {

using Vec3 = Eigen::Vector3d;

struct ImageRGB {
  int width = 0, height = 0;
  std::vector<Vec3> px;  // row-major, component values nominally in [0, 1]

  ImageRGB() = default;
  ImageRGB(int w, int h) : width(w), height(h), px(static_cast<size_t>(w) * h, Vec3::Zero()) {}
  Vec3& at(int x, int y) { return px[static_cast<size_t>(y) * width + x]; }
  const Vec3& at(int x, int y) const { return px[static_cast<size_t>(y) * width + x]; }
};

struct ImageGray {
  int width = 0, height = 0;
  std::vector<double> px;

  ImageGray() = default;
  ImageGray(int w, int h) : width(w), height(h), px(static_cast<size_t>(w) * h, 0.0) {}
  double& at(int x, int y) { return px[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return px[static_cast<size_t>(y) * width + x]; }
};

ImageGray rgb_to_gray(const ImageRGB& image);  // Rec. 601 luma

// Area-averaging downsample to exactly out_w x out_h.
ImageGray downsample(const ImageGray& image, int out_w, int out_h);

double mse(const ImageRGB& a, const ImageRGB& b);
double psnr(const ImageRGB& rendered, const ImageRGB& reference);  // peak 1.0

// Binary PPM (P6, 8-bit) for viewing.
void write_ppm(const std::filesystem::path& path, const ImageRGB& image);
ImageRGB read_ppm(const std::filesystem::path& path);

// PFM, 32-bit float little-endian (scale -1.0), rows bottom to top.
void write_pfm(const std::filesystem::path& path, const ImageRGB& image);
void write_pfm(const std::filesystem::path& path, const ImageGray& image);
ImageRGB read_pfm_rgb(const std::filesystem::path& path);
ImageGray read_pfm_gray(const std::filesystem::path& path);

}  // namespace wscloc::img
