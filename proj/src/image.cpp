#include "wscloc/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace wscloc::img {

namespace {

void write_f32_le(std::ofstream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                              static_cast<unsigned char>((bits >> 8) & 0xff),
                              static_cast<unsigned char>((bits >> 16) & 0xff),
                              static_cast<unsigned char>((bits >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  const uint32_t bits = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

struct PfmHeader {
  bool color = false;
  int width = 0, height = 0;
};

PfmHeader read_pfm_header(std::ifstream& in, const std::filesystem::path& path) {
  std::string magic;
  in >> magic;
  PfmHeader h;
  if (magic == "PF")
    h.color = true;
  else if (magic == "Pf")
    h.color = false;
  else
    throw std::runtime_error("pfm: bad magic in " + path.string());
  double scale;
  in >> h.width >> h.height >> scale;
  if (!in || h.width <= 0 || h.height <= 0)
    throw std::runtime_error("pfm: bad header in " + path.string());
  if (scale >= 0) throw std::runtime_error("pfm: big-endian files unsupported: " + path.string());
  in.get();  // single whitespace byte after the scale line
  return h;
}

}  // namespace

ImageGray rgb_to_gray(const ImageRGB& image) {
  ImageGray out(image.width, image.height);
  for (size_t i = 0; i < image.px.size(); ++i) {
    const Vec3& c = image.px[i];
    out.px[i] = 0.299 * c.x() + 0.587 * c.y() + 0.114 * c.z();
  }
  return out;
}

ImageGray downsample(const ImageGray& image, int out_w, int out_h) {
  ImageGray out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const int y0 = y * image.height / out_h;
    const int y1 = std::max(y0 + 1, (y + 1) * image.height / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int x0 = x * image.width / out_w;
      const int x1 = std::max(x0 + 1, (x + 1) * image.width / out_w);
      double sum = 0.0;
      for (int yy = y0; yy < y1; ++yy)
        for (int xx = x0; xx < x1; ++xx) sum += image.at(xx, yy);
      out.at(x, y) = sum / ((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

double mse(const ImageRGB& a, const ImageRGB& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mse: image size mismatch");
  double sum = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) sum += (a.px[i] - b.px[i]).squaredNorm();
  return sum / (3.0 * static_cast<double>(a.px.size()));
}

double psnr(const ImageRGB& rendered, const ImageRGB& reference) {
  const double m = mse(rendered, reference);
  if (m <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(m);
}

void write_ppm(const std::filesystem::path& path, const ImageRGB& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ppm: cannot open for writing: " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (const Vec3& c : image.px) {
    for (int k = 0; k < 3; ++k) {
      const double v = std::clamp(c[k], 0.0, 1.0);
      out.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
    }
  }
}

ImageRGB read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ppm: cannot open: " + path.string());
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw std::runtime_error("ppm: unsupported file: " + path.string());
  in.get();
  ImageRGB image(w, h);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    for (int x = 0; x < w; ++x)
      image.at(x, y) = Vec3(row[3 * x], row[3 * x + 1], row[3 * x + 2]) / 255.0;
  }
  return image;
}

void write_pfm(const std::filesystem::path& path, const ImageRGB& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pfm: cannot open for writing: " + path.string());
  out << "PF\n" << image.width << ' ' << image.height << "\n-1.0\n";
  for (int y = image.height - 1; y >= 0; --y)
    for (int x = 0; x < image.width; ++x)
      for (int k = 0; k < 3; ++k) write_f32_le(out, static_cast<float>(image.at(x, y)[k]));
}

void write_pfm(const std::filesystem::path& path, const ImageGray& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pfm: cannot open for writing: " + path.string());
  out << "Pf\n" << image.width << ' ' << image.height << "\n-1.0\n";
  for (int y = image.height - 1; y >= 0; --y)
    for (int x = 0; x < image.width; ++x) write_f32_le(out, static_cast<float>(image.at(x, y)));
}

ImageRGB read_pfm_rgb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pfm: cannot open: " + path.string());
  const PfmHeader h = read_pfm_header(in, path);
  if (!h.color) throw std::runtime_error("pfm: expected color file: " + path.string());
  ImageRGB image(h.width, h.height);
  for (int y = h.height - 1; y >= 0; --y)
    for (int x = 0; x < h.width; ++x)
      for (int k = 0; k < 3; ++k) image.at(x, y)[k] = read_f32_le(in);
  if (!in) throw std::runtime_error("pfm: truncated file: " + path.string());
  return image;
}

ImageGray read_pfm_gray(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pfm: cannot open: " + path.string());
  const PfmHeader h = read_pfm_header(in, path);
  if (h.color) throw std::runtime_error("pfm: expected grayscale file: " + path.string());
  ImageGray image(h.width, h.height);
  for (int y = h.height - 1; y >= 0; --y)
    for (int x = 0; x < h.width; ++x) image.at(x, y) = read_f32_le(in);
  if (!in) throw std::runtime_error("pfm: truncated file: " + path.string());
  return image;
}

}  // namespace wscloc::img
