#pragma once

#include "maskdiff/common.hpp"
#include "maskdiff/rng.hpp"

#include <string>

namespace maskdiff {

// Dense H x W x C image with values stored row-major, channel-interleaved.
// Pixel values are doubles; training data lives in [-1, 1].
struct Image {
  int h = 0;
  int w = 0;
  int c = 0;
  Array v;  // size h * w * c

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(Array::Zero(h_ * w_ * c_)) {}

  int size() const { return h * w * c; }

  double& at(int y, int x, int ch) { return v[(y * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return v[(y * w + x) * c + ch]; }

  bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

Image gaussian_image(int h, int w, int c, Rng& rng);

// Bilinear resize to (out_h, out_w); channels are preserved.
Image resize_bilinear(const Image& img, int out_h, int out_w);

Image crop(const Image& img, int y0, int x0, int ch, int cw);

Image hflip(const Image& img);

// Writes PGM (1 channel) or PPM (3 channels).  Values are mapped from
// [-1, 1] to [0, 255] with clamping.
void write_pnm(const Image& img, const std::string& path);

Image read_pnm(const std::string& path);

// Arranges images on a grid (row-major) into one big image for inspection.
Image tile_images(const std::vector<Image>& images, int cols);

}  // namespace maskdiff
