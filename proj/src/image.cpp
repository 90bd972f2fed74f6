#include "maskdiff/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace maskdiff {

Image gaussian_image(int h, int w, int c, Rng& rng) {
  Image img(h, w, c);
  for (int i = 0; i < img.size(); ++i) img.v[i] = rng.normal();
  return img;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  require(out_h > 0 && out_w > 0, "resize target must be positive");
  if (out_h == img.h && out_w == img.w) return img;
  Image out(out_h, out_w, img.c);
  const double sy = static_cast<double>(img.h) / out_h;
  const double sx = static_cast<double>(img.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    // Align sample points to pixel centers.
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), img.h - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), img.w - 1);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < img.c; ++ch) {
        const double top = img.at(y0, x0, ch) * (1.0 - wx) + img.at(y0, x1, ch) * wx;
        const double bot = img.at(y1, x0, ch) * (1.0 - wx) + img.at(y1, x1, ch) * wx;
        out.at(y, x, ch) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image crop(const Image& img, int y0, int x0, int ch, int cw) {
  require(y0 >= 0 && x0 >= 0 && y0 + ch <= img.h && x0 + cw <= img.w, "crop out of bounds");
  Image out(ch, cw, img.c);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int k = 0; k < img.c; ++k) out.at(y, x, k) = img.at(y0 + y, x0 + x, k);
  return out;
}

Image hflip(const Image& img) {
  Image out(img.h, img.w, img.c);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int k = 0; k < img.c; ++k) out.at(y, x, k) = img.at(y, img.w - 1 - x, k);
  return out;
}

namespace {

int to_byte(double v) {
  const double scaled = (v + 1.0) * 0.5 * 255.0;
  return std::clamp(static_cast<int>(std::lround(scaled)), 0, 255);
}

}  // namespace

void write_pnm(const Image& img, const std::string& path) {
  if (img.c != 1 && img.c != 3) throw IoError("pnm output supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
  for (int i = 0; i < img.size(); ++i) out.put(static_cast<char>(to_byte(img.v[i])));
  if (!out) throw IoError("write failed: " + path);
}

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw IoError("unsupported pnm magic in " + path);
  const int channels = magic == "P5" ? 1 : 3;
  int w = 0, h = 0, maxval = 0;
  // Header tokens may be separated by whitespace and '#' comment lines.
  auto next_int = [&in, &path]() {
    for (;;) {
      int ch = in.peek();
      if (ch == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (std::isspace(ch)) {
        in.get();
        continue;
      }
      break;
    }
    int value = 0;
    if (!(in >> value)) throw IoError("truncated pnm header in " + path);
    return value;
  };
  w = next_int();
  h = next_int();
  maxval = next_int();
  if (maxval <= 0 || maxval > 255) throw IoError("unsupported pnm maxval in " + path);
  in.get();  // single whitespace before the raster
  Image img(h, w, channels);
  std::vector<char> buf(static_cast<size_t>(img.size()));
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError("truncated pnm raster in " + path);
  for (int i = 0; i < img.size(); ++i) {
    const double b = static_cast<unsigned char>(buf[static_cast<size_t>(i)]);
    img.v[i] = b / static_cast<double>(maxval) * 2.0 - 1.0;
  }
  return img;
}

Image tile_images(const std::vector<Image>& images, int cols) {
  require(!images.empty(), "no images to tile");
  require(cols > 0, "cols must be positive");
  const int h = images[0].h, w = images[0].w, c = images[0].c;
  for (const Image& im : images) require(im.h == h && im.w == w && im.c == c, "mixed tile shapes");
  const int n = static_cast<int>(images.size());
  const int rows = (n + cols - 1) / cols;
  const int pad = 1;
  Image out(rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, c);
  out.v.setConstant(-1.0);
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, col = i % cols;
    const int oy = pad + r * (h + pad), ox = pad + col * (w + pad);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < c; ++k) out.at(oy + y, ox + x, k) = images[i].at(y, x, k);
  }
  return out;
}

}  // namespace maskdiff
