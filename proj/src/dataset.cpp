#include "maskdiff/dataset.hpp"

#include "maskdiff/common.hpp"
#include "maskdiff/rng.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace maskdiff {

namespace {

// 5x7 digit glyphs, one string per digit, '#' = foreground.
constexpr const char* kGlyphs[10][7] = {
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
};

constexpr int kGlyphH = 7;
constexpr int kGlyphW = 5;

}  // namespace

Dataset make_digit_dataset(int n, uint64_t seed, const DigitOptions& opts) {
  require(n > 0, "dataset size must be positive");
  require(opts.max_box_h <= opts.image_size && opts.max_box_w <= opts.image_size,
          "glyph box larger than the canvas");
  require(opts.max_offset >= 0, "placement jitter must be non-negative");
  Dataset ds;
  ds.n_classes = 10;
  ds.items.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed, {stream::data, static_cast<uint64_t>(i)});
    const int digit = i % 10;  // balanced classes
    const int bw = rng.uniform_int(opts.min_box_w, opts.max_box_w);
    const int bh = rng.uniform_int(opts.min_box_h, opts.max_box_h);
    const int x0 = std::clamp((opts.image_size - bw) / 2 +
                                  rng.uniform_int(-opts.max_offset, opts.max_offset),
                              0, opts.image_size - bw);
    const int y0 = std::clamp((opts.image_size - bh) / 2 +
                                  rng.uniform_int(-opts.max_offset, opts.max_offset),
                              0, opts.image_size - bh);
    const double fg = opts.fg_min + (opts.fg_max - opts.fg_min) * rng.uniform();

    Image img(opts.image_size, opts.image_size, 1);
    img.v.setConstant(0.0);  // intensity domain [0, 1] while drawing
    for (int y = 0; y < bh; ++y) {
      const int gy = y * kGlyphH / bh;
      for (int x = 0; x < bw; ++x) {
        const int gx = x * kGlyphW / bw;
        if (kGlyphs[digit][gy][gx] == '#') img.at(y0 + y, x0 + x, 0) = fg;
      }
    }
    for (int k = 0; k < img.size(); ++k) {
      const double noisy = img.v[k] + opts.noise * rng.normal();
      img.v[k] = std::clamp(noisy, 0.0, 1.0) * 2.0 - 1.0;  // map to [-1, 1]
    }
    ds.items.push_back({std::move(img), digit});
  }
  return ds;
}

Dataset load_directory_dataset(const std::string& path, int image_size, int channels) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw IoError("not a directory: " + path);

  std::map<std::string, int> labels;
  const fs::path labels_file = fs::path(path) / "labels.txt";
  if (fs::exists(labels_file)) {
    std::ifstream in(labels_file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw IoError("labels.txt line missing tab: " + line);
      labels[line.substr(0, tab)] = std::stoi(line.substr(tab + 1));
    }
  }

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(path)) {
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  require(!names.empty(), "no .pgm/.ppm images in " + path);

  Dataset ds;
  int max_label = -1;
  for (const std::string& name : names) {
    Image img = read_pnm((fs::path(path) / name).string());
    if (img.h != image_size || img.w != image_size)
      img = resize_bilinear(img, image_size, image_size);
    require(img.c == channels, "channel mismatch in " + name);
    LabeledImage item;
    item.image = std::move(img);
    auto it = labels.find(name);
    item.label = it == labels.end() ? -1 : it->second;
    max_label = std::max(max_label, item.label);
    ds.items.push_back(std::move(item));
  }
  ds.n_classes = max_label + 1;
  return ds;
}

}  // namespace maskdiff
