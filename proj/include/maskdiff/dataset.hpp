#pragma once

#include "maskdiff/image.hpp"

#include <string>
#include <vector>

namespace maskdiff {

struct LabeledImage {
  Image image;
  int label = -1;  // -1 = unlabeled
};

struct Dataset {
  std::vector<LabeledImage> items;
  int n_classes = 0;

  int size() const { return static_cast<int>(items.size()); }
};

struct DigitOptions {
  int image_size = 16;
  double noise = 0.08;       // additive pixel noise sigma
  double fg_min = 0.7;       // foreground intensity range
  double fg_max = 1.0;
  int min_box_w = 9;         // rendered glyph box, jittered per sample
  int max_box_w = 11;
  int min_box_h = 12;
  int max_box_h = 14;
  int max_offset = 1;        // placement jitter around the canvas center
};

// Synthetic 10-class corpus of jittered digit glyphs on a dark background,
// pixel values in [-1, 1].  Deterministic given (n, seed).
Dataset make_digit_dataset(int n, uint64_t seed, const DigitOptions& opts = {});

// Loads .pgm/.ppm files from a directory (sorted by filename).  If a
// labels.txt file is present ("<filename><TAB><label>" lines) images gain
// labels, otherwise they are unlabeled.
Dataset load_directory_dataset(const std::string& path, int image_size, int channels);

}  // namespace maskdiff
