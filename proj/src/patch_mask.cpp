#include "maskdiff/patch_mask.hpp"

#include <algorithm>
#include <numeric>

namespace maskdiff {

PatchGrid patchify(const Image& img, int patch_size) {
  require(patch_size > 0, "patch_size must be positive");
  require(img.h % patch_size == 0 && img.w % patch_size == 0,
          "image dimensions not divisible by patch size");
  PatchGrid g;
  g.grid_h = img.h / patch_size;
  g.grid_w = img.w / patch_size;
  g.patch_size = patch_size;
  g.channels = img.c;
  g.tokens.resize(g.n_patches(), g.patch_dim());
  for (int pr = 0; pr < g.grid_h; ++pr) {
    for (int pc = 0; pc < g.grid_w; ++pc) {
      const int row = pr * g.grid_w + pc;
      int col = 0;
      for (int py = 0; py < patch_size; ++py)
        for (int px = 0; px < patch_size; ++px)
          for (int ch = 0; ch < img.c; ++ch)
            g.tokens(row, col++) = img.at(pr * patch_size + py, pc * patch_size + px, ch);
    }
  }
  return g;
}

Image unpatchify(const PatchGrid& grid) {
  require(grid.tokens.rows() == grid.n_patches() && grid.tokens.cols() == grid.patch_dim(),
          "token matrix does not match grid shape");
  Image img(grid.grid_h * grid.patch_size, grid.grid_w * grid.patch_size, grid.channels);
  for (int pr = 0; pr < grid.grid_h; ++pr) {
    for (int pc = 0; pc < grid.grid_w; ++pc) {
      const int row = pr * grid.grid_w + pc;
      int col = 0;
      for (int py = 0; py < grid.patch_size; ++py)
        for (int px = 0; px < grid.patch_size; ++px)
          for (int ch = 0; ch < grid.channels; ++ch)
            img.at(pr * grid.patch_size + py, pc * grid.patch_size + px, ch) =
                grid.tokens(row, col++);
    }
  }
  return img;
}

MaskSpec sample_mask(int n_patches, double ratio, Rng& rng) {
  require(n_patches > 0, "need at least one patch");
  require(ratio >= 0.0 && ratio < 1.0, "mask ratio must be in [0, 1)");
  const int keep = static_cast<int>(std::floor(n_patches * (1.0 - ratio)));
  std::vector<int> order(static_cast<size_t>(n_patches));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  MaskSpec spec;
  spec.ratio = ratio;
  spec.mask.assign(static_cast<size_t>(n_patches), 1);
  spec.keep_indices.assign(order.begin(), order.begin() + keep);
  std::sort(spec.keep_indices.begin(), spec.keep_indices.end());
  for (int i : spec.keep_indices) spec.mask[static_cast<size_t>(i)] = 0;
  return spec;
}

MaskSpec full_visible_mask(int n_patches) {
  MaskSpec spec;
  spec.ratio = 0.0;
  spec.mask.assign(static_cast<size_t>(n_patches), 0);
  spec.keep_indices.resize(static_cast<size_t>(n_patches));
  std::iota(spec.keep_indices.begin(), spec.keep_indices.end(), 0);
  return spec;
}

Matrix gather_visible(const Matrix& tokens, const MaskSpec& spec) {
  require(tokens.rows() == spec.n(), "mask sized for a different token count");
  Matrix out(spec.n_visible(), tokens.cols());
  for (int i = 0; i < spec.n_visible(); ++i) out.row(i) = tokens.row(spec.keep_indices[i]);
  return out;
}

Matrix gather_visible(const PatchGrid& grid, const MaskSpec& spec) {
  return gather_visible(grid.tokens, spec);
}

Matrix scatter_full(const Matrix& visible, const MaskSpec& spec, const Vector& mask_token) {
  require(visible.rows() == spec.n_visible(), "visible row count does not match mask");
  require(visible.cols() == mask_token.size(), "mask token dimension mismatch");
  Matrix out(spec.n(), visible.cols());
  out.rowwise() = mask_token.transpose();
  for (int i = 0; i < spec.n_visible(); ++i) out.row(spec.keep_indices[i]) = visible.row(i);
  return out;
}

}  // namespace maskdiff
