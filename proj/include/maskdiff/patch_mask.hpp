#pragma once

#include "maskdiff/common.hpp"
#include "maskdiff/image.hpp"
#include "maskdiff/rng.hpp"

#include <cstdint>
#include <vector>

namespace maskdiff {

// Image cut into non-overlapping patches, one row per patch in row-major
// grid order.  Each row flattens a patch as (y, x, channel) nested loops.
struct PatchGrid {
  Matrix tokens;      // [n_patches x patch_size * patch_size * channels]
  int grid_h = 0;
  int grid_w = 0;
  int patch_size = 0;
  int channels = 0;

  int n_patches() const { return grid_h * grid_w; }
  int patch_dim() const { return patch_size * patch_size * channels; }
};

PatchGrid patchify(const Image& img, int patch_size);

Image unpatchify(const PatchGrid& grid);

// Binary mask over patches.  mask[i] == 1 means patch i is hidden from the
// encoder; keep_indices lists the visible patches in ascending order.
struct MaskSpec {
  std::vector<uint8_t> mask;
  std::vector<int> keep_indices;
  double ratio = 0.0;

  int n() const { return static_cast<int>(mask.size()); }
  int n_visible() const { return static_cast<int>(keep_indices.size()); }
  bool hidden(int i) const { return mask[i] != 0; }
};

// Uniformly random mask keeping floor(n * (1 - ratio)) patches visible, drawn
// by permutation truncation so the count is exact, never Bernoulli.
MaskSpec sample_mask(int n_patches, double ratio, Rng& rng);

MaskSpec full_visible_mask(int n_patches);

// Rows of `tokens` at keep_indices, order preserved.
Matrix gather_visible(const Matrix& tokens, const MaskSpec& spec);
Matrix gather_visible(const PatchGrid& grid, const MaskSpec& spec);

// Inverse of gather_visible: visible rows return to their grid positions and
// every masked slot holds a copy of mask_token.
Matrix scatter_full(const Matrix& visible, const MaskSpec& spec, const Vector& mask_token);

}  // namespace maskdiff
