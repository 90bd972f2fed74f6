#include <doctest.h>

#include "maskdiff/patch_mask.hpp"
#include "maskdiff/rng.hpp"

#include <algorithm>
#include <vector>

using namespace maskdiff;

TEST_CASE("patchify shapes: 64x64x3 with patch 4 gives 256 tokens of dim 48") {
  Rng rng(1);
  const Image img = gaussian_image(64, 64, 3, rng);
  const PatchGrid grid = patchify(img, 4);
  CHECK(grid.tokens.rows() == 256);
  CHECK(grid.tokens.cols() == 48);
  CHECK(grid.grid_h == 16);
  CHECK(grid.grid_w == 16);
  CHECK(grid.n_patches() == 256);
  CHECK(grid.patch_dim() == 48);
}

TEST_CASE("patchify of a zero image is zero tokens") {
  const Image img(4, 4, 1);
  const PatchGrid grid = patchify(img, 2);
  CHECK(grid.tokens.rows() == 4);
  CHECK(grid.tokens.cols() == 4);
  CHECK(grid.tokens.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("token layout is row-major patches with (y, x, channel) nesting") {
  Image img(4, 4, 1);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = y * 4 + x;
  }
  const PatchGrid grid = patchify(img, 2);
  const std::vector<std::vector<double>> expected = {
      {0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) CHECK(grid.tokens(r, c) == expected[r][c]);
  }
}

TEST_CASE("patchify and unpatchify are inverse") {
  Rng rng(2);
  const Image img = gaussian_image(16, 16, 3, rng);
  const Image back = unpatchify(patchify(img, 4));
  REQUIRE(back.same_shape(img));
  for (int i = 0; i < img.size(); ++i) CHECK(back.v[i] == img.v[i]);
}

TEST_CASE("patchify validates divisibility") {
  const Image img(6, 6, 1);
  CHECK_THROWS_AS(patchify(img, 4), ConfigError);
}

TEST_CASE("sample_mask keeps exactly floor(n * (1 - ratio)) patches") {
  Rng rng(3);
  const MaskSpec a = sample_mask(256, 0.75, rng);
  CHECK(a.n() == 256);
  CHECK(a.n_visible() == 64);
  const MaskSpec b = sample_mask(256, 0.375, rng);
  CHECK(b.n_visible() == 160);
  const MaskSpec c = sample_mask(256, 0.0, rng);
  CHECK(c.n_visible() == 256);
  for (int i = 0; i < 256; ++i) CHECK_FALSE(c.hidden(i));

  for (int rep = 0; rep < 20; ++rep) {
    CHECK(sample_mask(256, 0.75, rng).n_visible() == 64);
  }
}

TEST_CASE("mask flags, keep order, and hidden() agree") {
  Rng rng(4);
  const MaskSpec spec = sample_mask(64, 0.4, rng);
  CHECK(std::is_sorted(spec.keep_indices.begin(), spec.keep_indices.end()));
  int visible = 0;
  for (int i = 0; i < spec.n(); ++i) {
    const bool kept =
        std::find(spec.keep_indices.begin(), spec.keep_indices.end(), i) != spec.keep_indices.end();
    CHECK(kept == !spec.hidden(i));
    if (kept) ++visible;
  }
  CHECK(visible == spec.n_visible());
}

TEST_CASE("masking is uniformly random over positions") {
  Rng rng(5);
  const int n = 16;
  const int reps = 4000;
  std::vector<int> visible_count(n, 0);
  for (int r = 0; r < reps; ++r) {
    const MaskSpec spec = sample_mask(n, 0.5, rng);
    for (int idx : spec.keep_indices) ++visible_count[static_cast<size_t>(idx)];
  }
  for (int i = 0; i < n; ++i) {
    const double freq = static_cast<double>(visible_count[i]) / reps;
    CHECK(std::abs(freq - 0.5) < 0.05);
  }
}

TEST_CASE("gather_visible examples") {
  Rng rng(6);
  const Image img = gaussian_image(4, 4, 1, rng);
  const PatchGrid grid = patchify(img, 2);

  const MaskSpec all = full_visible_mask(4);
  const Matrix full = gather_visible(grid, all);
  CHECK((full - grid.tokens).cwiseAbs().maxCoeff() == 0.0);

  MaskSpec one;
  one.mask = {1, 0, 0, 0};
  one.keep_indices = {1, 2, 3};
  one.ratio = 0.25;
  const Matrix rest = gather_visible(grid, one);
  REQUIRE(rest.rows() == 3);
  for (int r = 0; r < 3; ++r) {
    CHECK((rest.row(r) - grid.tokens.row(r + 1)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("scatter_full places visible rows back and fills the rest with the mask token") {
  Rng rng(7);
  const Image img = gaussian_image(8, 8, 1, rng);
  const PatchGrid grid = patchify(img, 2);
  Vector token(grid.patch_dim());
  for (int i = 0; i < token.size(); ++i) token[i] = 100.0 + i;

  const MaskSpec all = full_visible_mask(grid.n_patches());
  const Matrix same = scatter_full(grid.tokens, all, token);
  CHECK((same - grid.tokens).cwiseAbs().maxCoeff() == 0.0);

  for (int rep = 0; rep < 100; ++rep) {
    const double ratio = rng.uniform() * 0.9;
    const MaskSpec spec = sample_mask(grid.n_patches(), ratio, rng);
    const Matrix visible = gather_visible(grid, spec);
    const Matrix full = scatter_full(visible, spec, token);
    REQUIRE(full.rows() == grid.n_patches());
    for (int i = 0; i < grid.n_patches(); ++i) {
      if (spec.hidden(i)) {
        CHECK((full.row(i).transpose() - token).cwiseAbs().maxCoeff() == 0.0);
      } else {
        CHECK((full.row(i) - grid.tokens.row(i)).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
}

TEST_CASE("all-but-one masked keeps one original row") {
  Rng rng(8);
  const Image img = gaussian_image(4, 4, 1, rng);
  const PatchGrid grid = patchify(img, 2);
  MaskSpec spec;
  spec.mask = {1, 1, 0, 1};
  spec.keep_indices = {2};
  spec.ratio = 0.75;
  Vector token = Vector::Constant(grid.patch_dim(), -7.0);
  const Matrix full = scatter_full(gather_visible(grid, spec), spec, token);
  CHECK((full.row(2) - grid.tokens.row(2)).cwiseAbs().maxCoeff() == 0.0);
  for (const int i : {0, 1, 3}) {
    CHECK((full.row(i).transpose() - token).cwiseAbs().maxCoeff() == 0.0);
  }
}
