#include <doctest.h>

#include "maskdiff/image.hpp"
#include "maskdiff/rng.hpp"

#include <cmath>
#include <cstdio>
#include <string>

using namespace maskdiff;

namespace {

std::string temp_path(const std::string& name) {
  return "/tmp/maskdiff_image_test_" + name;
}

}  // namespace

TEST_CASE("gaussian_image is deterministic per stream and roughly standard") {
  Rng a(42), b(42);
  const Image x = gaussian_image(16, 16, 1, a);
  const Image y = gaussian_image(16, 16, 1, b);
  for (int i = 0; i < x.size(); ++i) CHECK(x.v[i] == y.v[i]);

  Rng c(43);
  const Image big = gaussian_image(64, 64, 1, c);
  const double mean = big.v.mean();
  const double var = (big.v - mean).square().mean();
  CHECK(std::abs(mean) < 0.08);
  CHECK(std::abs(var - 1.0) < 0.12);
}

TEST_CASE("resize_bilinear to the same size is the identity") {
  Rng rng(1);
  const Image img = gaussian_image(13, 9, 3, rng);
  const Image out = resize_bilinear(img, 13, 9);
  for (int i = 0; i < img.size(); ++i) CHECK(out.v[i] == img.v[i]);
}

TEST_CASE("resize_bilinear of a constant image stays constant") {
  Image img(8, 8, 1);
  img.v.setConstant(0.37);
  const Image out = resize_bilinear(img, 16, 16);
  REQUIRE(out.h == 16);
  REQUIRE(out.w == 16);
  for (int i = 0; i < out.size(); ++i) CHECK(out.v[i] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("crop extracts the expected window") {
  Image img(4, 4, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = y * 4 + x;
  const Image out = crop(img, 1, 2, 2, 2);
  REQUIRE(out.h == 2);
  REQUIRE(out.w == 2);
  CHECK(out.at(0, 0, 0) == 6);
  CHECK(out.at(0, 1, 0) == 7);
  CHECK(out.at(1, 0, 0) == 10);
  CHECK(out.at(1, 1, 0) == 11);
  CHECK_THROWS_AS(crop(img, 3, 3, 2, 2), ConfigError);
}

TEST_CASE("hflip mirrors columns and is an involution") {
  Rng rng(2);
  const Image img = gaussian_image(6, 5, 3, rng);
  const Image flipped = hflip(img);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.c; ++c) CHECK(flipped.at(y, x, c) == img.at(y, img.w - 1 - x, c));
  const Image back = hflip(flipped);
  for (int i = 0; i < img.size(); ++i) CHECK(back.v[i] == img.v[i]);
}

TEST_CASE("pnm write/read round-trips within quantization error") {
  Rng rng(3);
  for (const int channels : {1, 3}) {
    Image img = gaussian_image(10, 7, channels, rng);
    img.v = img.v.min(1.0).max(-1.0);
    const std::string path = temp_path("roundtrip_" + std::to_string(channels) + ".pnm");
    write_pnm(img, path);
    const Image back = read_pnm(path);
    REQUIRE(back.same_shape(img));
    for (int i = 0; i < img.size(); ++i) {
      CHECK(std::abs(back.v[i] - img.v[i]) < 1.01 / 255.0);
    }
    std::remove(path.c_str());
  }
}

TEST_CASE("pnm write clamps out-of-range values") {
  Image img(1, 2, 1);
  img.at(0, 0, 0) = -5.0;
  img.at(0, 1, 0) = 5.0;
  const std::string path = temp_path("clamp.pgm");
  write_pnm(img, path);
  const Image back = read_pnm(path);
  CHECK(back.at(0, 0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(back.at(0, 1, 0) == doctest::Approx(1.0).epsilon(1e-12));
  std::remove(path.c_str());
}

TEST_CASE("read_pnm fails cleanly on missing files") {
  CHECK_THROWS_AS(read_pnm(temp_path("missing.pgm")), IoError);
}

TEST_CASE("tile_images lays out a padded grid") {
  Rng rng(4);
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(gaussian_image(16, 16, 1, rng));
  const Image grid = tile_images(imgs, 3);
  CHECK(grid.h == 2 * 16 + 3);
  CHECK(grid.w == 3 * 16 + 4);
  CHECK(grid.at(0, 0, 0) == -1.0);
  CHECK(grid.at(1, 1, 0) == imgs[0].at(0, 0, 0));
}
