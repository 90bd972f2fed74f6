#include <doctest.h>

#include "maskdiff/sampler.hpp"
#include "maskdiff/schedules.hpp"

#include <cmath>
#include <vector>

using namespace maskdiff;

namespace {

Matrix random_matrix(int rows, int cols, uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("guidance returns its inputs bitwise at the special scales") {
  const Matrix cond = random_matrix(4, 3, 1);
  const Matrix null = random_matrix(4, 3, 2);
  const Matrix at_one = cfg_predict(cond, null, 1.0);
  const Matrix at_zero = cfg_predict(cond, null, 0.0);
  for (int i = 0; i < cond.size(); ++i) {
    CHECK(at_one.data()[i] == cond.data()[i]);
    CHECK(at_zero.data()[i] == null.data()[i]);
  }
}

TEST_CASE("guidance is the affine combination at other scales") {
  Matrix cond = Matrix::Ones(2, 2);
  Matrix null = Matrix::Zero(2, 2);
  const Matrix out = cfg_predict(cond, null, 1.5);
  CHECK(out(0, 0) == doctest::Approx(1.5).epsilon(1e-15));

  const Matrix c2 = random_matrix(3, 5, 3);
  const Matrix n2 = random_matrix(3, 5, 4);
  for (const double s : {0.3, 2.7}) {
    const Matrix g = cfg_predict(c2, n2, s);
    for (int i = 0; i < g.size(); ++i) {
      const double expected = n2.data()[i] + s * (c2.data()[i] - n2.data()[i]);
      CHECK(g.data()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  Matrix bad = Matrix::Zero(2, 3);
  CHECK_THROWS_AS(cfg_predict(cond, bad, 1.5), ConfigError);
}

TEST_CASE("per-step noise scale follows the written formula") {
  const BetaSchedule schedule = make_cosine_schedule(1000);
  CHECK(ddim_sigma(schedule, 800, 600, 0.0) == 0.0);
  for (const double eta : {0.4, 1.0}) {
    for (const auto [t, tp] : std::vector<std::pair<int, int>>{{800, 600}, {1000, 875}, {9, 1}}) {
      const double ab_t = schedule.alpha_hats[static_cast<size_t>(t)];
      const double ab_prev = schedule.alpha_hats[static_cast<size_t>(tp)];
      const double expected = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                              std::sqrt((1.0 - ab_t) / ab_prev);
      CHECK(ddim_sigma(schedule, t, tp, eta) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("a perfect noise prediction recovers the deterministic flow") {
  const BetaSchedule schedule = make_cosine_schedule(1000);
  Rng rng(5);
  Image x0 = gaussian_image(4, 4, 1, rng);
  Image eps = gaussian_image(4, 4, 1, rng);
  const int t = 800, t_prev = 600;
  Image x_t = x0;
  x_t.v = schedule.sqrt_ab(t) * x0.v + schedule.sqrt_one_minus_ab(t) * eps.v;

  const Image x_prev = ddim_step(x_t, eps, t, t_prev, schedule, 0.0, Image());
  const double ab_prev = schedule.alpha_hats[static_cast<size_t>(t_prev)];
  for (int i = 0; i < x_prev.size(); ++i) {
    const double expected = std::sqrt(ab_prev) * x0.v[i] + std::sqrt(1.0 - ab_prev) * eps.v[i];
    CHECK(x_prev.v[i] == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("the final transition lands exactly on the predicted clean image") {
  const BetaSchedule schedule = make_cosine_schedule(100);
  Rng rng(6);
  Image x0 = gaussian_image(4, 4, 1, rng);
  Image eps = gaussian_image(4, 4, 1, rng);
  const int t = 13;
  Image x_t = x0;
  x_t.v = schedule.sqrt_ab(t) * x0.v + schedule.sqrt_one_minus_ab(t) * eps.v;
  const Image out = ddim_step(x_t, eps, t, 0, schedule, 1.0, Image());
  for (int i = 0; i < out.size(); ++i) {
    CHECK(out.v[i] == doctest::Approx(x0.v[i]).epsilon(1e-6));
  }
}

TEST_CASE("noise recovery inverts the forward map") {
  const BetaSchedule schedule = make_cosine_schedule(1000);
  const Matrix x0 = random_matrix(4, 4, 7);
  const Matrix eps = random_matrix(4, 4, 8);
  const int t = 321;
  const double ab = schedule.alpha_hats[static_cast<size_t>(t)];
  const Matrix x_t = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
  const Matrix eps_back = x0_to_eps(x0, x_t, t, schedule);
  CHECK((eps_back - eps).cwiseAbs().maxCoeff() < 1e-9);

  // Round trip the other way: reconstruct x0 from the recovered eps.
  const Matrix x0_back = (x_t - std::sqrt(1.0 - ab) * eps_back) / std::sqrt(ab);
  CHECK((x0_back - x0).cwiseAbs().maxCoeff() < 1e-9);

  CHECK_THROWS_AS(x0_to_eps(x0, x_t, 0, schedule), ConfigError);
}

TEST_CASE("timestep subsequences cover T down to 1") {
  const std::vector<int> full = sampling_timesteps(50, 50);
  REQUIRE(full.size() == 50);
  for (int i = 0; i < 50; ++i) CHECK(full[static_cast<size_t>(i)] == 50 - i);

  const std::vector<int> strided = sampling_timesteps(1000, 125);
  REQUIRE(strided.size() == 125);
  CHECK(strided.front() == 1000);
  CHECK(strided.back() == 1);
  for (size_t i = 1; i < strided.size(); ++i) CHECK(strided[i] < strided[i - 1]);

  CHECK(sampling_timesteps(1000, 1) == std::vector<int>{1000});
  CHECK(sampling_timesteps(1000, 2) == std::vector<int>{1000, 1});
  CHECK_THROWS_AS(sampling_timesteps(10, 11), ConfigError);
  CHECK_THROWS_AS(sampling_timesteps(10, 0), ConfigError);
}

TEST_CASE("stochastic steps demand correctly shaped noise") {
  const BetaSchedule schedule = make_cosine_schedule(1000);
  Rng rng(9);
  const Image x_t = gaussian_image(4, 4, 1, rng);
  const Image eps = gaussian_image(4, 4, 1, rng);
  const Image wrong = gaussian_image(2, 2, 1, rng);
  CHECK_THROWS_AS(ddim_step(x_t, eps, 800, 600, schedule, 1.0, wrong), ConfigError);
  CHECK_THROWS_AS(ddim_step(x_t, eps, 800, 600, schedule, 1.0, Image()), ConfigError);
  // Deterministic steps never touch the noise argument.
  CHECK_NOTHROW(ddim_step(x_t, eps, 800, 600, schedule, 0.0, Image()));
  CHECK_THROWS_AS(ddim_step(x_t, eps, 600, 800, schedule, 0.0, Image()), ConfigError);
}

TEST_CASE("network sampling is deterministic in the seed") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch_size = 2;
  cfg.width = 16;
  cfg.n_heads = 2;
  cfg.enc_depth = 1;
  cfg.dec_depth = 1;
  cfg.n_classes = 0;
  cfg.time_embed_dim = 16;
  Network net(cfg);
  net.init_params(10);
  const BetaSchedule schedule = make_cosine_schedule(50);
  SamplerConfig sc;
  sc.n_steps = 10;
  sc.eta = 1.0;

  const std::vector<Image> a = ddim_sample(net, schedule, sc, -1, 2, 77);
  const std::vector<Image> b = ddim_sample(net, schedule, sc, -1, 2, 77);
  const std::vector<Image> c = ddim_sample(net, schedule, sc, -1, 2, 78);
  REQUIRE(a.size() == 2);
  for (int i = 0; i < a[0].size(); ++i) CHECK(a[0].v[i] == b[0].v[i]);
  for (int i = 0; i < a[1].size(); ++i) CHECK(a[1].v[i] == b[1].v[i]);
  CHECK((a[0].v - c[0].v).abs().maxCoeff() > 0.0);
  CHECK((a[0].v - a[1].v).abs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(ddim_sample(net, schedule, sc, 3, 1, 77), ConfigError);
}

TEST_CASE("samples from an exact predictor match the data distribution") {
  // For x0 ~ N(mu, I) the posterior-mean noise prediction has the closed form
  // eps_hat(x_t, t) = sqrt(1 - ab_t) * (x_t - sqrt(ab_t) * mu), and the
  // deterministic sampler must land on N(mu, I) for any step count.
  const BetaSchedule schedule = make_cosine_schedule(400);
  Image mu(2, 2, 1);
  mu.v << 0.8, -0.4, 0.1, 0.5;
  const EpsPredictor predict = [&](const Image& x_t, int t) {
    const double ab = schedule.alpha_hats[static_cast<size_t>(t)];
    Image eps = x_t;
    eps.v = std::sqrt(1.0 - ab) * (x_t.v - std::sqrt(ab) * mu.v);
    return eps;
  };

  const int n = 8000;
  const std::vector<Image> samples = ddim_sample_with(predict, 2, 2, 1, schedule, 50, 0.0, n, 11);
  REQUIRE(samples.size() == static_cast<size_t>(n));
  for (int p = 0; p < 4; ++p) {
    double sum = 0.0, sumsq = 0.0;
    for (const Image& s : samples) {
      sum += s.v[p];
      sumsq += s.v[p] * s.v[p];
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double se = 1.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mean - mu.v[p]) < 4 * se);
    CHECK(std::abs(var - 1.0) < 0.10);
  }
}
