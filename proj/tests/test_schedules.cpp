#include <doctest.h>

#include "maskdiff/rng.hpp"
#include "maskdiff/schedules.hpp"

#include <cmath>
#include <vector>

using namespace maskdiff;

namespace {

// Closed-form cosine alpha-bar, written straight from the defining formula as
// an oracle independent of the cumulative-product implementation.
double cosine_ab_oracle(int t, int T) {
  auto f = [&](double u) {
    const double x = ((u / T + 0.008) / 1.008) * M_PI / 2.0;
    const double c = std::cos(x);
    return c * c;
  };
  return f(static_cast<double>(t)) / f(0.0);
}

BetaSchedule synthetic_quarter_schedule() {
  BetaSchedule s;
  s.kind = "synthetic";
  s.num_steps = 1;
  s.betas = {0.0, 0.75};
  s.alpha_hats = {1.0, 0.25};
  return s;
}

}  // namespace

TEST_CASE("cosine schedule matches the closed-form oracle") {
  const BetaSchedule s = make_cosine_schedule(1000);
  CHECK(s.num_steps == 1000);
  CHECK(s.betas.size() == 1001);
  CHECK(s.alpha_hats.size() == 1001);
  CHECK(s.betas[0] == 0.0);
  CHECK(s.alpha_hats[0] == 1.0);
  CHECK(s.alpha_hats[500] == doctest::Approx(0.49384359044063775).epsilon(1e-9));
  for (const int t : {1, 17, 100, 500, 900}) {
    CHECK(s.alpha_hats[t] == doctest::Approx(cosine_ab_oracle(t, 1000)).epsilon(1e-10));
  }
}

TEST_CASE("schedules share the reserved no-noise step and monotone decay") {
  for (const char* kind : {"cosine", "linear"}) {
    const BetaSchedule s = make_schedule(kind, 1000);
    CHECK(s.betas[0] == 0.0);
    CHECK(s.alpha_hats[0] == 1.0);
    for (int t = 1; t <= 1000; ++t) {
      CHECK(s.betas[t] >= 0.0);
      CHECK(s.betas[t] <= 0.999);
      CHECK(s.alpha_hats[t] < s.alpha_hats[t - 1]);
    }
    CHECK(s.alpha_hats[1000] < 0.05);
  }
}

TEST_CASE("linear schedule endpoints") {
  const BetaSchedule s = make_linear_schedule(1000);
  CHECK(s.betas[1] == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.betas[1000] == doctest::Approx(0.02).epsilon(1e-12));

  const BetaSchedule two = make_linear_schedule(2);
  REQUIRE(two.betas.size() == 3);
  CHECK(two.betas[0] == 0.0);
  CHECK(two.betas[1] == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(two.betas[2] == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(two.alpha_hats[0] == 1.0);
  CHECK(two.alpha_hats[1] == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(two.alpha_hats[2] == doctest::Approx(0.9999 * 0.98).epsilon(1e-15));
}

TEST_CASE("make_schedule dispatch rejects unknown kinds") {
  CHECK(make_schedule("cosine", 10).kind == "cosine");
  CHECK(make_schedule("linear", 10).kind == "linear");
  CHECK_THROWS_AS(make_schedule("quadratic", 10), ConfigError);
  CHECK_THROWS_AS(make_schedule("cosine", 0), ConfigError);
}

TEST_CASE("forward_noise returns the clean input at t = 0 bitwise") {
  const BetaSchedule s = make_cosine_schedule(50);
  Rng rng(7);
  const Image x0 = gaussian_image(8, 8, 1, rng);
  const Image eps = gaussian_image(8, 8, 1, rng);
  const NoisedSample out = forward_noise(x0, 0, eps, s);
  CHECK(out.t == 0);
  for (int i = 0; i < x0.size(); ++i) CHECK(out.x_t.v[i] == x0.v[i]);
}

TEST_CASE("forward_noise matches direct substitution at alpha_hat = 0.25") {
  const BetaSchedule s = synthetic_quarter_schedule();
  Image x0(4, 4, 1);
  Image eps(4, 4, 1);
  x0.v.setConstant(1.0);
  eps.v.setConstant(1.0);
  const NoisedSample out = forward_noise(x0, 1, eps, s);
  for (int i = 0; i < out.x_t.size(); ++i) {
    CHECK(out.x_t.v[i] == doctest::Approx(1.3660254037844386).epsilon(1e-12));
  }
}

TEST_CASE("forward_noise validates t and shapes") {
  const BetaSchedule s = make_cosine_schedule(10);
  Rng rng(3);
  const Image x0 = gaussian_image(4, 4, 1, rng);
  const Image eps = gaussian_image(4, 4, 1, rng);
  const Image bad = gaussian_image(4, 2, 1, rng);
  CHECK_THROWS_AS(forward_noise(x0, -1, eps, s), ConfigError);
  CHECK_THROWS_AS(forward_noise(x0, 11, eps, s), ConfigError);
  CHECK_THROWS_AS(forward_noise(x0, 3, bad, s), ConfigError);
}

TEST_CASE("late-timestep marginals of a unit-Gaussian source stay standard normal") {
  const BetaSchedule s = make_cosine_schedule(100);
  Rng rng(99);
  const int n = 20000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Image x0(1, 1, 1);
    x0.v[0] = rng.normal();
    Image eps(1, 1, 1);
    eps.v[0] = rng.normal();
    const double v = forward_noise(x0, 100, eps, s).x_t.v[0];
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  const double se_mean = 1.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean) < 3.0 * se_mean);
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / (n - 1.0)));
}

TEST_CASE("conditional variance matches 1 - alpha_hat across schedules") {
  Rng x0_rng(5);
  for (const char* kind : {"cosine", "linear"}) {
    const BetaSchedule s = make_schedule(kind, 200);
    Image x0 = gaussian_image(2, 2, 1, x0_rng);
    for (const int t : {1, 100, 200}) {
      Rng rng(derive_stream(11, {static_cast<uint64_t>(t)}));
      const int n = 4000;
      const int dims = x0.size();
      double sum = 0.0, sum_sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const Image eps = gaussian_image(2, 2, 1, rng);
        const NoisedSample out = forward_noise(x0, t, eps, s);
        for (int d = 0; d < dims; ++d) {
          const double centered = out.x_t.v[d] - s.sqrt_ab(t) * x0.v[d];
          sum += centered;
          sum_sq += centered * centered;
        }
      }
      const double total = static_cast<double>(n) * dims;
      const double mean = sum / total;
      const double var = sum_sq / total - mean * mean;
      const double expected = 1.0 - s.alpha_hats[t];
      const double rel_se = std::sqrt(2.0 / (total - 1.0));
      CHECK(std::abs(var - expected) < 5.0 * expected * rel_se);
    }
  }
}
