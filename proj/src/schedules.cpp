#include "maskdiff/schedules.hpp"

#include <cmath>

namespace maskdiff {

namespace {

BetaSchedule with_prepended_zero(std::string kind, int T, std::vector<double> noised_betas) {
  BetaSchedule s;
  s.kind = std::move(kind);
  s.num_steps = T;
  s.betas.resize(static_cast<size_t>(T) + 1);
  s.alpha_hats.resize(static_cast<size_t>(T) + 1);
  s.betas[0] = 0.0;
  s.alpha_hats[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    s.betas[static_cast<size_t>(t)] = noised_betas[static_cast<size_t>(t) - 1];
    s.alpha_hats[static_cast<size_t>(t)] =
        s.alpha_hats[static_cast<size_t>(t) - 1] * (1.0 - s.betas[static_cast<size_t>(t)]);
  }
  return s;
}

}  // namespace

BetaSchedule make_cosine_schedule(int T) {
  require(T >= 1, "schedule needs T >= 1");
  const double offset = 0.008;
  auto f = [T, offset](double t) {
    const double u = (t / T + offset) / (1.0 + offset) * M_PI / 2.0;
    const double c = std::cos(u);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> betas(static_cast<size_t>(T));
  double prev_ab = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double ab = f(static_cast<double>(t)) / f0;
    betas[static_cast<size_t>(t) - 1] = std::min(1.0 - ab / prev_ab, 0.999);
    prev_ab = ab;
  }
  return with_prepended_zero("cosine", T, std::move(betas));
}

BetaSchedule make_linear_schedule(int T) {
  require(T >= 1, "schedule needs T >= 1");
  const double lo = 1e-4, hi = 0.02;
  std::vector<double> betas(static_cast<size_t>(T));
  for (int t = 1; t <= T; ++t) {
    const double u = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    betas[static_cast<size_t>(t) - 1] = lo + (hi - lo) * u;
  }
  return with_prepended_zero("linear", T, std::move(betas));
}

BetaSchedule make_schedule(const std::string& kind, int T) {
  if (kind == "cosine") return make_cosine_schedule(T);
  if (kind == "linear") return make_linear_schedule(T);
  throw ConfigError("unknown schedule kind: " + kind);
}

NoisedSample forward_noise(const Image& x0, int t, const Image& eps, const BetaSchedule& schedule) {
  schedule.check_t(t);
  require(x0.same_shape(eps), "x0/eps shape mismatch");
  NoisedSample out;
  out.t = t;
  out.eps = eps;
  out.x_t = x0;
  out.x_t.v = schedule.sqrt_ab(t) * x0.v + schedule.sqrt_one_minus_ab(t) * eps.v;
  return out;
}

}  // namespace maskdiff
