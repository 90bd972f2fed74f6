#pragma once

#include "maskdiff/common.hpp"
#include "maskdiff/image.hpp"

#include <string>
#include <vector>

namespace maskdiff {

// Noise schedule over timesteps 0..T.  Index 0 is a reserved no-noise step
// (betas[0] = 0, alpha_hats[0] = 1) so t = 0 always returns the clean input;
// indices 1..T carry the named schedule unchanged.
struct BetaSchedule {
  std::string kind;                // "cosine" or "linear"
  int num_steps = 0;               // T; arrays have T + 1 entries
  std::vector<double> betas;       // betas[0] = 0
  std::vector<double> alpha_hats;  // alpha_hats[t] = prod_{s<=t} (1 - betas[s])

  double sqrt_ab(int t) const { return std::sqrt(alpha_hats[t]); }
  double sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - alpha_hats[t]); }
  void check_t(int t) const {
    require(t >= 0 && t <= num_steps, "timestep out of range 0..T");
  }
};

BetaSchedule make_cosine_schedule(int T);

BetaSchedule make_linear_schedule(int T);

BetaSchedule make_schedule(const std::string& kind, int T);

struct NoisedSample {
  Image x_t;
  Image eps;
  int t = 0;
};

// x_t = sqrt(alpha_hats[t]) * x_0 + sqrt(1 - alpha_hats[t]) * eps.
// t = 0 reproduces x_0 exactly.
NoisedSample forward_noise(const Image& x0, int t, const Image& eps,
                           const BetaSchedule& schedule);

}  // namespace maskdiff
