#pragma once

#include "maskdiff/model.hpp"
#include "maskdiff/schedules.hpp"

#include <functional>
#include <vector>

namespace maskdiff {

enum class PredictMode { epsilon, x0 };

PredictMode predict_mode_from_string(const std::string& s);
std::string to_string(PredictMode m);

struct SamplerConfig {
  int n_steps = 125;
  double eta = 0.0;
  double cfg_scale = 1.5;
  PredictMode predict_mode = PredictMode::epsilon;

  void validate(int T) const;
};

// eps_null + s * (eps_cond - eps_null).  s = 1 and s = 0 return the inputs
// unchanged (bitwise), not via the arithmetic.
Matrix cfg_predict(const Matrix& eps_cond, const Matrix& eps_null, double s);

// The sigma_t used by ddim_step: eta * sqrt((1-ab[t_prev])/(1-ab[t])) *
// sqrt((1-ab[t])/ab[t_prev]).
double ddim_sigma(const BetaSchedule& schedule, int t, int t_prev, double eta);

// One reverse step t -> t_prev:
//   x_hat0 = (x_t - sqrt(1-ab[t]) * eps_hat) / sqrt(ab[t])
//   x_prev = sqrt(ab[t_prev]) * x_hat0
//          + sqrt(max(1 - ab[t_prev] - sigma^2, 0)) * eps_hat + sigma * noise
// t_prev = 0 lands on x_hat0 exactly (sigma = 0 there).
Image ddim_step(const Image& x_t, const Image& eps_hat, int t, int t_prev,
                const BetaSchedule& schedule, double eta, const Image& noise);

// Algebraic inversion of the forward process: (x_t - sqrt(ab[t]) * x0) /
// sqrt(1 - ab[t]).  Undefined at t = 0.
Matrix x0_to_eps(const Matrix& x0_pred, const Matrix& x_t, int t, const BetaSchedule& schedule);
Image x0_to_eps(const Image& x0_pred, const Image& x_t, int t, const BetaSchedule& schedule);

// Uniformly strided decreasing timesteps from T to 1 inclusive, n_steps long.
std::vector<int> sampling_timesteps(int T, int n_steps);

// Model evaluated with every patch visible.  Returns eps_hat in image space
// (converting from the x0 head when the config asks for it); the final step
// asks for x0 directly.  `label` = -1 samples the null condition.
std::vector<Image> ddim_sample(const Network& net, const BetaSchedule& schedule,
                               const SamplerConfig& cfg, int label, int n_images,
                               uint64_t seed);

// Test seam: sampler driven by an arbitrary eps predictor instead of a
// network, e.g. the closed-form Gaussian-data predictor.
using EpsPredictor = std::function<Image(const Image& x_t, int t)>;

std::vector<Image> ddim_sample_with(const EpsPredictor& predict, int h, int w, int c,
                                    const BetaSchedule& schedule, int n_steps, double eta,
                                    int n_images, uint64_t seed);

}  // namespace maskdiff
