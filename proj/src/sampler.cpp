#include "maskdiff/sampler.hpp"

#include "maskdiff/patch_mask.hpp"

#include <cmath>

namespace maskdiff {

PredictMode predict_mode_from_string(const std::string& s) {
  if (s == "epsilon") return PredictMode::epsilon;
  if (s == "x0") return PredictMode::x0;
  throw ConfigError("unknown predict_mode: " + s);
}

std::string to_string(PredictMode m) {
  return m == PredictMode::epsilon ? "epsilon" : "x0";
}

void SamplerConfig::validate(int T) const {
  require(n_steps >= 1 && n_steps <= T, "n_steps must be in 1..T");
  require(eta >= 0.0, "eta must be non-negative");
  require(cfg_scale >= 0.0, "cfg_scale must be non-negative");
}

Matrix cfg_predict(const Matrix& eps_cond, const Matrix& eps_null, double s) {
  require(eps_cond.rows() == eps_null.rows() && eps_cond.cols() == eps_null.cols(),
          "guidance operands differ in shape");
  if (s == 1.0) return eps_cond;
  if (s == 0.0) return eps_null;
  return eps_null + s * (eps_cond - eps_null);
}

double ddim_sigma(const BetaSchedule& schedule, int t, int t_prev, double eta) {
  schedule.check_t(t);
  schedule.check_t(t_prev);
  const double ab_t = schedule.alpha_hats[static_cast<size_t>(t)];
  const double ab_prev = schedule.alpha_hats[static_cast<size_t>(t_prev)];
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt((1.0 - ab_t) / ab_prev);
}

Image ddim_step(const Image& x_t, const Image& eps_hat, int t, int t_prev,
                const BetaSchedule& schedule, double eta, const Image& noise) {
  schedule.check_t(t);
  schedule.check_t(t_prev);
  require(t >= 1 && t_prev < t, "ddim_step needs t_prev < t and t >= 1");
  require(x_t.same_shape(eps_hat), "x_t/eps_hat shape mismatch");
  const double ab_t = schedule.alpha_hats[static_cast<size_t>(t)];
  const double ab_prev = schedule.alpha_hats[static_cast<size_t>(t_prev)];

  Image x_hat0 = x_t;
  x_hat0.v = (x_t.v - std::sqrt(1.0 - ab_t) * eps_hat.v) / std::sqrt(ab_t);
  if (t_prev == 0) return x_hat0;  // final transition: sigma forced to 0

  const double sigma = ddim_sigma(schedule, t, t_prev, eta);
  const double radicand = std::max(1.0 - ab_prev - sigma * sigma, 0.0);
  Image out = x_t;
  out.v = std::sqrt(ab_prev) * x_hat0.v + std::sqrt(radicand) * eps_hat.v;
  if (sigma > 0.0) {
    require(x_t.same_shape(noise), "noise shape mismatch");
    out.v += sigma * noise.v;
  }
  return out;
}

Matrix x0_to_eps(const Matrix& x0_pred, const Matrix& x_t, int t, const BetaSchedule& schedule) {
  schedule.check_t(t);
  require(t >= 1, "x0 to eps conversion undefined at t = 0");
  const double ab = schedule.alpha_hats[static_cast<size_t>(t)];
  return (x_t - std::sqrt(ab) * x0_pred) / std::sqrt(1.0 - ab);
}

Image x0_to_eps(const Image& x0_pred, const Image& x_t, int t, const BetaSchedule& schedule) {
  schedule.check_t(t);
  require(t >= 1, "x0 to eps conversion undefined at t = 0");
  const double ab = schedule.alpha_hats[static_cast<size_t>(t)];
  Image out = x_t;
  out.v = (x_t.v - std::sqrt(ab) * x0_pred.v) / std::sqrt(1.0 - ab);
  return out;
}

std::vector<int> sampling_timesteps(int T, int n_steps) {
  require(n_steps >= 1 && n_steps <= T, "n_steps must be in 1..T");
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(n_steps));
  if (n_steps == 1) {
    ts.push_back(T);
    return ts;
  }
  // Evenly spaced from T down to 1 inclusive, rounded to distinct integers.
  int prev = -1;
  for (int i = 0; i < n_steps; ++i) {
    const double u = static_cast<double>(i) / (n_steps - 1);
    int t = static_cast<int>(std::lround(T + u * (1.0 - T)));
    if (t == prev) t = prev - 1;
    require(t >= 1, "timestep subsequence collapsed below 1");
    ts.push_back(t);
    prev = t;
  }
  return ts;
}

namespace {

Image clamp_unit(Image img) {
  img.v = img.v.cwiseMax(-1.0).cwiseMin(1.0);
  return img;
}

}  // namespace

std::vector<Image> ddim_sample_with(const EpsPredictor& predict, int h, int w, int c,
                                    const BetaSchedule& schedule, int n_steps, double eta,
                                    int n_images, uint64_t seed) {
  const std::vector<int> ts = sampling_timesteps(schedule.num_steps, n_steps);
  std::vector<Image> out;
  out.reserve(static_cast<size_t>(n_images));
  for (int i = 0; i < n_images; ++i) {
    Rng rng(seed, {stream::sample, static_cast<uint64_t>(i)});
    Image x = gaussian_image(h, w, c, rng);
    for (size_t k = 0; k < ts.size(); ++k) {
      const int t = ts[k];
      const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      const Image eps_hat = predict(x, t);
      Image noise;
      if (eta > 0.0 && t_prev > 0) noise = gaussian_image(h, w, c, rng);
      x = ddim_step(x, eps_hat, t, t_prev, schedule, eta, noise);
    }
    out.push_back(std::move(x));
  }
  return out;
}

std::vector<Image> ddim_sample(const Network& net, const BetaSchedule& schedule,
                               const SamplerConfig& cfg, int label, int n_images,
                               uint64_t seed) {
  cfg.validate(schedule.num_steps);
  if (label >= 0)
    require(net.conditional(), "label given but model is unconditional");
  const ModelConfig& mc = net.config();
  const MaskSpec spec = full_visible_mask(mc.n_patches());
  const std::vector<int> ts = sampling_timesteps(schedule.num_steps, cfg.n_steps);
  const bool guided = label >= 0 && cfg.cfg_scale != 1.0;

  // Driver head follows predict_mode, falling back to whichever single head
  // the model exposes.  Guidance combines the two passes in the driver's own
  // space; that equals eps-space guidance because the x0<->eps map is affine.
  const bool want_x0 = cfg.predict_mode == PredictMode::x0;
  auto pick = [&](const DualPrediction& p) -> std::pair<const Matrix*, bool> {
    if (want_x0 && p.has_x0()) return {&p.x0_pred, true};
    if (p.has_eps()) return {&p.eps_pred, false};
    return {&p.x0_pred, true};
  };
  struct Driver {
    Matrix tokens;
    bool is_x0 = false;
  };
  auto model_driver = [&](const PatchGrid& g, int t) -> Driver {
    DualPrediction cond_pred = net.forward(g.tokens, spec, t, label, nullptr);
    auto [tokens, is_x0] = pick(cond_pred);
    Driver d{*tokens, is_x0};
    if (guided) {
      DualPrediction null_pred = net.forward(g.tokens, spec, t, -1, nullptr);
      d.tokens = cfg_predict(d.tokens, *pick(null_pred).first, cfg.cfg_scale);
    }
    return d;
  };
  auto to_image = [&](const PatchGrid& shape, const Matrix& tokens) {
    PatchGrid g = shape;
    g.tokens = tokens;
    return unpatchify(g);
  };

  std::vector<Image> out;
  out.reserve(static_cast<size_t>(n_images));
  for (int i = 0; i < n_images; ++i) {
    Rng rng(seed, {stream::sample, static_cast<uint64_t>(i)});
    Image x = gaussian_image(mc.image_size, mc.image_size, mc.channels, rng);
    for (size_t k = 0; k < ts.size(); ++k) {
      const int t = ts[k];
      const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      const PatchGrid g = patchify(x, mc.patch_size);
      const Driver d = model_driver(g, t);
      if (t_prev == 0) {
        // Final transition: emit x_hat0 directly.
        if (d.is_x0) {
          x = to_image(g, d.tokens);
        } else {
          Image eps_img = to_image(g, d.tokens);
          const double ab = schedule.alpha_hats[static_cast<size_t>(t)];
          x.v = (x.v - std::sqrt(1.0 - ab) * eps_img.v) / std::sqrt(ab);
        }
      } else {
        const Matrix eps_tokens =
            d.is_x0 ? x0_to_eps(d.tokens, g.tokens, t, schedule) : d.tokens;
        const Image eps_hat = to_image(g, eps_tokens);
        Image noise;
        if (cfg.eta > 0.0) noise = gaussian_image(mc.image_size, mc.image_size, mc.channels, rng);
        x = ddim_step(x, eps_hat, t, t_prev, schedule, cfg.eta, noise);
      }
    }
    out.push_back(clamp_unit(std::move(x)));
  }
  return out;
}

}  // namespace maskdiff
