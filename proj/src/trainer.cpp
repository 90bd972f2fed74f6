#include "maskdiff/trainer.hpp"

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/objective.hpp"
#include "maskdiff/schedules.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace maskdiff {

double LrSchedule::at(int64_t step) const {
  if (total_steps <= 0) return base;
  if (warmup_steps > 0 && step < warmup_steps) {
    return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  if (total_steps <= warmup_steps) return base;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void adamw_step(ParamStore& params, const ParamStore& grads, ParamStore& m, ParamStore& v,
                int64_t t, double lr, double beta1, double beta2, double weight_decay,
                double eps) {
  require(t >= 1, "optimizer step index must start at 1");
  require(params.count() == grads.count() && params.count() == m.count() &&
              params.count() == v.count(),
          "optimizer state does not match parameters");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.count(); ++i) {
    NamedTensor& p = params.tensor(i);
    const Matrix& g = grads.tensor(i).value;
    Matrix& mi = m.tensor(i).value;
    Matrix& vi = v.tensor(i).value;
    mi = beta1 * mi + (1.0 - beta1) * g;
    vi = beta2 * vi + (1.0 - beta2) * g.cwiseProduct(g);
    const Matrix m_hat = mi / bc1;
    const Matrix v_hat = vi / bc2;
    p.value.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + eps);
    if (p.decay && weight_decay > 0.0) {
      p.value *= 1.0 - lr * weight_decay;
    }
  }
}

void ema_update(ParamStore& ema, const ParamStore& params, double decay) {
  require(ema.count() == params.count(), "EMA state does not match parameters");
  for (size_t i = 0; i < params.count(); ++i) {
    Matrix& e = ema.tensor(i).value;
    e = (1.0 - decay) * e + decay * params.tensor(i).value;
  }
}

Image augment(const Image& img, const AugmentConfig& aug, Rng& rng) {
  const double area =
      aug.crop_scale_min + (aug.crop_scale_max - aug.crop_scale_min) * rng.uniform();
  const double side = std::sqrt(area);
  int ch = std::clamp(static_cast<int>(std::lround(img.h * side)), 1, img.h);
  int cw = std::clamp(static_cast<int>(std::lround(img.w * side)), 1, img.w);
  const int y0 = ch < img.h ? rng.uniform_int(0, img.h - ch) : 0;
  const int x0 = cw < img.w ? rng.uniform_int(0, img.w - cw) : 0;
  Image out = crop(img, y0, x0, ch, cw);
  if (ch != img.h || cw != img.w) out = resize_bilinear(out, img.h, img.w);
  if (aug.hflip && rng.uniform() < 0.5) out = hflip(out);
  return out;
}

namespace {

// Phase-specific knobs feeding the shared loop below.
struct LoopSpec {
  std::string phase;
  uint64_t phase_tag = 0;
  ObjectiveConfig objective;
  AugmentConfig aug;
  double base_lr = 0.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int epochs = 0;
  double warmup_epochs = 0.0;
  double label_dropout = 0.0;
  double ema_decay = 0.0;
  bool use_labels = false;
};

void scale_tensors(ParamStore& store, double factor) {
  for (size_t i = 0; i < store.count(); ++i) store.tensor(i).value *= factor;
}

void require_matching_state(const TrainState& state, const ModelConfig& expected,
                            const std::string& phase) {
  require(state.phase == phase, "resume state is from phase '" + state.phase +
                                    "', expected '" + phase + "'");
  Network fresh(expected);
  const ParamStore& a = fresh.params();
  const ParamStore& b = state.net.params();
  require(a.count() == b.count(), "resume state does not match the configured model");
  for (size_t i = 0; i < a.count(); ++i) {
    const NamedTensor& ta = a.tensor(i);
    const NamedTensor& tb = b.tensor(i);
    require(ta.name == tb.name && ta.value.rows() == tb.value.rows() &&
                ta.value.cols() == tb.value.cols(),
            "resume tensor mismatch at '" + ta.name + "'");
  }
}

void run_loop(const RunConfig& cfg, const Dataset& data, const LoopSpec& spec,
              TrainState& state, MetricsLogger* metrics, const std::string& out_dir) {
  require(data.size() > 0, "training data is empty");
  require(data.size() >= cfg.batch_size,
          "batch_size exceeds the dataset (" + std::to_string(cfg.batch_size) + " > " +
              std::to_string(data.size()) + ")");
  for (const LabeledImage& ex : data.items) {
    require(ex.image.h == cfg.model.image_size && ex.image.w == cfg.model.image_size &&
                ex.image.c == cfg.model.channels,
            "dataset image shape does not match the model");
    if (spec.use_labels) {
      require(ex.label >= 0 && ex.label < state.net.config().n_classes,
              "finetuning needs labels in [0, n_classes)");
    }
  }

  const BetaSchedule schedule = cfg.build_schedule();
  const int B = cfg.batch_size;
  const int64_t steps_per_epoch = data.size() / B;
  require(steps_per_epoch >= 1, "fewer examples than one batch");
  const int64_t total_steps = steps_per_epoch * spec.epochs;
  const LrSchedule lrs{spec.base_lr,
                       static_cast<int64_t>(std::llround(spec.warmup_epochs * steps_per_epoch)),
                       total_steps};

  const int P = cfg.model.patch_size;
  const int N = cfg.model.n_patches();

  ParamStore grads = state.net.params().zeros_like();
  std::vector<int> order;
  int64_t order_epoch = -1;

  int64_t epoch_tokens = 0;
  double epoch_loss = 0.0;
  int64_t epoch_examples = 0;
  auto wall_start = std::chrono::steady_clock::now();
  auto epoch_start = wall_start;

  for (int64_t gstep = state.step; gstep < total_steps; ++gstep) {
    const int64_t epoch = gstep / steps_per_epoch;
    const int64_t step_in_epoch = gstep % steps_per_epoch;
    if (epoch != order_epoch) {
      order.resize(data.size());
      std::iota(order.begin(), order.end(), 0);
      Rng srng(cfg.seed, {stream::shuffle, spec.phase_tag, static_cast<uint64_t>(epoch)});
      srng.shuffle(order);
      order_epoch = epoch;
      if (step_in_epoch == 0) {
        epoch_tokens = 0;
        epoch_loss = 0.0;
        epoch_examples = 0;
        epoch_start = std::chrono::steady_clock::now();
      }
    }

    grads.set_zero();
    double loss_sum = 0.0, x0_sum = 0.0, eps_sum = 0.0, recon_sum = 0.0;
    int n_t0 = 0, n_noised = 0;
    int64_t step_tokens = 0;
    int enc_len_t0 = -1, enc_len_noised = -1;

    for (int j = 0; j < B; ++j) {
      const uint64_t gs = static_cast<uint64_t>(gstep);
      const uint64_t js = static_cast<uint64_t>(j);
      const LabeledImage& ex = data.items[order[step_in_epoch * B + j]];

      Rng arng(cfg.seed, {stream::augment, spec.phase_tag, gs, js});
      const Image img = augment(ex.image, spec.aug, arng);

      Rng brng(cfg.seed, {stream::branch, spec.phase_tag, gs, js});
      const Branch branch = spec.objective.deterministic_split
                                ? branch_for_index(j, B, spec.objective)
                                : draw_loss_branch(brng, spec.objective);
      const bool is_t0 = branch == Branch::t0;
      const int t = is_t0 ? 0 : brng.uniform_int(1, schedule.num_steps);
      const double ratio = is_t0 ? spec.objective.m_t0 : spec.objective.m_tge1;
      const MaskSpec mask = sample_mask(N, ratio, brng);

      int label = -1;
      if (spec.use_labels) {
        label = ex.label;
        Rng drng(cfg.seed, {stream::dropout, spec.phase_tag, gs, js});
        if (drng.uniform() < spec.label_dropout) label = -1;
      }

      const PatchGrid clean = patchify(img, P);
      Matrix input_tokens;
      Matrix eps_tokens;
      if (is_t0) {
        input_tokens = clean.tokens;
      } else {
        Rng nrng(cfg.seed, {stream::noise, spec.phase_tag, gs, js});
        const Image eps = gaussian_image(img.h, img.w, img.c, nrng);
        const NoisedSample noised = forward_noise(img, t, eps, schedule);
        input_tokens = patchify(noised.x_t, P).tokens;
        eps_tokens = patchify(eps, P).tokens;
      }

      Tape tape;
      const DualPrediction pred = state.net.forward(input_tokens, mask, t, label, &tape);

      LossBreakdown lb;
      LossGrads lg;
      if (is_t0) {
        lb = recon_step_loss(pred, clean.tokens, mask);
        lg = recon_step_loss_grad(pred, clean.tokens, mask);
      } else {
        lb = noised_step_loss(pred, clean.tokens, eps_tokens, mask);
        lg = noised_step_loss_grad(pred, clean.tokens, eps_tokens, mask);
      }
      if (!std::isfinite(lb.total)) {
        std::ostringstream oss;
        oss << "non-finite loss (phase=" << spec.phase << " step=" << gstep
            << " epoch=" << epoch << " branch=" << (is_t0 ? "t0" : "noised") << " t=" << t
            << " lr=" << lrs.at(gstep) << ")";
        throw NumericError(oss.str());
      }
      state.net.backward(tape, lg.dx0, lg.deps, grads);

      loss_sum += lb.total;
      x0_sum += lb.x0_term;
      eps_sum += lb.eps_term;
      recon_sum += lb.recon_term;
      const int enc_len = static_cast<int>(tape.enc_in.rows());
      step_tokens += enc_len;
      if (is_t0) {
        ++n_t0;
        enc_len_t0 = enc_len;
      } else {
        ++n_noised;
        enc_len_noised = enc_len;
      }
    }

    scale_tensors(grads, 1.0 / B);
    double grad_norm = grads.global_norm();
    if (!std::isfinite(grad_norm)) {
      std::ostringstream oss;
      oss << "non-finite gradient (phase=" << spec.phase << " step=" << gstep
          << " epoch=" << epoch << " t0_frac=" << static_cast<double>(n_t0) / B
          << " lr=" << lrs.at(gstep) << ")";
      throw NumericError(oss.str());
    }
    if (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip) {
      scale_tensors(grads, cfg.grad_clip / grad_norm);
    }

    const double lr = lrs.at(gstep);
    ++state.step;
    adamw_step(state.net.params(), grads, state.adam_m, state.adam_v, state.step, lr,
               spec.beta1, spec.beta2, spec.weight_decay);
    if (state.has_ema()) ema_update(state.ema, state.net.params(), spec.ema_decay);

    epoch_tokens += step_tokens;
    epoch_loss += loss_sum;
    epoch_examples += B;

    if (metrics) {
      nlohmann::json rec{{"kind", "train_step"},
                         {"phase", spec.phase},
                         {"step", state.step},
                         {"epoch", epoch},
                         {"lr", lr},
                         {"loss", loss_sum / B},
                         {"x0_term", n_noised > 0 ? x0_sum / n_noised : 0.0},
                         {"eps_term", n_noised > 0 ? eps_sum / n_noised : 0.0},
                         {"recon_term", n_t0 > 0 ? recon_sum / n_t0 : 0.0},
                         {"grad_norm", grad_norm},
                         {"n_t0", n_t0},
                         {"n_noised", n_noised},
                         {"enc_token_steps", step_tokens}};
      if (enc_len_t0 >= 0) rec["enc_len_t0"] = enc_len_t0;
      if (enc_len_noised >= 0) rec["enc_len_noised"] = enc_len_noised;
      metrics->log(rec);
    }

    const bool epoch_done = step_in_epoch == steps_per_epoch - 1;
    if (epoch_done) {
      if (metrics) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                .count();
        metrics->log({{"kind", "epoch"},
                      {"phase", spec.phase},
                      {"epoch", epoch},
                      {"mean_loss", epoch_loss / std::max<int64_t>(1, epoch_examples)},
                      {"enc_token_steps", epoch_tokens},
                      {"seconds", secs}});
      }
      if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
          (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < spec.epochs) {
        std::ostringstream name;
        name << out_dir << "/checkpoint_epoch" << epoch + 1 << ".bin";
        save_checkpoint(name.str(), cfg, state);
      }
    }
  }

  if (metrics) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    metrics->log({{"kind", "phase_done"},
                  {"phase", spec.phase},
                  {"steps", state.step},
                  {"seconds", secs}});
  }
}

}  // namespace

TrainState pretrain(const RunConfig& cfg, const Dataset& data, MetricsLogger* metrics,
                    const TrainState* resume, const std::string& out_dir) {
  cfg.validate();
  const ModelConfig mc = cfg.build_model_config("pretrain");

  TrainState state(mc);
  if (resume) {
    require_matching_state(*resume, mc, "pretrain");
    state = *resume;
  } else {
    state.net.init_params(cfg.seed);
    state.adam_m = state.net.params().zeros_like();
    state.adam_v = state.net.params().zeros_like();
    state.step = 0;
    state.phase = "pretrain";
  }

  LoopSpec spec;
  spec.phase = "pretrain";
  spec.phase_tag = 0;
  spec.objective = cfg.objective;
  spec.objective.head_mode = mc.head_mode;
  spec.aug = cfg.augment;
  spec.base_lr = cfg.resolved_base_lr();
  spec.weight_decay = cfg.optimizer.weight_decay;
  spec.beta1 = cfg.optimizer.beta1;
  spec.beta2 = cfg.optimizer.beta2;
  spec.epochs = cfg.epochs;
  spec.warmup_epochs = cfg.warmup_epochs;
  spec.use_labels = false;

  run_loop(cfg, data, spec, state, metrics, out_dir);
  return state;
}

TrainState finetune(const RunConfig& cfg, const Dataset& data, const TrainState& pretrained,
                    MetricsLogger* metrics, const TrainState* resume, const std::string& out_dir) {
  cfg.validate();
  const ModelConfig mc = cfg.build_model_config("finetune");
  require(data.n_classes == mc.n_classes,
          "dataset has " + std::to_string(data.n_classes) + " classes but the model expects " +
              std::to_string(mc.n_classes));

  TrainState state(mc);
  if (resume) {
    require_matching_state(*resume, mc, "finetune");
    state = *resume;
  } else {
    require(pretrained.phase == "pretrain", "finetuning expects a pretraining checkpoint");
    state.net.init_params(cfg.seed);
    const ParamStore& src = pretrained.net.params();
    ParamStore& dst = state.net.params();
    for (size_t i = 0; i < src.count(); ++i) {
      const NamedTensor& ten = src.tensor(i);
      require(dst.has(ten.name), "pretrained tensor missing from the model: " + ten.name);
      Matrix& target = dst[ten.name];
      require(target.rows() == ten.value.rows() && target.cols() == ten.value.cols(),
              "pretrained tensor shape mismatch: " + ten.name);
      target = ten.value;
    }
    state.ema = state.net.params();
    state.adam_m = state.net.params().zeros_like();
    state.adam_v = state.net.params().zeros_like();
    state.step = 0;
    state.phase = "finetune";
  }

  LoopSpec spec;
  spec.phase = "finetune";
  spec.phase_tag = 1;
  spec.objective = cfg.objective;
  spec.objective.head_mode = mc.head_mode;
  spec.objective.r_t0 = cfg.finetune.r_t0;
  spec.objective.m_tge1 = cfg.finetune.m_tge1;
  spec.objective.validate();
  spec.aug.crop_scale_min = cfg.finetune.crop_scale_min;
  spec.aug.crop_scale_max = cfg.finetune.crop_scale_max;
  spec.aug.hflip = cfg.finetune.hflip;
  spec.base_lr = cfg.resolved_finetune_base_lr();
  spec.weight_decay = cfg.finetune.weight_decay;
  spec.beta1 = cfg.optimizer.beta1;
  spec.beta2 = cfg.finetune.beta2;
  spec.epochs = cfg.finetune.epochs;
  spec.warmup_epochs = cfg.finetune.warmup_epochs;
  spec.label_dropout = cfg.finetune.label_dropout;
  spec.ema_decay = cfg.finetune.ema_decay;
  spec.use_labels = true;

  run_loop(cfg, data, spec, state, metrics, out_dir);
  return state;
}

}  // namespace maskdiff
