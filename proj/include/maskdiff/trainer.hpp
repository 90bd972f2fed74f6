#pragma once

#include "maskdiff/config.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/metrics.hpp"
#include "maskdiff/model.hpp"

#include <memory>
#include <string>

namespace maskdiff {

// Full mutable training state: parameters, EMA shadow, optimizer moments.
// Checkpoints persist and restore it exactly.
struct TrainState {
  Network net;
  ParamStore ema;  // empty while pretraining
  ParamStore adam_m;
  ParamStore adam_v;
  int64_t step = 0;  // optimizer steps completed
  std::string phase = "pretrain";

  explicit TrainState(const ModelConfig& cfg)
      : net(cfg) {}

  bool has_ema() const { return ema.count() > 0; }
};

// Linear warmup from zero to base over `warmup_steps`, then cosine decay to
// ~zero at `total_steps`.
struct LrSchedule {
  double base = 0.0;
  int64_t warmup_steps = 0;
  int64_t total_steps = 0;

  double at(int64_t step) const;
};

// One AdamW update; moments and params are aligned by tensor index.  Decay is
// applied only to tensors flagged for it (2-D weights; never biases,
// embeddings, or norm gains).
void adamw_step(ParamStore& params, const ParamStore& grads, ParamStore& m, ParamStore& v,
                int64_t t, double lr, double beta1, double beta2, double weight_decay,
                double eps = 1e-8);

void ema_update(ParamStore& ema, const ParamStore& params, double decay);

// Random resized crop (area scale uniform in [crop_scale_min, crop_scale_max])
// back to the input resolution, then an optional coin-flip horizontal flip.
// crop range [1, 1] with flip off is the identity.
Image augment(const Image& img, const AugmentConfig& aug, Rng& rng);

// Self-supervised pretraining.  Returns the final state; writes metrics when
// a logger is given.  `resume` continues a previous state to the configured
// epoch count and must match the config's model shape.  When out_dir is
// non-empty and checkpoint_every > 0, full resume checkpoints land there at
// the configured epoch interval.
TrainState pretrain(const RunConfig& cfg, const Dataset& data, MetricsLogger* metrics,
                    const TrainState* resume = nullptr, const std::string& out_dir = "");

// Label finetuning from a pretrained state: class pathway activated, label
// dropout to the null embedding, EMA shadow maintained every step.
TrainState finetune(const RunConfig& cfg, const Dataset& data, const TrainState& pretrained,
                    MetricsLogger* metrics, const TrainState* resume = nullptr,
                    const std::string& out_dir = "");

}  // namespace maskdiff
