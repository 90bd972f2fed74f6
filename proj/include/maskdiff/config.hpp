#pragma once

#include "maskdiff/model.hpp"
#include "maskdiff/objective.hpp"
#include "maskdiff/sampler.hpp"

#include <map>
#include <string>
#include <vector>

namespace maskdiff {

struct OptimizerConfig {
  double base_lr = 0.0;  // 0 = derive from the batch-size rule
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
};

struct AugmentConfig {
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  bool hflip = false;
};

struct FinetuneConfig {
  double label_dropout = 0.10;
  double ema_decay = 0.01;
  int epochs = 12;
  double warmup_epochs = 0.5;
  double r_t0 = 0.05;
  double m_tge1 = 0.0;
  double base_lr = 0.0;  // 0 = derive from the batch-size rule
  double weight_decay = 0.0;
  double beta2 = 0.999;
  double crop_scale_min = 0.95;
  double crop_scale_max = 1.0;
  bool hflip = false;
};

struct SampleConfig {
  int n_steps = 125;
  double eta = 0.0;
  double cfg_scale = 1.5;
  std::string predict_mode = "epsilon";
  int n_images = 64;
};

struct ProbeConfig {
  int k_shots = 100;
  double ridge_lambda = 1e-3;
};

struct DataConfig {
  std::string kind = "digits";  // "digits" or "dir"
  std::string path;
  int n_train = 4096;
  int n_eval = 2048;
  double digit_noise = 0.08;
};

// Every training / sampling hyperparameter in one serializable record.  The
// on-disk form is a flat text file of dotted `key = value` lines; unknown
// keys are always errors.
struct RunConfig {
  uint64_t seed = 1234;
  ModelConfig model;
  std::string schedule_kind = "cosine";
  int schedule_T = 1000;
  ObjectiveConfig objective;
  OptimizerConfig optimizer;
  int batch_size = 128;
  int epochs = 30;
  double warmup_epochs = 1.5;
  double grad_clip = 1.0;
  int checkpoint_every = 0;  // epochs between mid-run checkpoints; 0 = final only
  AugmentConfig augment;
  FinetuneConfig finetune;
  SampleConfig sample;
  ProbeConfig probe;
  DataConfig data;

  void validate() const;

  // The network shape for a given phase: pretraining is unconditional, the
  // finetuned model carries the class table.
  ModelConfig build_model_config(const std::string& phase) const;
  SamplerConfig build_sampler_config() const;
  BetaSchedule build_schedule() const;

  double resolved_base_lr() const;           // pretrain
  double resolved_finetune_base_lr() const;  // finetune
};

// base_lr rule: 1.5 * batch / 256 * 1e-4.
double scaled_base_lr(int batch_size);

RunConfig load_config(const std::string& path);
// key_value is one "key=value" pair, as given to --set.
void apply_override(RunConfig& cfg, const std::string& key_value);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& key_values);
std::string serialize_config(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::string& path);

// Flat key/value view used by the checkpoint header.
std::map<std::string, std::string> config_to_map(const RunConfig& cfg);
RunConfig config_from_map(const std::map<std::string, std::string>& kv);

}  // namespace maskdiff
