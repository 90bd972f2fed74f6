#include "maskdiff/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace maskdiff {

namespace {

enum class FieldKind { i32, u64, f64, boolean, str, head_mode };

struct Binding {
  const char* key;
  FieldKind kind;
  void* p;
};

// Every config key, in file order.  Parse, serialize, and --set overrides all
// go through this one table so they can never drift apart.
std::vector<Binding> bindings(RunConfig& c) {
  return {
      {"seed", FieldKind::u64, &c.seed},
      {"model.image_size", FieldKind::i32, &c.model.image_size},
      {"model.channels", FieldKind::i32, &c.model.channels},
      {"model.patch_size", FieldKind::i32, &c.model.patch_size},
      {"model.width", FieldKind::i32, &c.model.width},
      {"model.n_heads", FieldKind::i32, &c.model.n_heads},
      {"model.enc_depth", FieldKind::i32, &c.model.enc_depth},
      {"model.dec_depth", FieldKind::i32, &c.model.dec_depth},
      {"model.n_classes", FieldKind::i32, &c.model.n_classes},
      {"model.time_embed_dim", FieldKind::i32, &c.model.time_embed_dim},
      {"model.use_adaln", FieldKind::boolean, &c.model.use_adaln},
      {"schedule.kind", FieldKind::str, &c.schedule_kind},
      {"schedule.T", FieldKind::i32, &c.schedule_T},
      {"objective.r_t0", FieldKind::f64, &c.objective.r_t0},
      {"objective.m_t0", FieldKind::f64, &c.objective.m_t0},
      {"objective.m_tge1", FieldKind::f64, &c.objective.m_tge1},
      {"objective.head_mode", FieldKind::head_mode, &c.objective.head_mode},
      {"objective.deterministic_split", FieldKind::boolean, &c.objective.deterministic_split},
      {"optimizer.base_lr", FieldKind::f64, &c.optimizer.base_lr},
      {"optimizer.weight_decay", FieldKind::f64, &c.optimizer.weight_decay},
      {"optimizer.beta1", FieldKind::f64, &c.optimizer.beta1},
      {"optimizer.beta2", FieldKind::f64, &c.optimizer.beta2},
      {"batch_size", FieldKind::i32, &c.batch_size},
      {"epochs", FieldKind::i32, &c.epochs},
      {"warmup_epochs", FieldKind::f64, &c.warmup_epochs},
      {"grad_clip", FieldKind::f64, &c.grad_clip},
      {"checkpoint_every", FieldKind::i32, &c.checkpoint_every},
      {"augment.crop_scale_min", FieldKind::f64, &c.augment.crop_scale_min},
      {"augment.crop_scale_max", FieldKind::f64, &c.augment.crop_scale_max},
      {"augment.hflip", FieldKind::boolean, &c.augment.hflip},
      {"finetune.label_dropout", FieldKind::f64, &c.finetune.label_dropout},
      {"finetune.ema_decay", FieldKind::f64, &c.finetune.ema_decay},
      {"finetune.epochs", FieldKind::i32, &c.finetune.epochs},
      {"finetune.warmup_epochs", FieldKind::f64, &c.finetune.warmup_epochs},
      {"finetune.r_t0", FieldKind::f64, &c.finetune.r_t0},
      {"finetune.m_tge1", FieldKind::f64, &c.finetune.m_tge1},
      {"finetune.base_lr", FieldKind::f64, &c.finetune.base_lr},
      {"finetune.weight_decay", FieldKind::f64, &c.finetune.weight_decay},
      {"finetune.beta2", FieldKind::f64, &c.finetune.beta2},
      {"finetune.crop_scale_min", FieldKind::f64, &c.finetune.crop_scale_min},
      {"finetune.crop_scale_max", FieldKind::f64, &c.finetune.crop_scale_max},
      {"finetune.hflip", FieldKind::boolean, &c.finetune.hflip},
      {"sample.n_steps", FieldKind::i32, &c.sample.n_steps},
      {"sample.eta", FieldKind::f64, &c.sample.eta},
      {"sample.cfg_scale", FieldKind::f64, &c.sample.cfg_scale},
      {"sample.predict_mode", FieldKind::str, &c.sample.predict_mode},
      {"sample.n_images", FieldKind::i32, &c.sample.n_images},
      {"probe.k_shots", FieldKind::i32, &c.probe.k_shots},
      {"probe.ridge_lambda", FieldKind::f64, &c.probe.ridge_lambda},
      {"data.kind", FieldKind::str, &c.data.kind},
      {"data.path", FieldKind::str, &c.data.path},
      {"data.n_train", FieldKind::i32, &c.data.n_train},
      {"data.n_eval", FieldKind::i32, &c.data.n_eval},
      {"data.digit_noise", FieldKind::f64, &c.data.digit_noise},
  };
}

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

void set_field(const Binding& bind, const std::string& raw) {
  const std::string value = trim(raw);
  const std::string key(bind.key);
  try {
    switch (bind.kind) {
      case FieldKind::i32:
        *static_cast<int*>(bind.p) = std::stoi(value);
        break;
      case FieldKind::u64:
        *static_cast<uint64_t*>(bind.p) = std::stoull(value);
        break;
      case FieldKind::f64:
        *static_cast<double*>(bind.p) = std::stod(value);
        break;
      case FieldKind::boolean: {
        if (value == "true")
          *static_cast<bool*>(bind.p) = true;
        else if (value == "false")
          *static_cast<bool*>(bind.p) = false;
        else
          throw ConfigError("boolean key " + key + " expects true/false, got: " + value);
        break;
      }
      case FieldKind::str:
        *static_cast<std::string*>(bind.p) = value;
        break;
      case FieldKind::head_mode:
        *static_cast<HeadMode*>(bind.p) = head_mode_from_string(value);
        break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse value for " + key + ": " + value);
  }
}

std::string get_field(const Binding& bind) {
  std::ostringstream os;
  os.precision(17);
  switch (bind.kind) {
    case FieldKind::i32: os << *static_cast<const int*>(bind.p); break;
    case FieldKind::u64: os << *static_cast<const uint64_t*>(bind.p); break;
    case FieldKind::f64: os << *static_cast<const double*>(bind.p); break;
    case FieldKind::boolean: os << (*static_cast<const bool*>(bind.p) ? "true" : "false"); break;
    case FieldKind::str: os << *static_cast<const std::string*>(bind.p); break;
    case FieldKind::head_mode: os << to_string(*static_cast<const HeadMode*>(bind.p)); break;
  }
  return os.str();
}

const Binding& find_binding(std::vector<Binding>& binds, const std::string& key) {
  for (const Binding& b : binds)
    if (key == b.key) return b;
  throw ConfigError("unknown config key: " + key);
}

}  // namespace

double scaled_base_lr(int batch_size) { return 1.5 * batch_size / 256.0 * 1e-4; }

double RunConfig::resolved_base_lr() const {
  return optimizer.base_lr > 0.0 ? optimizer.base_lr : scaled_base_lr(batch_size);
}

double RunConfig::resolved_finetune_base_lr() const {
  return finetune.base_lr > 0.0 ? finetune.base_lr : scaled_base_lr(batch_size);
}

void RunConfig::validate() const {
  model.validate();
  objective.validate();
  require(schedule_kind == "cosine" || schedule_kind == "linear",
          "schedule.kind must be cosine or linear");
  require(schedule_T >= 1, "schedule.T must be >= 1");
  require(batch_size > 0, "batch_size must be positive");
  require(epochs > 0, "epochs must be positive");
  require(warmup_epochs >= 0.0 && warmup_epochs < epochs, "warmup_epochs must be in [0, epochs)");
  require(grad_clip > 0.0, "grad_clip must be positive");
  require(checkpoint_every >= 0, "checkpoint_every must be non-negative");
  require(optimizer.base_lr >= 0.0, "optimizer.base_lr must be non-negative");
  require(optimizer.weight_decay >= 0.0, "optimizer.weight_decay must be non-negative");
  require(optimizer.beta1 > 0.0 && optimizer.beta1 < 1.0, "beta1 must be in (0, 1)");
  require(optimizer.beta2 > 0.0 && optimizer.beta2 < 1.0, "beta2 must be in (0, 1)");
  require(augment.crop_scale_min > 0.0 && augment.crop_scale_min <= augment.crop_scale_max &&
              augment.crop_scale_max <= 1.0,
          "augment crop scale range must satisfy 0 < min <= max <= 1");
  require(finetune.label_dropout >= 0.0 && finetune.label_dropout <= 1.0,
          "finetune.label_dropout must be in [0, 1]");
  require(finetune.ema_decay > 0.0 && finetune.ema_decay <= 1.0,
          "finetune.ema_decay must be in (0, 1]");
  require(finetune.epochs > 0, "finetune.epochs must be positive");
  require(finetune.warmup_epochs >= 0.0 && finetune.warmup_epochs < finetune.epochs,
          "finetune.warmup_epochs must be in [0, finetune.epochs)");
  require(finetune.r_t0 >= 0.0 && finetune.r_t0 <= 1.0, "finetune.r_t0 must be in [0, 1]");
  require(finetune.m_tge1 >= 0.0 && finetune.m_tge1 < 1.0, "finetune.m_tge1 must be in [0, 1)");
  require(finetune.beta2 > 0.0 && finetune.beta2 < 1.0, "finetune.beta2 must be in (0, 1)");
  require(finetune.crop_scale_min > 0.0 &&
              finetune.crop_scale_min <= finetune.crop_scale_max &&
              finetune.crop_scale_max <= 1.0,
          "finetune crop scale range must satisfy 0 < min <= max <= 1");
  require(sample.n_steps >= 1 && sample.n_steps <= schedule_T, "sample.n_steps must be in 1..T");
  require(sample.eta >= 0.0, "sample.eta must be non-negative");
  require(sample.cfg_scale >= 0.0, "sample.cfg_scale must be non-negative");
  predict_mode_from_string(sample.predict_mode);
  require(sample.n_images > 0, "sample.n_images must be positive");
  require(probe.k_shots > 0, "probe.k_shots must be positive");
  require(probe.ridge_lambda > 0.0, "probe.ridge_lambda must be positive");
  require(data.kind == "digits" || data.kind == "dir", "data.kind must be digits or dir");
  require(data.n_train > 0 && data.n_eval > 0, "data split sizes must be positive");
}

ModelConfig RunConfig::build_model_config(const std::string& phase) const {
  require(phase == "pretrain" || phase == "finetune", "unknown phase: " + phase);
  ModelConfig mc = model;
  mc.head_mode = objective.head_mode;
  mc.n_classes = phase == "finetune" ? model.n_classes : 0;
  require(phase == "pretrain" || model.n_classes > 0,
          "finetune requires model.n_classes > 0");
  return mc;
}

SamplerConfig RunConfig::build_sampler_config() const {
  SamplerConfig sc;
  sc.n_steps = sample.n_steps;
  sc.eta = sample.eta;
  sc.cfg_scale = sample.cfg_scale;
  sc.predict_mode = predict_mode_from_string(sample.predict_mode);
  return sc;
}

BetaSchedule RunConfig::build_schedule() const { return make_schedule(schedule_kind, schedule_T); }

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  RunConfig cfg;
  auto binds = bindings(cfg);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: " + line);
    const std::string key = trim(line.substr(0, eq));
    set_field(find_binding(binds, key), line.substr(eq + 1));
  }
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& key_value) {
  const auto eq = key_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override is not key=value: " + key_value);
  auto binds = bindings(cfg);
  const std::string key = trim(key_value.substr(0, eq));
  set_field(find_binding(binds, key), key_value.substr(eq + 1));
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& key_values) {
  for (const std::string& kv : key_values) apply_override(cfg, kv);
}

std::string serialize_config(const RunConfig& cfg) {
  auto binds = bindings(const_cast<RunConfig&>(cfg));
  std::ostringstream os;
  for (const Binding& b : binds) os << b.key << " = " << get_field(b) << "\n";
  return os.str();
}

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config: " + path);
  out << serialize_config(cfg);
  if (!out) throw IoError("write failed: " + path);
}

std::map<std::string, std::string> config_to_map(const RunConfig& cfg) {
  auto binds = bindings(const_cast<RunConfig&>(cfg));
  std::map<std::string, std::string> kv;
  for (const Binding& b : binds) kv[b.key] = get_field(b);
  return kv;
}

RunConfig config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  auto binds = bindings(cfg);
  for (const auto& [key, value] : kv) set_field(find_binding(binds, key), value);
  return cfg;
}

}  // namespace maskdiff
