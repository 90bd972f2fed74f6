#include "maskdiff/checkpoint.hpp"
#include "maskdiff/config.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/eval.hpp"
#include "maskdiff/metrics.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace maskdiff;

namespace {

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
  double cfg_scale = 1.5;
  int steps = 0;
  double eta = 0.0;
  int label = -1;
  int shots = 0;
};

void add_common_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "Config file (flat dotted key = value lines)");
  sub->add_option("--set", f.sets, "Override one config key, e.g. --set epochs=4 (repeatable)");
  sub->add_option("--seed", f.seed, "Override the config seed");
  sub->add_option("--out", f.out, "Output directory (default runs/<subcommand>)");
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

// Base config comes from --config when given, else from the checkpoint that
// is being consumed, else from the built-in defaults; --set and --seed apply
// on top in that order.
RunConfig resolve_config(const Flags& f, bool config_given, bool seed_given,
                         const RunConfig* ckpt_cfg) {
  RunConfig cfg;
  if (config_given) {
    cfg = load_config(f.config);
  } else if (ckpt_cfg) {
    cfg = *ckpt_cfg;
  }
  apply_overrides(cfg, f.sets);
  if (seed_given) cfg.seed = f.seed;
  cfg.validate();
  return cfg;
}

Dataset build_dataset(const RunConfig& cfg, bool eval_split) {
  if (cfg.data.kind == "digits") {
    require(cfg.model.channels == 1, "the digits corpus is single-channel");
    DigitOptions opts;
    opts.image_size = cfg.model.image_size;
    opts.noise = cfg.data.digit_noise;
    const int n = eval_split ? cfg.data.n_eval : cfg.data.n_train;
    return make_digit_dataset(n, eval_split ? cfg.seed + 1 : cfg.seed, opts);
  }
  if (cfg.data.kind == "dir") {
    require(!cfg.data.path.empty(), "data.path is required when data.kind = dir");
    const std::string sub = eval_split ? "/eval" : "/train";
    return load_directory_dataset(cfg.data.path + sub, cfg.model.image_size, cfg.model.channels);
  }
  throw ConfigError("unknown data.kind: " + cfg.data.kind);
}

Network network_for_inference(const TrainState& state) {
  Network net = state.net;
  if (state.has_ema()) {
    ParamStore& p = net.params();
    for (size_t i = 0; i < p.count(); ++i) {
      p.tensor(i).value = state.ema.tensor(i).value;
    }
  }
  return net;
}

int representation_t(const RunConfig& training_cfg) {
  return training_cfg.objective.r_t0 == 0.0 ? 50 : 0;
}

int cmd_pretrain(const Flags& f, bool config_given, bool seed_given, bool ckpt_given) {
  std::optional<LoadedCheckpoint> resume;
  if (ckpt_given) resume = load_checkpoint(f.checkpoint);
  const RunConfig cfg =
      resolve_config(f, config_given, seed_given, resume ? &resume->config : nullptr);

  make_out_dir(f.out);
  save_config(cfg, f.out + "/config.txt");
  MetricsLogger metrics(f.out + "/metrics.jsonl");

  const Dataset data = build_dataset(cfg, false);
  const TrainState state =
      pretrain(cfg, data, &metrics, resume ? &resume->state : nullptr, f.out);
  const std::string ckpt = f.out + "/checkpoint.bin";
  save_checkpoint(ckpt, cfg, state);
  std::cout << "pretrain: steps=" << state.step << " checkpoint=" << ckpt << "\n";
  return 0;
}

int cmd_finetune(const Flags& f, bool config_given, bool seed_given, bool ckpt_given) {
  require(ckpt_given, "finetune needs --checkpoint (a pretraining checkpoint)");
  const LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  const RunConfig cfg = resolve_config(f, config_given, seed_given, &loaded.config);

  make_out_dir(f.out);
  save_config(cfg, f.out + "/config.txt");
  MetricsLogger metrics(f.out + "/metrics.jsonl");

  const Dataset data = build_dataset(cfg, false);
  const TrainState* resume = loaded.state.phase == "finetune" ? &loaded.state : nullptr;
  const TrainState state = finetune(cfg, data, loaded.state, &metrics, resume, f.out);
  const std::string ckpt = f.out + "/checkpoint.bin";
  save_checkpoint(ckpt, cfg, state);
  std::cout << "finetune: steps=" << state.step << " checkpoint=" << ckpt << "\n";
  return 0;
}

int cmd_sample(const Flags& f, const CLI::App* sub, bool config_given, bool seed_given,
               bool ckpt_given) {
  require(ckpt_given, "sample needs --checkpoint");
  const LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  RunConfig cfg = resolve_config(f, config_given, seed_given, &loaded.config);
  if (sub->count("--cfg_scale")) cfg.sample.cfg_scale = f.cfg_scale;
  if (sub->count("--steps")) cfg.sample.n_steps = f.steps;
  if (sub->count("--eta")) cfg.sample.eta = f.eta;
  cfg.validate();

  make_out_dir(f.out);
  make_out_dir(f.out + "/samples");
  save_config(cfg, f.out + "/config.txt");
  MetricsLogger metrics(f.out + "/metrics.jsonl");

  const Network net = network_for_inference(loaded.state);
  const BetaSchedule schedule = cfg.build_schedule();
  const SamplerConfig scfg = cfg.build_sampler_config();
  scfg.validate(schedule.num_steps);

  const int n = cfg.sample.n_images;
  std::vector<int> labels(n, -1);
  if (sub->count("--label")) {
    require(f.label >= -1, "--label must be -1 (null) or a class index");
    if (f.label >= 0) {
      require(net.conditional(), "--label needs a class-conditional checkpoint");
      require(f.label < net.config().n_classes, "--label out of range");
    }
    std::fill(labels.begin(), labels.end(), f.label);
  } else if (net.conditional()) {
    for (int i = 0; i < n; ++i) labels[i] = i % net.config().n_classes;
  }

  std::vector<Image> images;
  images.reserve(n);
  std::vector<std::string> files;
  for (int i = 0; i < n; ++i) {
    const uint64_t img_seed = derive_stream(cfg.seed, {stream::sample, static_cast<uint64_t>(i)});
    std::vector<Image> one = ddim_sample(net, schedule, scfg, labels[i], 1, img_seed);
    char name[64];
    std::snprintf(name, sizeof(name), "samples/sample_%03d.pgm", i);
    write_pnm(one[0], f.out + "/" + name);
    files.emplace_back(name);
    images.push_back(std::move(one[0]));
  }
  const std::string grid = f.out + "/grid.pgm";
  write_pnm(tile_images(images, 8), grid);

  nlohmann::json meta{{"kind", "samples"},
                      {"n_images", n},
                      {"labels", labels},
                      {"cfg_scale", cfg.sample.cfg_scale},
                      {"eta", cfg.sample.eta},
                      {"n_steps", cfg.sample.n_steps},
                      {"predict_mode", cfg.sample.predict_mode},
                      {"seed", cfg.seed},
                      {"checkpoint", f.checkpoint},
                      {"checkpoint_phase", loaded.state.phase},
                      {"ema_weights", loaded.state.has_ema()},
                      {"grid", "grid.pgm"},
                      {"files", files}};
  std::ofstream meta_out(f.out + "/samples.json");
  if (!meta_out) throw IoError("cannot write " + f.out + "/samples.json");
  meta_out << meta.dump(2) << "\n";
  metrics.log(meta);
  std::cout << "sample: n=" << n << " cfg_scale=" << cfg.sample.cfg_scale << " grid=" << grid
            << "\n";
  return 0;
}

int cmd_probe(const Flags& f, const CLI::App* sub, bool config_given, bool seed_given,
              bool ckpt_given) {
  require(ckpt_given, "probe needs --checkpoint");
  const LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  RunConfig cfg = resolve_config(f, config_given, seed_given, &loaded.config);
  if (sub->count("--shots")) cfg.probe.k_shots = f.shots;
  cfg.validate();

  make_out_dir(f.out);
  save_config(cfg, f.out + "/config.txt");
  MetricsLogger metrics(f.out + "/metrics.jsonl");

  const Dataset data = build_dataset(cfg, true);
  const BetaSchedule schedule = loaded.config.build_schedule();
  const int repr_t = representation_t(loaded.config);
  const ProbeResult result = probe_model(loaded.state.net, schedule, data, cfg.probe.k_shots,
                                         cfg.probe.ridge_lambda, cfg.seed, repr_t);

  metrics.log({{"kind", "probe"},
               {"accuracy", result.accuracy},
               {"k_shots", result.n_shots},
               {"n_classes", result.n_classes},
               {"ridge_lambda", result.ridge_lambda},
               {"repr_t", repr_t},
               {"checkpoint", f.checkpoint}});
  std::cout << "probe: accuracy=" << result.accuracy << " shots=" << result.n_shots
            << " classes=" << result.n_classes << " lambda=" << result.ridge_lambda
            << " repr_t=" << repr_t << "\n";
  return 0;
}

struct AblateRow {
  std::string name;
  std::function<void(RunConfig&)> tweak;
};

int64_t epoch_token_steps(const std::string& metrics_path) {
  std::ifstream in(metrics_path);
  if (!in) throw IoError("cannot read " + metrics_path);
  std::string line;
  int64_t last = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json rec = nlohmann::json::parse(line);
    if (rec.value("kind", "") == "epoch" && rec.value("phase", "") == "pretrain") {
      last = rec.value("enc_token_steps", int64_t{0});
    }
  }
  return last;
}

int cmd_ablate(const Flags& f, const CLI::App* sub, bool config_given, bool seed_given) {
  const RunConfig base = resolve_config(f, config_given, seed_given, nullptr);
  make_out_dir(f.out);
  save_config(base, f.out + "/config.txt");
  MetricsLogger metrics(f.out + "/metrics.jsonl");

  const std::vector<AblateRow> rows = {
      {"base", [](RunConfig&) {}},
      {"x0_only", [](RunConfig& c) { c.objective.head_mode = HeadMode::x0_only; }},
      {"eps_only", [](RunConfig& c) { c.objective.head_mode = HeadMode::eps_only; }},
      {"low_r_t0", [](RunConfig& c) { c.objective.r_t0 = 0.25; }},
      {"high_m", [](RunConfig& c) { c.objective.m_tge1 = 0.75; }},
      {"m_tge1_0", [](RunConfig& c) { c.objective.m_tge1 = 0.0; }},
      {"no_adaln", [](RunConfig& c) { c.model.use_adaln = false; }},
  };

  const Dataset eval_data = build_dataset(base, true);
  const OracleClassifier oracle = train_pixel_oracle(eval_data, base.probe.ridge_lambda, base.seed);

  struct RowResult {
    std::string name;
    double probe_acc = 0.0;
    double fidelity = 0.0;
    int64_t tokens_per_epoch = 0;
  };
  std::vector<RowResult> results;

  for (const AblateRow& row : rows) {
    RunConfig cfg = base;
    row.tweak(cfg);
    cfg.validate();
    const std::string row_dir = f.out + "/rows/" + row.name;
    make_out_dir(row_dir);
    save_config(cfg, row_dir + "/config.txt");
    MetricsLogger row_metrics(row_dir + "/metrics.jsonl");

    const Dataset train_data = build_dataset(cfg, false);
    const TrainState pre = pretrain(cfg, train_data, &row_metrics, nullptr, row_dir);
    save_checkpoint(row_dir + "/pretrain.bin", cfg, pre);

    const BetaSchedule schedule = cfg.build_schedule();
    const int repr_t = representation_t(cfg);
    const ProbeResult probe = probe_model(pre.net, schedule, eval_data, cfg.probe.k_shots,
                                          cfg.probe.ridge_lambda, cfg.seed, repr_t);

    const TrainState fine = finetune(cfg, train_data, pre, &row_metrics, nullptr, row_dir);
    save_checkpoint(row_dir + "/finetune.bin", cfg, fine);

    const Network net = network_for_inference(fine);
    const SamplerConfig scfg = cfg.build_sampler_config();
    scfg.validate(schedule.num_steps);
    const int n = cfg.sample.n_images;
    std::vector<Image> samples;
    std::vector<int> labels(n);
    samples.reserve(n);
    for (int i = 0; i < n; ++i) {
      labels[i] = i % cfg.model.n_classes;
      const uint64_t img_seed =
          derive_stream(cfg.seed, {stream::sample, static_cast<uint64_t>(i)});
      samples.push_back(ddim_sample(net, schedule, scfg, labels[i], 1, img_seed)[0]);
    }
    write_pnm(tile_images(samples, 8), row_dir + "/grid.pgm");
    const double fidelity = conditional_fidelity_check(samples, labels, oracle);

    RowResult r{row.name, probe.accuracy, fidelity,
                epoch_token_steps(row_dir + "/metrics.jsonl")};
    results.push_back(r);
    metrics.log({{"kind", "ablate_row"},
                 {"row", r.name},
                 {"probe_accuracy", r.probe_acc},
                 {"fidelity", r.fidelity},
                 {"enc_token_steps_per_epoch", r.tokens_per_epoch},
                 {"repr_t", repr_t}});
  }

  std::printf("%-10s %12s %10s %16s\n", "row", "probe_acc", "fidelity", "tokens/epoch");
  for (const RowResult& r : results) {
    std::printf("%-10s %12.4f %10.4f %16lld\n", r.name.c_str(), r.probe_acc, r.fidelity,
                static_cast<long long>(r.tokens_per_epoch));
  }
  (void)sub;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-diffusion auto-encoder: pretrain, finetune, sample, probe, ablate"};
  app.require_subcommand(1);

  Flags f;
  CLI::App* sc_pretrain = app.add_subcommand("pretrain", "Self-supervised pretraining");
  CLI::App* sc_finetune = app.add_subcommand("finetune", "Label finetuning with EMA");
  CLI::App* sc_sample = app.add_subcommand("sample", "Draw images from a checkpoint");
  CLI::App* sc_probe = app.add_subcommand("probe", "k-shot linear probe of a checkpoint");
  CLI::App* sc_ablate = app.add_subcommand("ablate", "Train and evaluate the knob grid");

  for (CLI::App* sc : {sc_pretrain, sc_finetune, sc_sample, sc_probe, sc_ablate}) {
    add_common_flags(sc, f);
  }
  for (CLI::App* sc : {sc_pretrain, sc_finetune, sc_sample, sc_probe}) {
    sc->add_option("--checkpoint", f.checkpoint,
                   "Input checkpoint (resume for pretrain/finetune, model for sample/probe)");
  }
  sc_sample->add_option("--cfg_scale", f.cfg_scale, "Guidance scale (1 = unguided)");
  sc_sample->add_option("--steps", f.steps, "Sampling steps");
  sc_sample->add_option("--eta", f.eta, "DDIM eta");
  sc_sample->add_option("--label", f.label, "Condition every sample on this class (-1 = null)");
  sc_probe->add_option("--shots", f.shots, "Examples per class in the probe fit set");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config_error);
  }

  CLI::App* sub = app.get_subcommands().at(0);
  if (f.out.empty()) f.out = "runs/" + sub->get_name();
  const bool config_given = sub->count("--config") > 0;
  const bool seed_given = sub->count("--seed") > 0;
  const bool ckpt_given = sub->count("--checkpoint") > 0;

  try {
    if (sub == sc_pretrain) return cmd_pretrain(f, config_given, seed_given, ckpt_given);
    if (sub == sc_finetune) return cmd_finetune(f, config_given, seed_given, ckpt_given);
    if (sub == sc_sample) return cmd_sample(f, sub, config_given, seed_given, ckpt_given);
    if (sub == sc_probe) return cmd_probe(f, sub, config_given, seed_given, ckpt_given);
    if (sub == sc_ablate) return cmd_ablate(f, sub, config_given, seed_given);
    throw ConfigError("unknown subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << "\n";
    return static_cast<int>(ExitCode::config_error);
  } catch (const IoError& e) {
    std::cerr << "error: io: " << one_line(e.what()) << "\n";
    return static_cast<int>(ExitCode::io_error);
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << one_line(e.what()) << "\n";
    return static_cast<int>(ExitCode::numeric_error);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
}
