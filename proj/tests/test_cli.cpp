#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

const std::string kTinyModel =
    " --set model.width=16 --set model.n_heads=2 --set model.enc_depth=1"
    " --set model.dec_depth=1 --set model.patch_size=4 --set model.time_embed_dim=16"
    " --set batch_size=16 --set epochs=1 --set warmup_epochs=0.5"
    " --set finetune.epochs=1 --set finetune.warmup_epochs=0.5"
    " --set data.n_train=32 --set data.n_eval=120"
    " --set schedule.T=50 --set sample.n_steps=10 --set sample.n_images=4"
    " --set probe.k_shots=2";

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

CliResult run_cli(const std::string& args, const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("maskdiff_cli_io_" + tag);
  fs::create_directories(dir);
  const fs::path out_file = dir / "stdout.txt";
  const fs::path err_file = dir / "stderr.txt";
  const std::string cmd = std::string(MASKDIFF_CLI_PATH) + " " + args + " > " +
                          out_file.string() + " 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  CliResult res;
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  res.out = slurp(out_file);
  res.err = slurp(err_file);
  fs::remove_all(dir);
  return res;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("command line end to end: train, finetune, probe, sample") {
  TempDir pre_dir("maskdiff_cli_pre");
  TempDir fine_dir("maskdiff_cli_fine");
  TempDir probe_dir("maskdiff_cli_probe");
  TempDir sample_a("maskdiff_cli_sample_a");
  TempDir sample_b("maskdiff_cli_sample_b");

  const CliResult pre =
      run_cli("pretrain --out " + pre_dir.str() + kTinyModel + " --seed 7", "pre");
  CAPTURE(pre.err);
  REQUIRE(pre.exit_code == 0);
  CHECK(contains(pre.out, "pretrain: steps=2"));
  CHECK(fs::exists(pre_dir.path / "checkpoint.bin"));
  CHECK(fs::exists(pre_dir.path / "metrics.jsonl"));
  CHECK(fs::exists(pre_dir.path / "config.txt"));

  const std::string pre_ckpt = pre_dir.str() + "/checkpoint.bin";
  const CliResult fine = run_cli(
      "finetune --checkpoint " + pre_ckpt + " --out " + fine_dir.str() + kTinyModel, "fine");
  CAPTURE(fine.err);
  REQUIRE(fine.exit_code == 0);
  CHECK(contains(fine.out, "finetune: steps=2"));
  CHECK(fs::exists(fine_dir.path / "checkpoint.bin"));

  const std::string fine_ckpt = fine_dir.str() + "/checkpoint.bin";
  const CliResult probe =
      run_cli("probe --checkpoint " + fine_ckpt + " --out " + probe_dir.str(), "probe");
  CAPTURE(probe.err);
  REQUIRE(probe.exit_code == 0);
  CHECK(contains(probe.out, "probe: accuracy="));
  CHECK(contains(probe.out, "shots=2"));

  const CliResult sample = run_cli(
      "sample --checkpoint " + fine_ckpt + " --out " + sample_a.str() + " --seed 11", "sa");
  CAPTURE(sample.err);
  REQUIRE(sample.exit_code == 0);
  CHECK(fs::exists(sample_a.path / "grid.pgm"));
  CHECK(fs::exists(sample_a.path / "samples.json"));
  CHECK(fs::exists(sample_a.path / "samples" / "sample_000.pgm"));
  CHECK(fs::exists(sample_a.path / "samples" / "sample_003.pgm"));

  const CliResult sample2 = run_cli(
      "sample --checkpoint " + fine_ckpt + " --out " + sample_b.str() + " --seed 11", "sb");
  REQUIRE(sample2.exit_code == 0);
  CHECK(slurp(sample_a.path / "grid.pgm") == slurp(sample_b.path / "grid.pgm"));
}

TEST_CASE("bad invocations map to the documented exit codes") {
  TempDir dir("maskdiff_cli_bad");

  const CliResult unknown_key = run_cli(
      "pretrain --out " + dir.str() + " --set bogus.key=1" + kTinyModel, "badkey");
  CHECK(unknown_key.exit_code == 2);
  CHECK(contains(unknown_key.err, "error: config: unknown config key: bogus.key"));

  const CliResult missing_ckpt = run_cli(
      "sample --checkpoint /no/such/checkpoint.bin --out " + dir.str(), "nock");
  CHECK(missing_ckpt.exit_code == 3);
  CHECK(contains(missing_ckpt.err, "error: io:"));

  const CliResult no_ckpt_flag = run_cli("finetune --out " + dir.str(), "noflag");
  CHECK(no_ckpt_flag.exit_code == 2);

  const CliResult bad_flag = run_cli("pretrain --frobnicate", "badflag");
  CHECK(bad_flag.exit_code == 2);

  const CliResult no_cmd = run_cli("", "nocmd");
  CHECK(no_cmd.exit_code == 2);

  const CliResult help = run_cli("--help", "help");
  CHECK(help.exit_code == 0);
  CHECK(contains(help.out, "pretrain"));
  CHECK(contains(help.out, "sample"));
}

TEST_CASE("the training config rides along inside the checkpoint") {
  TempDir pre_dir("maskdiff_cli_cfgride");
  TempDir probe_dir("maskdiff_cli_cfgride_probe");

  const CliResult pre = run_cli(
      "pretrain --out " + pre_dir.str() + kTinyModel + " --set objective.r_t0=0.25", "ride");
  REQUIRE(pre.exit_code == 0);

  // Probe with no --set flags: the model shape must come from the checkpoint.
  const CliResult probe = run_cli(
      "probe --checkpoint " + pre_dir.str() + "/checkpoint.bin --out " + probe_dir.str(),
      "rideprobe");
  CAPTURE(probe.err);
  REQUIRE(probe.exit_code == 0);
  CHECK(contains(probe.out, "repr_t=0"));

  const std::string cfg_txt = slurp(pre_dir.path / "config.txt");
  CHECK(contains(cfg_txt, "objective.r_t0 = 0.25"));
  CHECK(contains(cfg_txt, "model.width = 16"));
}
