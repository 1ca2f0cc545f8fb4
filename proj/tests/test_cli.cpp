#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using std::string;
namespace fs = std::filesystem;

namespace {

string binary() {
  const char* bin = std::getenv("PSCLAB_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("psclab_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const string& args, const fs::path& stdout_file = {}) {
  string cmd = binary() + " " + args + " 2>/dev/null";
  if (!stdout_file.empty()) cmd += " > " + stdout_file.string();
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<string> lines(const string& s) {
  std::vector<string> out;
  std::istringstream in(s);
  string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

void write_config(const fs::path& p, bool echo_oracle = true) {
  std::ofstream out(p);
  out << R"({
  "seed": 7,
  "model": {
    "layers": 1, "d_model": 8, "n_heads": 2, "n_kv_heads": 2,
    "vocab_size": 258, "max_context": 64,
    "schedule": {"kind": "base", "base": 1e4, "dim": 4},
    "psc": {"enabled": true, "placement": "pre"},
    "lora": {"enabled": true, "rank": 2, "targets": ["q", "k"], "scale": 1.0}
  },
  "train": {
    "lr": 0.01, "warmup_steps": 2, "total_steps": 8,
    "batch_size": 1, "grad_accum": 1, "seq_len": 16, "seed": 7,
    "checkpoint_interval": 4
  },
  "eval": {
    "windows": [16], "eval_lengths": [64], "stride": 8,
    "passkey_lengths": [400], "passkey_trials": 5,
    "echo_oracle": )" << (echo_oracle ? "true" : "false")
      << R"(
  },
  "data": {"synthetic_pattern": "ab", "synthetic_len": 2048}
})";
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  TempDir dir;
  REQUIRE(run("schedule") == 2);  // missing --config
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  REQUIRE(run("--config " + cfg.string() + " frobnicate") == 2);
  REQUIRE(run("--config " + (dir.path / "missing.json").string() + " schedule") == 2);
  std::ofstream(dir.path / "broken.json") << "{ not json";
  REQUIRE(run("--config " + (dir.path / "broken.json").string() + " schedule") == 2);
  std::ofstream(dir.path / "badkey.json") << R"({"seed": 1, "model": {"oops": 1}})";
  REQUIRE(run("--config " + (dir.path / "badkey.json").string() + " schedule") == 2);
}

TEST_CASE("schedule prints the frequency table") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  fs::path out = dir.path / "sched.csv";
  REQUIRE(run("--config " + cfg.string() + " schedule", out) == 0);
  auto ls = lines(slurp(out));
  REQUIRE(ls.size() == 3);  // header + d/2 rows
  REQUIRE(ls[0] == "i,theta");
  REQUIRE(ls[1] == "0,1");  // theta_0 = b^0
  // stable across runs
  fs::path out2 = dir.path / "sched2.csv";
  REQUIRE(run("--config " + cfg.string() + " schedule", out2) == 0);
  REQUIRE(slurp(out) == slurp(out2));
}

TEST_CASE("rank sweep writes rank = 2 x shifted pairs") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  fs::path out = dir.path / "rank_out";
  REQUIRE(run("--config " + cfg.string() + " --out " + out.string() + " rank") == 0);
  auto ls = lines(slurp(out / "rank_sweep.csv"));
  REQUIRE(ls[0] == "num_shifted,m,rank");
  REQUIRE(ls.size() == 1 + 3 * 3);  // d/2 = 2 -> shifted 0..2, three m values
  for (std::size_t i = 1; i < ls.size(); ++i) {
    std::istringstream row(ls[i]);
    std::size_t shifted, m;
    int rank;
    char comma;
    row >> shifted >> comma >> m >> comma >> rank;
    REQUIRE(rank == static_cast<int>(2 * shifted));
  }
}

TEST_CASE("train, ppl, passkey, diagnostic, dist pipeline") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  fs::path out = dir.path / "out";
  const string base = "--config " + cfg.string() + " --out " + out.string();

  REQUIRE(run(base + " train") == 0);
  REQUIRE(fs::exists(out / "checkpoint.ckpt"));
  REQUIRE(fs::exists(out / "checkpoint_step4.ckpt"));
  REQUIRE(fs::exists(out / "checkpoint_step8.ckpt"));
  auto hist = lines(slurp(out / "history.csv"));
  REQUIRE(hist[0] == "step,loss,lr");
  REQUIRE(hist.size() == 9);  // 8 steps
  REQUIRE(hist[1].rfind("1,", 0) == 0);
  REQUIRE(hist[8].rfind("8,", 0) == 0);

  // training is deterministic: a second run reproduces history.csv
  fs::path out_b = dir.path / "out_b";
  REQUIRE(run("--config " + cfg.string() + " --out " + out_b.string() + " train") == 0);
  REQUIRE(slurp(out / "history.csv") == slurp(out_b / "history.csv"));

  const string ckpt = " --checkpoint " + (out / "checkpoint.ckpt").string();
  REQUIRE(run(base + ckpt + " ppl") == 0);
  auto ppl = lines(slurp(out / "ppl.csv"));
  REQUIRE(ppl[0] == "window,eval_length,ppl,tokens_scored");
  REQUIRE(ppl.size() == 2);
  REQUIRE(ppl[1].rfind("16,64,", 0) == 0);

  REQUIRE(run(base + " passkey") == 0);  // echo oracle needs no checkpoint
  auto pk = lines(slurp(out / "passkey.csv"));
  REQUIRE(pk[0] == "length,trials,accuracy");
  REQUIRE(pk[1] == "400,5,1");

  REQUIRE(run(base + " diagnostic") == 0);
  auto diag = lines(slurp(out / "diagnostic.csv"));
  REQUIRE(diag[0] == "seed,mse_lora_only,mse_lora_psc");
  REQUIRE(diag.size() == 11);  // 10 seeds

  REQUIRE(run(base + ckpt + " dist") == 0);
  auto dist = lines(slurp(out / "dist.csv"));
  REQUIRE(dist[0] == "pair_index,phase,norm");
  REQUIRE(dist.size() == 1 + 258 * 2);  // vocab x d_h/2 pairs
}

TEST_CASE("resume from checkpoint reproduces the history tail") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  fs::path full = dir.path / "full";
  REQUIRE(run("--config " + cfg.string() + " --out " + full.string() + " train") == 0);

  // rerun the tail from the step-4 checkpoint
  fs::path resumed = dir.path / "resumed";
  REQUIRE(run("--config " + cfg.string() + " --out " + resumed.string() + " --checkpoint " +
              (full / "checkpoint_step4.ckpt").string() + " train") == 0);
  auto tail = lines(slurp(resumed / "history.csv"));
  auto whole = lines(slurp(full / "history.csv"));
  REQUIRE(tail.size() == 5);  // header + steps 5..8
  for (std::size_t i = 1; i < tail.size(); ++i) REQUIRE(tail[i] == whole[i + 4]);
}

TEST_CASE("missing checkpoint and missing data exit with the right codes") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  const string base = "--config " + cfg.string() + " --out " + (dir.path / "o").string();
  REQUIRE(run(base + " --checkpoint /nonexistent.ckpt ppl") == 2);
  REQUIRE(run(base + " ppl") == 2);  // no checkpoint given at all

  // point data at a nonexistent directory
  fs::path cfg2 = dir.path / "baddata.json";
  {
    std::ifstream in(cfg);
    std::ostringstream os;
    os << in.rdbuf();
    string text = os.str();
    const string from = "{\"synthetic_pattern\": \"ab\", \"synthetic_len\": 2048}";
    const auto pos = text.find(from);
    REQUIRE(pos != string::npos);
    text.replace(pos, from.size(), "{\"dir\": \"/nonexistent_corpus_dir\"}");
    std::ofstream(cfg2) << text;
  }
  REQUIRE(run("--config " + cfg2.string() + " --out " + (dir.path / "o2").string() + " train") ==
          3);
}

TEST_CASE("seed override changes the run") {
  TempDir dir;
  fs::path cfg = dir.path / "run.json";
  write_config(cfg);
  fs::path a = dir.path / "a", b = dir.path / "b", c = dir.path / "c";
  REQUIRE(run("--config " + cfg.string() + " --out " + a.string() + " --seed 1 train") == 0);
  REQUIRE(run("--config " + cfg.string() + " --out " + b.string() + " --seed 2 train") == 0);
  REQUIRE(run("--config " + cfg.string() + " --out " + c.string() + " --seed 1 train") == 0);
  REQUIRE(slurp(a / "history.csv") != slurp(b / "history.csv"));
  REQUIRE(slurp(a / "history.csv") == slurp(c / "history.csv"));
}
