// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"
#include "nmt/cli.hpp"
#include "nmt/data.hpp"
#include "nmt/decoding.hpp"
#include "nmt/model.hpp"
#include "toy.hpp"

namespace nmt {
namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Replaces the value of an existing flag or appends the pair.
void set_flag(std::vector<std::string>& args, const std::string& flag, const std::string& value) {
  auto it = std::find(args.begin(), args.end(), flag);
  if (it == args.end()) {
    args.insert(args.end(), {flag, value});
  } else {
    *(it + 1) = value;
  }
}

std::string join(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + s[i];
  return out;
}

// A copy-task corpus on disk plus one 200-iteration model, shared by the suite.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir();
    auto dump = [](const std::vector<SentencePair>& pairs, const std::string& stem) {
      std::vector<std::string> src, tgt;
      for (const auto& p : pairs) {
        src.push_back(join(testing::words(p.src)));
        tgt.push_back(join(testing::words(p.tgt)));
      }
      testing::write_lines(path(stem + ".src"), src);
      testing::write_lines(path(stem + ".tgt"), tgt);
    };
    dump(testing::copy_task(400, 1, 20, 6), "train");
    dump(testing::copy_task(50, 2, 20, 6), "dev");
    ASSERT_EQ(cli({"build-vocab", "--input", path("train.src"), "--output", path("vocab.src")}).code, 0);
    ASSERT_EQ(cli({"build-vocab", "--input", path("train.tgt"), "--output", path("vocab.tgt")}).code, 0);
    const CliRun r = cli(train_args(path("model.ckpt"), 7));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string path(const std::string& name) { return (*dir_ / name).string(); }

  static std::vector<std::string> train_args(const std::string& output, int seed) {
    return {"--seed",           std::to_string(seed),
            "train",            "--train-src",
            path("train.src"),  "--train-tgt",
            path("train.tgt"),  "--dev-src",
            path("dev.src"),    "--dev-tgt",
            path("dev.tgt"),    "--src-vocab",
            path("vocab.src"),  "--tgt-vocab",
            path("vocab.tgt"),  "--output",
            output,             "--max-iterations",
            "200",              "--validate-every",
            "100",              "--batch-size",
            "32",               "--embed-dim",
            "12",               "--hidden-dim",
            "16",               "--attention-dim",
            "16",               "--readout-dim",
            "16",               "--learning-rate",
            "0.003"};
  }

  static std::vector<std::string> translate_args(const std::string& ckpt, const std::string& input,
                                                 const std::string& output) {
    return {"translate", "--checkpoint", ckpt,   "--src-vocab", path("vocab.src"), "--tgt-vocab",
            path("vocab.tgt"), "--input", input, "--output",    output};
  }

  static testing::TempDir* dir_;
};

testing::TempDir* Pipeline::dir_ = nullptr;

TEST_F(Pipeline, SmokeTranslateThenEvaluate) {
  const CliRun t = cli(translate_args(path("model.ckpt"), path("dev.src"), path("dev.hyp")));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(testing::read_lines(path("dev.hyp")).size(), 50u);
  const CliRun e = cli({"evaluate", "--hyp", path("dev.hyp"), "--ref", path("dev.tgt")});
  ASSERT_EQ(e.code, 0) << e.err;
  const std::regex line(R"(BLEU = \d+\.\d{2} \(\d+\.\d{2}/\d+\.\d{2}/\d+\.\d{2}/\d+\.\d{2}, BP=\d\.\d{3}, ratio=\d+\.\d{3}\)\n)");
  EXPECT_TRUE(std::regex_match(e.out, line)) << e.out;
  EXPECT_FALSE(testing::read_lines(path("model.ckpt.log")).empty());
}

TEST_F(Pipeline, BeamOneMatchesGreedyReference) {
  const auto sents = testing::copy_task(50, 3, 20, 6);
  std::vector<std::string> lines;
  for (const auto& p : sents) lines.push_back(join(testing::words(p.src)));
  testing::write_lines(path("probe.src"), lines);
  auto args = translate_args(path("model.ckpt"), path("probe.src"), path("probe.beam1"));
  args.insert(args.end(), {"--beam", "1"});
  ASSERT_EQ(cli(args).code, 0);
  const auto got = testing::read_lines(path("probe.beam1"));
  ASSERT_EQ(got.size(), 50u);

  const RnnSearchModel model = load_checkpoint(path("model.ckpt"));
  const Vocabulary sv = Vocabulary::load(path("vocab.src"));
  const Vocabulary tv = Vocabulary::load(path("vocab.tgt"));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const IdSequence src = with_eos(sv.encode(tokenize(lines[i])));
    const Hypothesis g = greedy_decode(model, src, default_max_len(src.size()));
    EXPECT_EQ(got[i], join(tv.decode(g.output()))) << "line " << i;
  }
}

TEST_F(Pipeline, LineCountAndEmptyLinesPreserved) {
  testing::write_lines(path("gaps.src"), {"w4 w5", "", "w6", "   ", "w7 w8 w9", ""});
  ASSERT_EQ(cli(translate_args(path("model.ckpt"), path("gaps.src"), path("gaps.hyp"))).code, 0);
  const auto out = testing::read_lines(path("gaps.hyp"));
  ASSERT_EQ(out.size(), 6u);
  EXPECT_EQ(out[1], "");
  EXPECT_EQ(out[3], "");
  EXPECT_EQ(out[5], "");
}

TEST_F(Pipeline, ThreadedTranslationKeepsOrder) {
  auto one = translate_args(path("model.ckpt"), path("dev.src"), path("dev.t1"));
  auto many = translate_args(path("model.ckpt"), path("dev.src"), path("dev.t4"));
  many.insert(many.end(), {"--threads", "4"});
  ASSERT_EQ(cli(one).code, 0);
  ASSERT_EQ(cli(many).code, 0);
  EXPECT_EQ(read_file(path("dev.t1")), read_file(path("dev.t4")));
}

TEST_F(Pipeline, SameSeedIsBitwiseReproducible) {
  ASSERT_EQ(cli(train_args(path("again.ckpt"), 7)).code, 0);
  EXPECT_EQ(read_file(path("model.ckpt")), read_file(path("again.ckpt")));
  EXPECT_EQ(read_file(path("model.ckpt.meta")), read_file(path("again.ckpt.meta")));
  ASSERT_EQ(cli(translate_args(path("model.ckpt"), path("dev.src"), path("a.hyp"))).code, 0);
  ASSERT_EQ(cli(translate_args(path("again.ckpt"), path("dev.src"), path("b.hyp"))).code, 0);
  EXPECT_EQ(read_file(path("a.hyp")), read_file(path("b.hyp")));
  ASSERT_EQ(cli(train_args(path("other.ckpt"), 8)).code, 0);
  EXPECT_NE(read_file(path("model.ckpt")), read_file(path("other.ckpt")));
}

TEST_F(Pipeline, MrtWithoutInitialCheckpointIsAUsageError) {
  auto args = train_args(path("mrt.ckpt"), 7);
  args.insert(args.end(), {"--criterion", "mrt"});
  const CliRun r = cli(args);
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--init-checkpoint"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("MLE"), std::string::npos) << r.err;
}

TEST_F(Pipeline, MrtFineTuneFromCheckpoint) {
  auto args = train_args(path("mrt.ckpt"), 7);
  set_flag(args, "--criterion", "mrt");
  set_flag(args, "--init-checkpoint", path("model.ckpt"));
  set_flag(args, "--max-iterations", "3");
  set_flag(args, "--batch-size", "2");
  set_flag(args, "--mrt-sample-size", "4");
  const CliRun r = cli(args);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(path("mrt.ckpt")));
}

TEST_F(Pipeline, ExportRelevanceWritesValidDocument) {
  const CliRun r = cli({"export-relevance", "--checkpoint", path("model.ckpt"), "--src-vocab", path("vocab.src"),
                     "--tgt-vocab", path("vocab.tgt"), "--src", "w4 w5 w6", "--output", path("doc.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_file(path("doc.json")));
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["src"].size(), 3u);
  for (const auto& n : j["nodes"]) {
    double s = 0.0;
    for (double v : n["relevance"]["src"]) s += v;
    for (double v : n["relevance"]["tgt_prefix"]) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6) << n["id"];
  }
}

TEST_F(Pipeline, MissingCheckpointIsARuntimeFailure) {
  const CliRun r = cli(translate_args(path("absent.ckpt"), path("dev.src"), path("x.hyp")));
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  const CliRun missing = cli({"build-vocab", "--input", "x"});
  EXPECT_EQ(missing.code, kExitUsage);
  EXPECT_NE(missing.err.find("--output"), std::string::npos) << missing.err;
  const CliRun bad = cli({"build-vocab", "--input", "x", "--output", "y", "--cap", "0"});
  EXPECT_EQ(bad.code, kExitUsage);
  EXPECT_NE(bad.err.find("--cap"), std::string::npos);
  const CliRun cfg = cli({"train", "--train-src", "a", "--train-tgt", "b", "--src-vocab", "c", "--tgt-vocab", "d",
                       "--output", "e", "--optimizer", "rmsprop"});
  EXPECT_EQ(cfg.code, kExitUsage);
  EXPECT_NE(cfg.err.find("--optimizer"), std::string::npos) << cfg.err;
}

TEST(Cli, SeedIsRequired) {
  testing::TempDir dir;
  testing::write_lines(dir / "a", {"w4"});
  testing::write_lines(dir / "v", {"<pad>", "<s>", "</s>", "<unk>", "w4"});
  const CliRun r = cli({"train", "--train-src", (dir / "a").string(), "--train-tgt", (dir / "a").string(), "--src-vocab",
                     (dir / "v").string(), "--tgt-vocab", (dir / "v").string(), "--output", (dir / "m").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--seed"), std::string::npos) << r.err;
}

TEST(Cli, ConfigFileIsOverriddenByFlags) {
  testing::TempDir dir;
  testing::write_lines(dir / "cfg", {"seed = 3", "optimizer = sgd", "bogus = 1"});
  const CliRun r = cli({"--config", (dir / "cfg").string(), "train", "--train-src", "a", "--train-tgt", "b",
                     "--src-vocab", "c", "--tgt-vocab", "d", "--output", "e"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;
}

struct HelpCase {
  std::string command;
  std::vector<std::string> flags;
};

class CliHelp : public ::testing::TestWithParam<HelpCase> {};

TEST_P(CliHelp, ListsEveryFlag) {
  const HelpCase& c = GetParam();
  const CliRun r = cli({c.command, "--help"});
  EXPECT_EQ(r.code, kExitOk);
  for (const auto& f : c.flags) EXPECT_NE(r.out.find(f), std::string::npos) << c.command << " " << f;
}

INSTANTIATE_TEST_SUITE_P(
    Subcommands, CliHelp,
    ::testing::Values(
        HelpCase{"build-vocab", {"--input", "--output", "--cap"}},
        HelpCase{"build-dict", {"--src", "--tgt", "--output", "--iters", "--min-prob"}},
        HelpCase{"train",
                 {"--train-src", "--train-tgt", "--dev-src", "--dev-tgt", "--mono-src", "--mono-tgt", "--src-vocab",
                  "--tgt-vocab", "--output", "--reverse-output", "--init-checkpoint", "--init-reverse-checkpoint",
                  "--log", "--criterion", "--optimizer", "--learning-rate", "--batch-size", "--max-iterations",
                  "--validate-every", "--mrt-sample-size", "--mrt-alpha", "--sst-lambda", "--sst-sample-size",
                  "--clip-norm", "--embed-dim", "--hidden-dim", "--attention-dim", "--readout-dim", "--readout",
                  "--init-scale", "--max-length", "default: 80"}},
        HelpCase{"translate",
                 {"--checkpoint", "--src-vocab", "--tgt-vocab", "--input", "--output", "--beam", "--max-len",
                  "--length-norm", "--replace-unk", "--dict", "--threads", "10"}},
        HelpCase{"evaluate", {"--hyp", "--ref"}},
        HelpCase{"export-relevance",
                 {"--checkpoint", "--src-vocab", "--tgt-vocab", "--src", "--tgt", "--output", "--epsilon", "--nodes",
                  "--beam"}},
        HelpCase{"serve-inspector", {"--document", "--static-dir", "--host", "--port"}}),
    [](const ::testing::TestParamInfo<HelpCase>& info) {
      std::string name = info.param.command;
      std::replace(name.begin(), name.end(), '-', '_');
      return name;
    });

TEST(CliBinary, ExitCodesFromTheShell) {
  const std::string bin = NMT_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status(bin + " --help"), 0);
  EXPECT_EQ(status(bin + " translate --help"), 0);
  EXPECT_EQ(status(bin), 1);
  EXPECT_EQ(status(bin + " evaluate --hyp /nonexistent/h --ref /nonexistent/r"), 2);
}

}  // namespace
}  // namespace nmt
