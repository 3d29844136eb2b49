#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <string>

#include "doctest.h"
#include "mplug/container.hpp"
#include "mplug/vocab.hpp"
#include "support.hpp"

using namespace mplug;
using namespace mplug::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + MPLUG_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return {WEXITSTATUS(status), read_file_bytes(out), read_file_bytes(err)};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const std::regex kErrorLine(R"(error kind=[a-z_]+ message="[^"\n]*"\n)");

const char* kTinyConfig = R"({
  "task": {"neutral_tokens": 10, "style_tokens": 4, "min_len": 2, "max_len": 4, "general_train": 80,
           "custom_train": 30, "custom_valid": 8, "custom_test": 6},
  "model": {"d": 8, "layers": 2, "heads": 2, "ffn": 16},
  "base_train": {"steps": 30, "batch_tokens": 64, "warmup": 5, "max_lr": 0.01},
  "adapter_train": {"steps": 10, "batch_tokens": 64, "warmup": 2, "max_lr": 0.01},
  "memory": {"sentences": 10, "beam": 2},
  "beam": 2
})";

}  // namespace

TEST_CASE("usage and config errors are one machine-parsable line") {
  const auto dir = scratch_dir("cli-errors");
  const Run none = cli("", dir);
  CHECK(none.code == 2);
  CHECK(std::regex_match(none.err, kErrorLine));
  CHECK(none.err.rfind("error kind=usage ", 0) == 0);

  const Run unknown = cli("frobnicate", dir);
  CHECK(unknown.code == 2);
  CHECK(std::regex_match(unknown.err, kErrorLine));

  write(dir / "bad.json", "{\"beam\": ");
  const Run bad = cli("--config \"" + (dir / "bad.json").string() + "\" gen-data --out \"" + dir.string() + "\"", dir);
  CHECK(bad.code == 2);
  CHECK(bad.err.rfind("error kind=config ", 0) == 0);
  CHECK(std::regex_match(bad.err, kErrorLine));

  write(dir / "extra.json", "{\"colour\": 1}");
  const Run extra = cli("--config \"" + (dir / "extra.json").string() + "\" gen-data --out \"" + dir.string() + "\"", dir);
  CHECK(extra.code == 2);
  CHECK(extra.err.find("colour") != std::string::npos);

  const Run missing = cli("translate --model \"" + (dir / "nope.mplg").string() +
                              "\" --input x --src-vocab y --tgt-vocab z --out \"" + dir.string() + "\"",
                          dir);
  CHECK(missing.code == 3);
  CHECK(missing.err.rfind("error kind=missing_artifact ", 0) == 0);
  CHECK(missing.err.find("nope.mplg") != std::string::npos);
  CHECK(std::regex_match(missing.err, kErrorLine));
}

TEST_CASE("evaluate scores files") {
  const auto dir = scratch_dir("cli-eval");
  write(dir / "hyp.txt", "a b c d\n");
  write(dir / "ref.txt", "a b c d\n");
  write(dir / "lex.tsv", "a\tA\n");
  const Run r = cli("evaluate --hyp \"" + (dir / "hyp.txt").string() + "\" --ref \"" + (dir / "ref.txt").string() +
                        "\" --lexicon \"" + (dir / "lex.tsv").string() + "\" --out \"" + dir.string() + "\"",
                    dir);
  CHECK(r.code == 0);
  CHECK(r.out.rfind("bleu,style_acc\n100", 0) == 0);
  CHECK(read_file_bytes(dir / "evaluation.csv") == r.out);
}

TEST_CASE("subcommands run the pipeline end to end") {
  const auto dir = scratch_dir("cli-pipeline");
  const std::string d = dir.string();
  write(dir / "cfg.json", kTinyConfig);
  const std::string cfg = "--config \"" + (dir / "cfg.json").string() + "\" ";
  auto at = [&](const std::string& f) { return "\"" + (dir / f).string() + "\""; };
  const std::string vocabs = " --src-vocab " + at("src.vocab") + " --tgt-vocab " + at("tgt.vocab");

  REQUIRE(cli(cfg + "gen-data --out \"" + d + "\"", dir).code == 0);
  CHECK(fs::exists(dir / "custom.train.parse"));
  REQUIRE(cli(cfg + "train-base --data " + at("general.train.tsv") + vocabs + " --out \"" + d + "\"", dir).code == 0);
  REQUIRE(cli(cfg + "train-base --reverse --data " + at("general.train.tsv") + vocabs + " --out \"" + d + "\"", dir)
              .code == 0);
  CHECK(fs::exists(dir / "base.mplg"));
  CHECK(fs::exists(dir / "reverse.mplg"));
  const std::string base_bytes = read_file_bytes(dir / "base.mplg");

  const Run mem = cli(cfg + "build-memory --model " + at("base.mplg") + " --reverse " + at("reverse.mplg") +
                          " --parses " + at("custom.train.parse") + " --tgt-vocab " + at("tgt.vocab") + " --out \"" +
                          d + "\"",
                      dir);
  REQUIRE(mem.code == 0);
  CHECK(mem.out.rfind("items=", 0) == 0);

  REQUIRE(cli(cfg + "--seed 3 train-adapter --model " + at("base.mplg") + " --bank " + at("memory.mbnk") +
                  " --data " + at("custom.train.tsv") + " --valid " + at("custom.valid.tsv") + vocabs + " --out \"" +
                  d + "\"",
              dir)
              .code == 0);
  CHECK(read_file_bytes(dir / "adapter.log.csv").rfind("step,loss,nll_full,nll_drop,dist,lr\n", 0) == 0);
  CHECK(read_file_bytes(dir / "base.mplg") == base_bytes);

  const Run ds = cli(cfg + "build-datastore --model " + at("base.mplg") + " --adapter " + at("adapter.madp") +
                         " --bank " + at("memory.mbnk") + " --data " + at("custom.train.tsv") + vocabs + " --out \"" +
                         d + "\"",
                     dir);
  REQUIRE(ds.code == 0);
  CHECK(ds.out.rfind("entries=", 0) == 0);

  std::string sources;
  for (const auto& line : read_lines(dir / "custom.test.tsv")) sources += line.substr(0, line.find('\t')) + "\n";
  write(dir / "input.txt", sources);
  const std::string tr = cfg + "translate --model " + at("base.mplg") + " --adapter " + at("adapter.madp") +
                         " --bank " + at("memory.mbnk") + " --input " + at("input.txt") + vocabs;
  REQUIRE(cli(tr + " --out \"" + d + "\"", dir).code == 0);
  const std::string plain = read_file_bytes(dir / "translations.txt");
  CHECK(read_lines(dir / "translations.txt").size() == 6);
  REQUIRE(cli(tr + " --datastore " + at("datastore.mknn") + " --lambda 0 --out \"" + d + "\"", dir).code == 0);
  CHECK(read_file_bytes(dir / "translations.txt") == plain);

  // A corrupted checkpoint is a format error.
  std::string broken = base_bytes;
  broken.resize(broken.size() / 2);
  write_file_bytes(dir / "broken.mplg", broken);
  const Run fmt = cli(cfg + "translate --model " + at("broken.mplg") + " --input " + at("input.txt") + vocabs +
                          " --out \"" + d + "\"",
                      dir);
  CHECK(fmt.code == 4);
  CHECK(fmt.err.rfind("error kind=format ", 0) == 0);
  CHECK(std::regex_match(fmt.err, kErrorLine));

  // Vocabularies from the wrong side are a dimension error.
  const Run dim = cli(cfg + "translate --model " + at("base.mplg") + " --input " + at("input.txt") +
                          " --src-vocab " + at("tgt.vocab") + " --tgt-vocab " + at("src.vocab") + " --out \"" + d +
                          "\"",
                      dir);
  CHECK(dim.code == 6);
  CHECK(dim.err.rfind("error kind=dimension ", 0) == 0);
  CHECK(std::regex_match(dim.err, kErrorLine));
}
