#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

#include "cli.hpp"

using testing::fixture;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct Run {
  int code = 0;
  std::string out, err;

  [[nodiscard]] std::vector<Json> records() const {
    std::vector<Json> lines;
    std::istringstream in(out);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) lines.push_back(Json::parse(line));
    }
    return lines;
  }
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cnncert");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cnncert::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("cnncert-test-" + std::to_string(counter_++) + "-" +
                                                 std::to_string(reinterpret_cast<std::uintptr_t>(this)))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  [[nodiscard]] std::string file(const std::string& name, const std::string& text) const {
    const fs::path p = path_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  [[nodiscard]] std::string str() const { return path_.string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

const std::string kPairInputs =
    R"([{"shape": [1,1,2], "data": [1, 0], "label": 0}, {"shape": [1,1,2], "data": [0.2, 0.9]},
        {"shape": [1,1,2], "data": [3, -1]}])";

}  // namespace

TEST_CASE("certify reports the closed-form radius") {
  const Run r = cli({"certify", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--mode",
                     "targeted:1", "--norm", "inf"});
  REQUIRE(r.code == cnncert::cli::kExitOk);
  const auto lines = r.records();
  REQUIRE(lines.size() == 2);
  CHECK(lines[0]["radius"].get<double>() == doctest::Approx(0.5).epsilon(2e-3));
  CHECK(lines[0]["relax"] == "relu-adaptive");
  CHECK(lines[0]["target"] == 1);
  CHECK(lines[0]["correct"] == true);
  CHECK(lines[1]["aggregate"]["certified"] == 1);
}

TEST_CASE("certify exit codes") {
  CHECK(cli({"certify", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--norm", "7"}).code ==
        cnncert::cli::kExitUsage);
  CHECK(cli({"certify", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--mode", "sideways"})
            .code == cnncert::cli::kExitUsage);
  CHECK(cli({"certify", "--inputs", fixture("x.json")}).code == cnncert::cli::kExitUsage);
  CHECK(cli({}).code == cnncert::cli::kExitUsage);
  CHECK(cli({"--help"}).code == cnncert::cli::kExitOk);
  CHECK(cli({"certify", "--model", fixture("nope.json"), "--inputs", fixture("x.json")}).code ==
        cnncert::cli::kExitNoInput);
  TempDir dir;
  const std::string bad = dir.file("bad.json", "{\"input_shape\": [1,");
  CHECK(cli({"certify", "--model", bad, "--inputs", fixture("x.json")}).code == cnncert::cli::kExitNoInput);
  CHECK(cli({"certify", "--model", fixture("linear2.json"), "--inputs", bad}).code == cnncert::cli::kExitNoInput);

  const Run partial = cli({"certify", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--mode",
                           "targeted:5"});
  CHECK(partial.code == cnncert::cli::kExitPartialFailure);
  const auto lines = partial.records();
  REQUIRE(lines.size() == 2);
  CHECK(lines[0].contains("error"));
  CHECK(lines[1]["aggregate"]["failed"] == 1);
}

TEST_CASE("certify modes and parallel ordering") {
  TempDir dir;
  const std::string inputs = dir.file("in.json", kPairInputs);
  const Run un = cli({"certify", "--model", fixture("linear2.json"), "--inputs", inputs, "--jobs", "1"});
  const Run par = cli({"certify", "--model", fixture("linear2.json"), "--inputs", inputs, "--jobs", "3"});
  const Run runner = cli({"certify", "--model", fixture("linear2.json"), "--inputs", inputs, "--mode", "runner-up"});
  const Run least = cli({"certify", "--model", fixture("linear2.json"), "--inputs", inputs, "--mode", "least-likely"});
  REQUIRE(un.code == 0);
  REQUIRE(par.code == 0);
  const auto a = un.records(), b = par.records(), c = runner.records(), d = least.records();
  REQUIRE(a.size() == 4);
  REQUIRE(b.size() == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(b[i]["input"] == i);
    CHECK(a[i]["radius"] == b[i]["radius"]);
    // With two classes every mode picks the same opponent.
    CHECK(a[i]["radius"] == c[i]["radius"]);
    CHECK(a[i]["radius"] == d[i]["radius"]);
  }
  CHECK(a[1]["predicted"] == 1);
  CHECK_FALSE(a[0].contains("attack_upper_bound"));
  const Run attacked = cli({"certify", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"),
                            "--attack-budget", "200"});
  const auto e = attacked.records();
  CHECK(e[0]["attack_upper_bound"].get<double>() >= e[0]["radius"].get<double>());
}

TEST_CASE("attack subcommand") {
  const Run hit = cli({"attack", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--eps", "0.75"});
  REQUIRE(hit.code == 0);
  const auto h = hit.records();
  CHECK(h[0]["found"] == true);
  CHECK(h[0]["adversarial_class"] == 1);
  CHECK(h[0]["delta_norm"].get<double>() <= 0.75 + 1e-12);
  const Run miss = cli({"attack", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--eps", "0.25"});
  CHECK(miss.records()[0]["found"] == false);
  const Run again = cli({"attack", "--model", fixture("linear2.json"), "--inputs", fixture("x.json"), "--eps", "0.75"});
  CHECK(again.out == hit.out);
  CHECK(cli({"attack", "--model", fixture("linear2.json"), "--inputs", fixture("x.json")}).code ==
        cnncert::cli::kExitUsage);
}

TEST_CASE("selfcheck over fixture directories") {
  const Run good = cli({"selfcheck", "--fixtures", CNNCERT_FIXTURE_DIR, "--samples", "40"});
  CHECK(good.code == cnncert::cli::kExitOk);
  CHECK(good.out.find("FAIL") == std::string::npos);
  CHECK(good.out.find(" checks, 0 failures") != std::string::npos);

  const Run one = cli({"selfcheck", "--fixtures", CNNCERT_FIXTURE_DIR, "--samples", "10", "--layers", "1"});
  CHECK(one.code == cnncert::cli::kExitOk);
  CHECK(one.out.find("block 2") == std::string::npos);

  TempDir dir;
  (void)dir.file("broken.json", "not json at all");
  const Run broken = cli({"selfcheck", "--fixtures", dir.str()});
  CHECK(broken.code == cnncert::cli::kExitCheckFailed);
  CHECK(broken.out.find("FAIL broken.json") != std::string::npos);

  TempDir empty;
  CHECK(cli({"selfcheck", "--fixtures", empty.str()}).code == cnncert::cli::kExitCheckFailed);
  CHECK(cli({"selfcheck", "--fixtures", empty.str() + "/missing"}).code == cnncert::cli::kExitNoInput);
}
