// End-to-end CLI tests: run the installed binary against the documented
// examples and compare with the golden files in docs/golden/.  Timing fields
// are nondeterministic, so JSONL comparisons normalize runtime_ns to 0; all
// other bytes must match exactly.

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace {

using nlohmann::ordered_json;

std::string env_or_fail(const char* name) {
  const char* v = std::getenv(name);
  REQUIRE_MESSAGE(v != nullptr, "missing environment variable ", std::string(name));
  return v;
}

int run(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "cannot open ", path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

std::string normalize_report_line(const std::string& line) {
  ordered_json j = ordered_json::parse(line);
  if (j.contains("runtime_ns")) {
    CHECK(j["runtime_ns"].get<long long>() >= 0);
    j["runtime_ns"] = 0;
  }
  return j.dump();
}

struct Paths {
  std::string bin = env_or_fail("POLYCERT_BIN");
  std::string golden = env_or_fail("POLYCERT_SRC_DIR") + "/docs/golden";
};

const char* kGenArch = "input 4x4x1; conv 3x3x2 s1 p1; relu; dense 3";

}  // namespace

TEST_CASE("cli gen reproduces the golden model byte for byte") {
  Paths p;
  REQUIRE(run("'" + p.bin + "' gen --seed 202608 --arch '" + kGenArch +
              "' --out fmt_model.json --inputs-out fmt_inputs.csv --inputs 3") == 0);
  CHECK(slurp("fmt_model.json") == slurp(p.golden + "/model.json"));
  CHECK(slurp("fmt_inputs.csv") == slurp(p.golden + "/inputs.csv"));
}

TEST_CASE("cli verify matches the golden report modulo timing") {
  Paths p;
  REQUIRE(run("'" + p.bin + "' verify --model '" + p.golden +
              "/model.json' --inputs '" + p.golden +
              "/inputs.csv' --epsilon 0.03 --mode widened --out fmt_report.jsonl") == 0);
  const auto got = lines_of(slurp("fmt_report.jsonl"));
  const auto want = lines_of(slurp(p.golden + "/report.jsonl"));
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i)
    CHECK(normalize_report_line(got[i]) == normalize_report_line(want[i]));
}

TEST_CASE("cli verify rational mode emits exact identity margins") {
  Paths p;
  REQUIRE(run("'" + p.bin + "' verify --model '" + p.golden +
              "/identity_model.json' --inputs '" + p.golden +
              "/identity_inputs.csv' --epsilon 0.1 --mode rational "
              "--out fmt_id_small.jsonl") == 0);
  auto small = lines_of(slurp("fmt_id_small.jsonl"));
  REQUIRE(small.size() == 1);
  ordered_json j = ordered_json::parse(small[0]);
  CHECK(j["index"] == 0);
  CHECK(j["candidate"] == 0);
  CHECK(j["verdict"] == "verified");
  REQUIRE(j["margins"].size() == 1);
  CHECK(j["margins"][0]["class"] == 1);
  CHECK(j["margins"][0]["lower"].get<double>() == 0.4);

  REQUIRE(run("'" + p.bin + "' verify --model '" + p.golden +
              "/identity_model.json' --inputs '" + p.golden +
              "/identity_inputs.csv' --epsilon 0.4 --mode rational "
              "--out fmt_id_large.jsonl") == 0);
  auto large = lines_of(slurp("fmt_id_large.jsonl"));
  REQUIRE(large.size() == 1);
  ordered_json k = ordered_json::parse(large[0]);
  CHECK(k["verdict"] == "unknown");
  CHECK(k["margins"][0]["lower"].get<double>() == -0.2);
}

TEST_CASE("cli verify field order is the documented one") {
  Paths p;
  const auto want = lines_of(slurp(p.golden + "/report.jsonl"));
  REQUIRE(!want.empty());
  ordered_json j = ordered_json::parse(want[0]);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"index", "candidate", "verdict", "margins",
                                         "runtime_ns", "rows_terminated"});
}

TEST_CASE("cli bench emits the documented CSV header and well-formed rows") {
  Paths p;
  REQUIRE(run("'" + p.bin + "' bench --model '" + p.golden + "/model.json' --inputs '" +
              p.golden + "/inputs.csv' --epsilon 0.03 --mode widened "
              "--out fmt_bench.csv") == 0);
  const auto got = lines_of(slurp("fmt_bench.csv"));
  REQUIRE(got.size() == 4);  // header + 3 inputs
  CHECK(got[0] == "index,runtime_ns,early_term_fraction");
  CHECK(got[0] == lines_of(slurp(p.golden + "/bench.csv"))[0]);
  for (size_t i = 1; i < got.size(); ++i) {
    long long idx, ns;
    double frac;
    REQUIRE(std::sscanf(got[i].c_str(), "%lld,%lld,%lf", &idx, &ns, &frac) == 3);
    CHECK(idx == static_cast<long long>(i - 1));
    CHECK(ns >= 0);
    CHECK(frac >= 0.0);
    CHECK(frac <= 1.0);
  }
}

TEST_CASE("cli oracle-check accepts the identity example") {
  Paths p;
  REQUIRE(run("'" + p.bin + "' oracle-check --model '" + p.golden +
              "/identity_model.json' --inputs '" + p.golden +
              "/identity_inputs.csv' --epsilon 0.1 --out fmt_oracle.txt") == 0);
  const auto got = lines_of(slurp("fmt_oracle.txt"));
  REQUIRE(got.size() == 1);
  CHECK(got[0] == "input 0: match");
}

TEST_CASE("cli rejects missing required flags") {
  Paths p;
  CHECK(run("'" + p.bin + "' verify --inputs x.csv --epsilon 0.1 >/dev/null 2>&1") != 0);
  CHECK(run("'" + p.bin + "' nonsense >/dev/null 2>&1") != 0);
  CHECK(run("'" + p.bin +
            "' verify --model no_such.json --inputs no.csv --epsilon 0.1 "
            ">/dev/null 2>&1") != 0);
}
