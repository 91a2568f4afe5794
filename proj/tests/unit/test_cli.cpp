#include <doctest.h>

#include <sstream>

#include "diffvar/cli.hpp"
#include "diffvar/errors.hpp"

using namespace diffvar;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "diffvar");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config parsing") {
  cli::Config c;
  std::istringstream in("# comment\n\n n_steps = 16  # trailing\nfunctional=terminal_linear\nlambda = 2.5e0\n");
  c.load(in);
  CHECK(c.count("n_steps") == 16);
  CHECK(c.str("functional") == "terminal_linear");
  CHECK(c.real("lambda") == 2.5);

  std::istringstream unknown("n_step = 16\n");
  CHECK_THROWS_WITH_AS(c.load(unknown), doctest::Contains("unknown configuration key 'n_step'"), InvalidInput);
  std::istringstream malformed("n_steps = 1.5\n");
  CHECK_THROWS_AS(c.load(malformed), InvalidInput);
  std::istringstream noeq("n_steps 16\n");
  CHECK_THROWS_AS(c.load(noeq), InvalidInput);
  CHECK_THROWS_AS(c.apply_override("seed=abc"), InvalidInput);
  CHECK_THROWS_AS(c.apply_override("attainment=maybe"), InvalidInput);
}

TEST_CASE("config hash is canonical") {
  cli::Config a, b;
  a.apply_override("lambda=2");
  b.apply_override("lambda = 2.000");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.apply_override("seed=2");
  CHECK(a.hash() != b.hash());
}

TEST_CASE("schedule parsing") {
  auto s = cli::parse_schedule("2:0.5:2:6; 8:0.125:8:1");
  REQUIRE(s.size() == 2);
  CHECK(s[1].n0 == 8.0);
  CHECK(s[1].a == 0.125);
  CHECK(s[1].eta == 1);
  CHECK_THROWS_AS(cli::parse_schedule("2:0.5:2:0"), InvalidInput);
  CHECK_THROWS_AS(cli::parse_schedule("2:0.5:2"), InvalidInput);
  CHECK_THROWS_AS(cli::parse_schedule(""), InvalidInput);
}

TEST_CASE("estimate command") {
  auto r = run({"estimate", "functional=constant", "constant=1.5", "n_steps=8", "n_paths=100"});
  REQUIRE(r.code == 0);
  auto rows = lines(r.out);
  CHECK(rows[0] == "command,config_hash,seed,n_steps,n_paths,quantity,value,std_error,status");
  CHECK(rows[1].find(",8,100,free_energy,1.5,0,ok") != std::string::npos);

  auto bad = run({"estimate", "bogus=1"});
  CHECK(bad.code == 2);
  CHECK(bad.out.empty());
  CHECK(run({"estimate", "--config", "/nonexistent/file.cfg"}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({}).code == 2);
}

TEST_CASE("oracle command") {
  auto r = run({"oracle", "functional=terminal_linear", "n_steps=1"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("free_energy,-0.43378083048302") != std::string::npos);
  CHECK(run({"oracle", "n_steps=12", "tree_dim=2"}).code == 2);
  CHECK(run({"oracle", "coefficients=degenerate", "n_steps=4"}).code == 2);  // tree_dim must match d = 2
}

TEST_CASE("verify and approx-density commands") {
  auto ok = run({"verify", "n_steps=8", "n_paths=2000"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  auto broken = run({"verify", "n_steps=8", "n_paths=2000", "inject_sign_error=true"});
  CHECK(broken.code == 3);
  CHECK(broken.out.find("FAIL") != std::string::npos);

  auto flat = run({"approx-density", "density=one", "n_steps=6", "schedule=2:0.5:2:1"});
  REQUIRE(flat.code == 0);
  for (const auto& row : lines(flat.out))
    if (row.find("l1_") != std::string::npos) CHECK(row.find(",0,0,exact") != std::string::npos);
  CHECK(run({"approx-density", "schedule=2:0.5:2:0"}).code == 2);
  CHECK(run({"approx-density", "n_steps=4", "schedule=2:0.5:2:5"}).code == 2);
}

TEST_CASE("reruns are identical") {
  const std::vector<std::string> args{"optimize", "functional=terminal_linear", "family=constant", "n_steps=8",
                                      "max_iter=5", "paths_per_iter=200", "final_paths=500"};
  auto a = run(args), b = run(args);
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
}
