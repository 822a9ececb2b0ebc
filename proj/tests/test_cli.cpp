#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "xmf/geometry.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "xmf_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(XMF_BINARY) + " " + args + " > " + (work() / "stdout.txt").string() + " 2> " +
                          (work() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string w(const std::string& rel) { return (work() / rel).string(); }

void ensure_data() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("gen-data --out " + w("data") + " --shapes 16 --views 8 --seed 3") == 0);
  done = true;
}

}  // namespace

TEST_CASE("gen-data writes a manifest row per shape and is reproducible") {
  ensure_data();
  CHECK(lines(work() / "data" / "manifest.csv") == 17);
  REQUIRE(run("gen-data --out " + w("data_again") + " --shapes 16 --views 8 --seed 3") == 0);
  for (const auto& f : fs::recursive_directory_iterator(work() / "data")) {
    if (!f.is_regular_file()) continue;
    CHECK(slurp(f.path()) == slurp(work() / "data_again" / fs::relative(f.path(), work() / "data")));
  }
  REQUIRE(run("gen-data --out " + w("data24") + " --shapes 1 --views 24") == 0);
  const std::string row = slurp(work() / "data24" / "manifest.csv");
  CHECK(row.find(",24\n") != std::string::npos);
  CHECK(fs::exists(work() / "data24" / "sphere_0000" / "partial_23.pcf"));
}

TEST_CASE("weak training never opens complete clouds") {
  ensure_data();
  REQUIRE(run("train --mode weak --data " + w("data") + " --out " + w("weak") + " --steps 4 --batch 4 --views 2") ==
          0);
  std::istringstream log(slurp(work() / "weak" / "access_log.csv"));
  std::string line;
  std::getline(log, line);
  int train_reads = 0;
  while (std::getline(log, line)) {
    if (line.rfind("train,", 0) == 0) {
      ++train_reads;
      CHECK(line.find("complete.pcf") == std::string::npos);
      CHECK(line.rfind("train,0,", 0) == 0);
    }
  }
  CHECK(train_reads > 0);
  const auto cfg = nlohmann::json::parse(slurp(work() / "weak" / "config.json"));
  CHECK(cfg["train"]["mode"] == "weak");
  CHECK(lines(work() / "weak" / "train_log.csv") == 5);
  CHECK(fs::exists(work() / "weak" / "best.ckpt"));
}

TEST_CASE("unimodal mode switches the model") {
  ensure_data();
  REQUIRE(run("train --mode unimodal --data " + w("data") + " --out " + w("uni") + " --steps 2 --batch 4 --views 1") ==
          0);
  const auto cfg = nlohmann::json::parse(slurp(work() / "uni" / "config.json"));
  CHECK(cfg["model"]["unimodal"] == true);
  // A unimodal checkpoint does not fit the multimodal model.
  CHECK(run("eval --data " + w("data") + " --checkpoint " + w("uni/best.ckpt") + " --mode supervised --out " +
            w("uni_eval") + " --config " + w("weak/config.json")) == 3);
  CHECK(slurp(work() / "stderr.txt").find("XMF1") != std::string::npos);
}

TEST_CASE("supervised train, eval, complete and render") {
  ensure_data();
  REQUIRE(run("train --mode supervised --data " + w("data") + " --out " + w("sup") +
              " --steps 3 --batch 4 --views 2 --seed 9") == 0);
  REQUIRE(run("train --mode supervised --data " + w("data") + " --out " + w("sup2") +
              " --steps 3 --batch 4 --views 2 --seed 9") == 0);
  CHECK(slurp(work() / "sup" / "train_log.csv") == slurp(work() / "sup2" / "train_log.csv"));
  CHECK(slurp(work() / "sup" / "best.ckpt") == slurp(work() / "sup2" / "best.ckpt"));

  REQUIRE(run("eval --data " + w("data") + " --checkpoint " + w("sup/best.ckpt") + " --out " + w("eval")) == 0);
  CHECK(lines(work() / "eval" / "per_view.csv") == 9);
  const auto summary = nlohmann::json::parse(slurp(work() / "eval" / "summary.json"));
  const double mean = summary["mean_cd_e3"], best = summary["best_view_cd_e3"], worst = summary["worst_view_cd_e3"];
  CHECK(best <= mean + 1e-9);
  CHECK(mean <= worst + 1e-9);
  CHECK(fs::exists(work() / "eval" / "config.json"));

  const std::string sample = "box_0001";
  const std::string args = "complete --data " + w("data") + " --sample " + sample + " --view 3 --checkpoint " +
                           w("sup/best.ckpt") + " --render " + w("data/" + sample + "/cam_3.json") + " --out ";
  REQUIRE(run(args + w("c1.pcf")) == 0);
  REQUIRE(run(args + w("c2.pcf")) == 0);
  CHECK(xmf::read_pcf(work() / "c1.pcf").rows() == 512);
  CHECK(slurp(work() / "c1.pcf") == slurp(work() / "c2.pcf"));
  CHECK(slurp(work() / "c1.pgm").rfind("P5\n64 64\n255\n", 0) == 0);
  CHECK(slurp(work() / "c1.pgm").size() == std::string("P5\n64 64\n255\n").size() + 64 * 64);
  CHECK(fs::exists(work() / "c1.config.json"));

  REQUIRE(run("render --input " + w("data/" + sample + "/complete.pcf") + " --camera " +
              w("data/" + sample + "/cam_0.json") + " --out " + w("r.pgm")) == 0);
  CHECK(slurp(work() / "r.pgm").rfind("P5\n", 0) == 0);
}

TEST_CASE("exit codes") {
  ensure_data();
  CHECK(run("train --mode fancy --data " + w("data") + " --out " + w("x")) == 2);
  CHECK(run("") == 2);
  CHECK(run("train --data " + w("missing") + " --out " + w("x")) == 3);
  std::ofstream(work() / "bad.json") << "{\n  \"train\": {\n    \"batch\": 4,\n  }\n}\n";
  CHECK(run("train --data " + w("data") + " --out " + w("x") + " --config " + w("bad.json")) == 2);
  CHECK(slurp(work() / "stderr.txt").find("line 4") != std::string::npos);
  std::ofstream(work() / "unknown.json") << "{\"train\": {\"batchsize\": 4}}";
  CHECK(run("train --data " + w("data") + " --out " + w("x") + " --config " + w("unknown.json")) == 2);
  CHECK(run("train --data " + w("data") + " --out " + w("x") + " --steps 2 --lr 1e300") == 4);
  CHECK(run("complete --data " + w("data") + " --sample nobody --checkpoint " + w("sup/best.ckpt") + " --out " +
            w("n.pcf")) == 3);
}
