#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prerec/cli.hpp"
#include "prerec/error.hpp"

using namespace prerec;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "prerec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> v;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

// Value column of the row matching scenario, metric, test type and model.
double lookup(const std::string& out, const std::string& prefix) {
  for (const std::string& l : lines(out))
    if (l.rfind(prefix, 0) == 0) return std::stod(l.substr(l.rfind(',') + 1));
  FAIL("no row " << prefix);
  return -1.0;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("prerec_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Tiny benchmark plus small-model overrides shared by the training commands.
std::string make_data(const TempDir& t) {
  const std::string data = (t.path / "data").string();
  const Result r = run_cli({"synthgen", "--out", data, "--domains", "3", "--items", "30", "--users", "60",
                            "--domain-bias", "1", "--popularity", "1", "--seed", "5"});
  REQUIRE(r.code == 0);
  return data + "/experiment.json";
}

std::vector<std::string> small(std::vector<std::string> args, const std::string& config) {
  for (const char* a : {"--dim", "8", "--negatives", "7", "--epochs", "2", "--k-pct", "5", "--batch-size", "64"})
    args.push_back(a);
  args.push_back("-c");
  args.push_back(config);
  return args;
}

}  // namespace

TEST_CASE("experiment config round trip and path resolution") {
  nlohmann::json j = {{"data", {{"interactions", "a/log.csv"}, {"catalog", "/abs/cat.jsonl"}, {"embeddings", "e.json"}}},
                      {"target", "t"},
                      {"sources", {"s1", "s2"}},
                      {"interval_days", 7.5},
                      {"seed", 9},
                      {"metric", {{"a", 2.0}, {"b", 100.0}, {"k_pct", 1.0}}}};
  const cli::ExperimentConfig c = cli::experiment_from_json(j, "/base");
  CHECK(c.interactions == fs::path("/base/a/log.csv"));
  CHECK(c.catalog == fs::path("/abs/cat.jsonl"));
  CHECK(c.interval_seconds() == 648000);
  CHECK(c.metric.b == 100.0);
  const cli::ExperimentConfig again = cli::experiment_from_json(cli::to_json(c));
  CHECK(cli::to_json(again) == cli::to_json(c));
  CHECK(cli::fingerprint(again) == cli::fingerprint(c));
  cli::ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  CHECK(cli::fingerprint(moved) == cli::fingerprint(c));
  moved.seed = 10;
  CHECK(cli::fingerprint(moved) != cli::fingerprint(c));

  cli::ExperimentConfig bad = c;
  bad.sources.push_back("t");
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(cli::experiment_from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("exit codes") {
  CHECK(run_cli({"--help"}).code == 0);
  CHECK(run_cli({"pretrain", "--help"}).code == 0);
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"pretrain", "--no-such-flag"}).code == 2);
  CHECK(run_cli({"report"}).code == 2);
  CHECK(run_cli({"zeroshot", "-c", "/nonexistent/config.json"}).code == 2);
}

TEST_CASE("missing embedding manifest names the path") {
  TempDir t("manifest");
  const std::string cfg = make_data(t);
  const std::string missing = (t.path / "gone.json").string();
  const Result r = run_cli({"zeroshot", "-c", cfg, "--embeddings", missing, "--baseline", "random"});
  CHECK(r.code == 3);
  CHECK(r.err.find(missing) != std::string::npos);
}

TEST_CASE("unseen test without source logs is refused") {
  TempDir t("unseen");
  const std::string cfg = make_data(t);
  // Keep only target-domain rows.
  const fs::path csv = t.path / "data" / "interactions.csv";
  std::ifstream in(csv);
  std::ostringstream kept;
  std::string l;
  std::getline(in, l);
  kept << l << '\n';
  while (std::getline(in, l))
    if (l.find(",d2,") != std::string::npos) kept << l << '\n';
  in.close();
  std::ofstream(csv) << kept.str();
  CHECK(run_cli({"zeroshot", "-c", cfg, "--baseline", "random", "--k-pct", "5"}).code == 3);

  std::ifstream cin(cfg);
  nlohmann::json j = nlohmann::json::parse(cin);
  cin.close();
  j.erase("sources");
  std::ofstream(cfg) << j.dump();
  const Result r = run_cli({"zeroshot", "-c", cfg, "--baseline", "random", "--k-pct", "5"});
  CHECK(r.code == 2);
  CHECK(r.err.find("source") != std::string::npos);
}

TEST_CASE("oracle baseline scores one") {
  TempDir t("oracle");
  const std::string cfg = make_data(t);
  const Result r = run_cli({"zeroshot", "-c", cfg, "--baseline", "oracle", "--k-pct", "5"});
  REQUIRE(r.code == 0);
  CHECK(lookup(r.out, "zero-shot,d2,recall,all,oracle,") == 1.0);
  CHECK(lookup(r.out, "zero-shot,d2,r_ndcg,unseen,oracle,") == 1.0);
}

TEST_CASE("pretrain, zero-shot, fine-tune and incremental pipeline") {
  TempDir t("pipeline");
  const std::string cfg = make_data(t);

  const Result pre = run_cli(small({"pretrain"}, cfg));
  REQUIRE(pre.code == 0);
  const std::string ckpt = lines(pre.out).back();
  const fs::path run = fs::path(ckpt).parent_path();
  CHECK(fs::exists(run / "config.json"));
  CHECK(fs::exists(run / "train_log.jsonl"));
  for (const std::string& l : lines([&] {
         std::ifstream in(run / "train_log.jsonl");
         return std::string(std::istreambuf_iterator<char>(in), {});
       }())) {
    const auto j = nlohmann::json::parse(l);
    CHECK(j.contains("fingerprint"));
    CHECK(j.contains("val_r_ndcg"));
  }

  const std::string req = (t.path / "req.jsonl").string();
  std::ofstream(req) << R"({"user_id":"x","history":["d2-i000001","d2-i000003"],"timestamp":100})" << '\n';
  const Result zs = run_cli(small({"zeroshot", "--checkpoint", "prerec=" + ckpt, "--baseline", "random",
                                   "--requests", req},
                                  cfg));
  REQUIRE(zs.code == 0);
  const double zero = lookup(zs.out, "zero-shot,d2,r_ndcg,all,prerec,");
  CHECK(zero > lookup(zs.out, "zero-shot,d2,r_ndcg,all,random,"));
  const fs::path zs_report = lines(zs.out).back();
  CHECK(fs::exists(zs_report));
  CHECK(fs::exists(zs_report.parent_path() / "report.json"));
  {
    std::ifstream in(zs_report.parent_path() / "rankings.jsonl");
    std::string l;
    REQUIRE(std::getline(in, l));
    const auto j = nlohmann::json::parse(l);
    CHECK(j["user_id"] == "x");
    CHECK(j["ranked"].size() == 2);  // ceil(30 * 5%)
    CHECK(j["scores"][0].get<double>() >= j["scores"][1].get<double>());
  }

  const Result ft = run_cli(small({"finetune", "--checkpoint", ckpt}, cfg));
  REQUIRE(ft.code == 0);
  CHECK(lookup(ft.out, "fine-tune,d2,r_ndcg,all,prerec,") >= 0.0);

  const Result inc = run_cli(small({"incremental", "--checkpoint", ckpt, "--sizes", "0,20"}, cfg));
  REQUIRE(inc.code == 0);
  CHECK(lookup(inc.out, "incremental:0,d2,r_ndcg,all,prerec,") == doctest::Approx(zero).epsilon(1e-12));
  CHECK(run_cli(small({"incremental", "--checkpoint", ckpt, "--sizes", "20,0"}, cfg)).code == 2);

  SUBCASE("same seed, same result") {
    const Result again = run_cli(small({"pretrain"}, cfg));
    REQUIRE(again.code == 0);
    auto last_metric = [](const fs::path& ckpt_path) {
      std::ifstream in(ckpt_path.parent_path() / "train_log.jsonl");
      std::string l, last;
      while (std::getline(in, l)) last = l;
      return nlohmann::json::parse(last)["val_r_ndcg"].get<double>();
    };
    CHECK(last_metric(lines(again.out).back()) == last_metric(ckpt));
  }

  SUBCASE("report merge") {
    const fs::path merged = t.path / "merged.csv";
    const fs::path ft_report = fs::path(lines(ft.out).front()).parent_path() / "report.json";
    const Result m = run_cli({"report", zs_report.string(), ft_report.string(), "--out", merged.string()});
    REQUIRE(m.code == 0);
    CHECK(fs::exists(merged));
    const auto rows = lines(m.out);
    REQUIRE(rows.size() > 3);
    CHECK(rows[1] == "scenario,dataset,metric,test_type,model,value");
    std::vector<std::string> models;
    for (std::size_t i = 2; i < rows.size(); ++i) {
      std::vector<std::string> f;
      std::istringstream in(rows[i]);
      for (std::string c; std::getline(in, c, ',');) f.push_back(c);
      models.push_back(f[1] + "/" + f[4]);
    }
    CHECK(std::is_sorted(models.begin(), models.end()));

    // A report scored with another metric configuration is refused.
    const Result other = run_cli({"zeroshot", "-c", cfg, "--baseline", "random", "--k-pct", "10"});
    REQUIRE(other.code == 0);
    const Result mismatch = run_cli({"report", zs_report.string(), lines(other.out).back()});
    CHECK(mismatch.code == 2);
  }
}
