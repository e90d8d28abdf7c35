#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "osm/cli/app.hpp"
#include "osm/cli/config_file.hpp"
#include "osm/costs/costs.hpp"
#include "osm/train/checkpoint.hpp"

using namespace osm;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([model]
num_blocks = 2
d_model = 16
conv_kernel = 3
max_frames = 64

[task]
train_size = 40
dev_size = 10

[train]
total_steps = 10
batch_size = 2

[subnets]
subnet = flops 0.4
subnet = flops 0.7

[mask_learner]
mask_learner = orthosoftmax
)";

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "osm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

class CliRun : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "osm_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    write(root / "tiny.ini", kTinyConfig);
    const auto r = run({"train", "--config", (root / "tiny.ini").string(), "--out", (root / "run").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static fs::path ckpt() { return root / "run" / "checkpoint.orsm"; }
};

fs::path CliRun::root;

}  // namespace

TEST(Cli, MissingSectionIsAConfigError) {
  const auto dir = fs::temp_directory_path() / "osm_cli_bad";
  fs::create_directories(dir);
  std::string text = kTinyConfig;
  text = text.substr(0, text.find("[subnets]"));
  write(dir / "bad.ini", text);
  const auto r = run({"train", "--config", (dir / "bad.ini").string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("subnets"), std::string::npos) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, UnknownCommandAndMissingCheckpoint) {
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(run({"verify", "--checkpoint", "/nonexistent/ckpt.orsm"}).code, cli::kExitRuntime);
}

TEST_F(CliRun, ArtifactsPresent) {
  for (const char* name : {"metrics.csv", "masks.json", "checkpoint.orsm", "corpus.bin"}) {
    EXPECT_TRUE(fs::exists(root / "run" / name)) << name;
  }
  const auto masks = nlohmann::json::parse(slurp(root / "run" / "masks.json"));
  ASSERT_EQ(masks.at("subnets").size(), 2u);
  for (const auto& s : masks.at("subnets")) EXPECT_TRUE(s.at("rounded").get<bool>());
}

TEST_F(CliRun, RerunGivesIdenticalMasks) {
  const auto r = run({"train", "--config", (root / "tiny.ini").string(), "--out", (root / "again").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(root / "run" / "masks.json"), slurp(root / "again" / "masks.json"));
  EXPECT_EQ(slurp(root / "run" / "metrics.csv"), slurp(root / "again" / "metrics.csv"));
}

TEST_F(CliRun, EvalSubnetMatchesCostModel) {
  const auto out = root / "eval1.json";
  const auto r = run({"eval", "--checkpoint", ckpt().string(), "--subnet", "1", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(slurp(out));
  const auto config = cli::load_run_config(root / "tiny.ini");
  const auto registry = encoder::GroupRegistry::build(config.model);
  const auto masks = nlohmann::json::parse(slurp(root / "run" / "masks.json"));
  const auto ids = masks.at("subnets")[1].at("group_ids").get<std::vector<int>>();
  const auto mask = encoder::MaskVector::from_selection(registry.size(), ids);
  const auto pc = costs::param_cost(registry, config.model);
  const auto fc = costs::flops_cost(registry, config.model, config.train.flops_reference_frames);
  EXPECT_EQ(doc.at("params").get<double>(), pc.base + pc.selected(mask));
  EXPECT_EQ(doc.at("params_model").get<double>(), pc.base + pc.selected(mask));
  EXPECT_EQ(doc.at("flops").get<double>(), fc.base + fc.selected(mask));
  EXPECT_EQ(doc.at("subnet").get<int>(), 1);
  const double ler = doc.at("ler").get<double>();
  EXPECT_GE(ler, 0.0);

  const auto sup = run({"eval", "--checkpoint", ckpt().string(), "--subnet", "super", "--out", out.string()});
  ASSERT_EQ(sup.code, 0) << sup.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(out)).at("params").get<double>(), pc.total());
}

TEST_F(CliRun, EvalUnknownSubnetListsValidIds) {
  const auto r = run({"eval", "--checkpoint", ckpt().string(), "--subnet", "7"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("super, 0, 1"), std::string::npos) << r.err;
}

TEST_F(CliRun, SubnetEvalBeforeTransitionIsAStateError) {
  const auto r = run({"train", "--config", (root / "tiny.ini").string(), "--out", (root / "early").string(),
                      "--stop-at", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto e = run({"eval", "--checkpoint", (root / "early" / "checkpoint.orsm").string(), "--subnet", "0"});
  EXPECT_EQ(e.code, cli::kExitRuntime);
  EXPECT_EQ(run({"eval", "--checkpoint", (root / "early" / "checkpoint.orsm").string()}).code, cli::kExitOk);
}

TEST_F(CliRun, ReportAgreesWithMasks) {
  const auto csv = root / "ratio.csv";
  ASSERT_EQ(run({"report", "--checkpoint", ckpt().string(), "--out", csv.string()}).code, 0);
  const auto config = cli::load_run_config(root / "tiny.ini");
  const auto registry = encoder::GroupRegistry::build(config.model);
  const auto masks = nlohmann::json::parse(slurp(root / "run" / "masks.json"));
  std::istringstream lines(slurp(csv));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "subnet,block,kind,ratio");
  int rows = 0;
  while (std::getline(lines, line)) {
    int subnet = 0, block = 0;
    char kind[16] = {};
    double ratio = 0;
    ASSERT_EQ(std::sscanf(line.c_str(), "%d,%d,%15[^,],%lf", &subnet, &block, kind, &ratio), 4) << line;
    const auto k = encoder::parse_module_kind(kind);
    int kept = 0;
    for (int id : masks.at("subnets")[static_cast<std::size_t>(subnet)].at("group_ids")) {
      const auto& g = registry[static_cast<std::size_t>(id)];
      kept += g.block == block && g.kind == k;
    }
    EXPECT_DOUBLE_EQ(ratio, static_cast<double>(kept) / registry.groups_per_block(k));
    ++rows;
  }
  EXPECT_EQ(rows, 2 * 2 * 4);
}

TEST_F(CliRun, ReportOfFullMaskIsAllOnes) {
  auto ck = train::read_checkpoint(ckpt());
  const auto config = cli::load_run_config(root / "tiny.ini");
  std::vector<int> all(encoder::GroupRegistry::build(config.model).size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  for (auto& s : ck.meta["masks"]["subnets"]) s["group_ids"] = all;
  const auto path = root / "full.orsm";
  train::write_checkpoint(ck, path);
  const auto csv = root / "full.csv";
  ASSERT_EQ(run({"report", "--checkpoint", path.string(), "--out", csv.string()}).code, 0);
  std::istringstream lines(slurp(csv));
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) EXPECT_EQ(line.substr(line.rfind(',') + 1), "1") << line;
}

TEST_F(CliRun, VerifyHealthyAndOverBudget) {
  const auto ok = run({"verify", "--checkpoint", ckpt().string()});
  EXPECT_EQ(ok.code, cli::kExitOk) << ok.out << ok.err;
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);

  auto ck = train::read_checkpoint(ckpt());
  auto& small = ck.meta["masks"]["subnets"][0];
  small["group_ids"] = ck.meta["masks"]["subnets"][1]["group_ids"];
  const auto path = root / "over.orsm";
  train::write_checkpoint(ck, path);
  const auto bad = run({"verify", "--checkpoint", path.string()});
  EXPECT_EQ(bad.code, cli::kExitVerify);
  EXPECT_NE(bad.err.find("subnet 0"), std::string::npos) << bad.err;
}

TEST_F(CliRun, CorpusHashMismatchNeedsFlag) {
  std::string text = kTinyConfig;
  text.replace(text.find("dev_size = 10"), 13, "dev_size = 12");
  write(root / "other.ini", text);
  ASSERT_EQ(run({"train", "--config", (root / "other.ini").string(), "--out", (root / "other").string(),
                 "--stop-at", "1"})
                .code,
            0);
  const auto foreign = (root / "other" / "corpus.bin").string();
  const auto refused = run({"eval", "--checkpoint", ckpt().string(), "--corpus", foreign});
  EXPECT_NE(refused.code, cli::kExitOk);
  EXPECT_NE(refused.err.find("--allow-hash-mismatch"), std::string::npos) << refused.err;
  const auto forced = run({"eval", "--checkpoint", ckpt().string(), "--corpus", foreign, "--allow-hash-mismatch",
                           "--out", (root / "forced.json").string()});
  EXPECT_EQ(forced.code, cli::kExitOk) << forced.err;
}

TEST_F(CliRun, CostAndMasksCommands) {
  const auto csv = root / "cost.csv";
  ASSERT_EQ(run({"cost", "--config", (root / "tiny.ini").string(), "--out", csv.string()}).code, 0);
  const auto config = cli::load_run_config(root / "tiny.ini");
  const auto registry = encoder::GroupRegistry::build(config.model);
  const auto text = slurp(csv);
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), registry.size() + 1);

  const auto masks = root / "masks_again.json";
  ASSERT_EQ(run({"masks", "--checkpoint", ckpt().string(), "--out", masks.string()}).code, 0);
  EXPECT_EQ(slurp(masks), slurp(root / "run" / "masks.json"));
}

TEST(CliLayer, LayerGranularityRatiosAreBinary) {
  const auto dir = fs::temp_directory_path() / "osm_cli_layer";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::string text = kTinyConfig;
  text.replace(text.find("max_frames = 64"), 15, "max_frames = 64\ngranularity = layer");
  write(dir / "layer.ini", text);
  ASSERT_EQ(run({"train", "--config", (dir / "layer.ini").string(), "--out", (dir / "run").string()}).code, 0);
  ASSERT_EQ(run({"report", "--checkpoint", (dir / "run" / "checkpoint.orsm").string()}).code, 0);
  std::istringstream lines(slurp(dir / "run" / "remaining_ratio.csv"));
  std::string line;
  std::getline(lines, line);
  std::set<std::string> values;
  while (std::getline(lines, line)) values.insert(line.substr(line.rfind(',') + 1));
  for (const auto& v : values) EXPECT_TRUE(v == "0" || v == "1") << v;
  fs::remove_all(dir);
}
