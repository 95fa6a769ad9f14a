#include <algorithm>
#include <filesystem>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli_runner.hpp"

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("worldtrack_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  std::string synth(const std::string& name, const std::string& extra = "") {
    const auto r = cli::run("synth --preset dyn-cam-dyn-scene --seed 3 --frames 4 --resolution 24x16 --out " + path(name) + " " + extra);
    EXPECT_EQ(r.exit_code, 0) << r.err;
    return path(name);
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli::run("--help").exit_code, 0);
  EXPECT_EQ(cli::run("").exit_code, 2);
  EXPECT_EQ(cli::run("frobnicate").exit_code, 2);
  const auto bad = cli::run("synth --preset nowhere --out " + path("x"));
  EXPECT_EQ(bad.exit_code, 2);
  EXPECT_FALSE(bad.err.empty());
  EXPECT_FALSE(fs::exists(path("x")));
  EXPECT_EQ(cli::run("synth --preset dyn-cam-dyn-scene --resolution 4x4 --out " + path("y")).exit_code, 2);
  EXPECT_EQ(cli::run("check-grads --trials 0").exit_code, 2);
}

TEST_F(Cli, SynthPrintsManifestAndIsDeterministic) {
  const auto a = cli::run("synth --preset static-cam-dyn-scene --seed 1 --frames 3 --resolution 16x12 --out " + path("a"));
  const auto b = cli::run("synth --preset static-cam-dyn-scene --seed 1 --frames 3 --resolution 16x12 --out " + path("b"));
  ASSERT_EQ(a.exit_code, 0) << a.err;
  EXPECT_EQ(a.out, (fs::path(path("a")) / "manifest.json").string() + "\n");
  for (const auto& e : fs::directory_iterator(path("a")))
    EXPECT_EQ(cli::read_all(e.path()), cli::read_all(fs::path(path("b")) / e.path().filename()));
}

TEST_F(Cli, SolveCameraWritesSiblingJson) {
  const std::string seq = synth("seq");
  const auto r = cli::run("solve-camera --seq " + seq);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  ASSERT_EQ(r.out.rfind("focal ", 0), 0u) << r.out;
  EXPECT_NEAR(std::stod(r.out.substr(6)), 21.0, 1e-3);
  const fs::path json = path("seq.cameras.json");
  ASSERT_TRUE(fs::exists(json));
  const auto j = nlohmann::json::parse(cli::read_all(json));
  EXPECT_NEAR(j["focal"].get<double>(), 21.0, 1e-3);
  EXPECT_EQ(j["frames"].size(), 4u);
  EXPECT_EQ(j["solver"]["ransac"]["max_iterations"], 256);
  EXPECT_EQ(j["solver"]["ransac"]["inlier_threshold"], 2.0);
  EXPECT_EQ(cli::run("solve-camera --seq " + seq + " --out " + seq + "/cams.json").exit_code, 2);
  EXPECT_EQ(cli::run("solve-camera --seq " + path("missing")).exit_code, 1);
}

TEST_F(Cli, AdaptAndEvaluate) {
  const std::string seq = synth("seq");
  const std::string noisy = synth("noisy", "--noise 0.05 --drift 0.01 --corrupt-seed 2");
  const auto before = cli::run("eval --seq " + seq + " --pred " + noisy);
  ASSERT_EQ(before.exit_code, 0) << before.err;
  const auto adapt = cli::run("adapt --seq " + noisy + " --out " + path("adapted") + " --steps 30");
  ASSERT_EQ(adapt.exit_code, 0) << adapt.err;
  const std::string trace = cli::read_all(fs::path(path("adapted")) / "loss_trace.csv");
  EXPECT_EQ(trace.rfind("step,traj,depth,align,total\n", 0), 0u);
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 31);
  EXPECT_EQ(cli::read_all(fs::path(path("adapted")) / "recon_pointmaps.f32"),
            cli::read_all(fs::path(noisy) / "recon_pointmaps.f32"));
  const auto after = cli::run("eval --seq " + seq + " --pred " + path("adapted") + " --out " + path("report"));
  ASSERT_EQ(after.exit_code, 0) << after.err;
  auto apd = [](const std::string& out) { return std::stod(out.substr(out.find("apd ") + 4)); };
  EXPECT_GT(apd(after.out), apd(before.out));
  EXPECT_NE(after.out.find("dynamic apd"), std::string::npos);
  const auto j = nlohmann::json::parse(cli::read_all(path("report") + ".json"));
  EXPECT_EQ(j["alignment"]["mode"], "median");
  EXPECT_TRUE(j.contains("config_fingerprint"));
  EXPECT_EQ(cli::read_all(path("report") + ".csv").rfind("subset,apd_percent,epe_meters,num_pairs", 0), 0u);
  EXPECT_EQ(cli::run("adapt --seq " + noisy + " --out " + noisy + "/inside").exit_code, 2);
}

TEST_F(Cli, EvalModesAndTasks) {
  const std::string seq = synth("seq");
  const auto perfect = cli::run("eval --seq " + seq + " --pred " + seq + " --task recon --mode sim3");
  ASSERT_EQ(perfect.exit_code, 0) << perfect.err;
  EXPECT_EQ(perfect.out.rfind("all apd 100 epe ", 0), 0u) << perfect.out;
  EXPECT_TRUE(fs::exists(path("seq.eval_recon_sim3.json")));
  EXPECT_TRUE(fs::exists(path("seq.eval_recon_sim3.csv")));
  EXPECT_NE(perfect.out.find(path("seq.eval_recon_sim3.json")), std::string::npos);
  const auto track = cli::run("eval --seq " + seq + " --pred " + seq + " --subsample 50 --seed 4");
  ASSERT_EQ(track.exit_code, 0) << track.err;
  EXPECT_EQ(track.out.rfind("all apd 100 epe 0 pairs", 0), 0u) << track.out;
  EXPECT_EQ(cli::run("eval --seq " + seq + " --pred " + seq + " --thresholds 0.5,0.1").exit_code, 2);
  EXPECT_EQ(cli::run("eval --seq " + seq + " --pred " + seq + " --task depth").exit_code, 2);
}

TEST_F(Cli, CheckGrads) {
  const auto ok = cli::run("check-grads --trials 2");
  EXPECT_EQ(ok.exit_code, 0) << ok.err;
  EXPECT_EQ(ok.out.rfind("component", 0), 0u);
  EXPECT_EQ(std::count(ok.out.begin(), ok.out.end(), '\n'), 7);
  const auto flipped = cli::run("check-grads --trials 2 --inject-sign-flip");
  EXPECT_EQ(flipped.exit_code, 1);
  EXPECT_NE(flipped.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(cli::run("check-grads --trials 2").out, ok.out);
}
