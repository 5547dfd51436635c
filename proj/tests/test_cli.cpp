#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#ifndef _WIN32
#include <sys/wait.h>
#endif

#include "lraccel/model_io.hpp"
#include "lraccel/rank_select.hpp"
#include "lraccel/sampler.hpp"
#include "lraccel/tensor.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace lraccel;

namespace {

const std::string kBin = LRACCEL_BIN;
const std::string kGen = LRACCEL_GEN_BIN;

int run_cli(const std::string& command) {
  const int status = std::system(command.c_str());
#ifdef _WIN32
  return status;
#else
  if (!WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
#endif
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

std::vector<std::string> names_of(const Net& net) {
  std::vector<std::string> out;
  for (const auto& layer : net.layers) out.push_back(layer_name(layer));
  return out;
}

std::uint64_t conv_total(const Net& net, const Shape& input) {
  const auto counts = net_multiplies(net, input);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (std::holds_alternative<ConvLayer>(net.layers[i])) total += counts[i];
  return total;
}

struct CliFixture {
  TempDir tmp{"lraccel-cli"};

  std::string p(const std::string& rel) const { return (tmp.path / rel).string(); }

  std::string quiet() const { return " > /dev/null 2>&1"; }

  void generate() {
    REQUIRE(run_cli(kGen + " --out " + p("demo") + " --seed 3" + quiet()) == 0);
  }
};

}  // namespace

TEST_CASE_METHOD(CliFixture, "generator emits a loadable model and dataset",
                 "[cli]") {
  generate();

  const Net net = load_model(tmp.path / "demo" / "model");
  REQUIRE(net.layers.size() == 6);
  validate_net(net, Shape{3, 32, 32});
  CHECK(names_of(net) ==
        std::vector<std::string>{"conv1", "pool1", "conv2", "conv3", "flat", "fc"});

  const Dataset data = open_dataset(tmp.path / "demo" / "data");
  REQUIRE(data.count() == 24);
  const FeatureMap img = load_image(data, 0);
  CHECK(img.channels == 3);
  CHECK(img.height == 32);
  CHECK(img.width == 32);

  const FeatureMap out = net_forward(net, img);
  CHECK(out.channels == 10);
}

TEST_CASE_METHOD(CliFixture, "five-command walkthrough", "[cli]") {
  generate();
  const std::string model = p("demo/model");
  const std::string data = p("demo/data");
  fs::create_directories(tmp.path / "spectra");

  for (const std::string layer : {"conv1", "conv2", "conv3"}) {
    REQUIRE(run_cli(kBin + " sample --model " + model + " --data " + data +
                    " --layer " + layer + " --n-images 16 --positions 10 --seed 5" +
                    " --out " + p("spectra/" + layer + ".lrtb") + quiet()) == 0);
  }
  const SampleSet s = load_samples(tmp.path / "spectra" / "conv2.lrtb");
  CHECK(s.layer_name == "conv2");
  CHECK(s.count() == 16 * 10);
  CHECK_FALSE(s.has_x_hat());
  const LayerSpectrum sp =
      load_spectrum(tmp.path / "spectra" / "conv2.spectrum.json");
  CHECK(sp.name == "conv2");
  CHECK(sp.channels() == 32);
  CHECK(sp.complexity > 0.0);

  REQUIRE(run_cli(kBin + " rank-select --model " + model + " --spectra " +
                  p("spectra") + " --speedup 4 --freeze conv1=8 --out " +
                  p("plan.json") + quiet()) == 0);
  const RankPlan plan = load_plan(tmp.path / "plan.json");
  REQUIRE(plan.ranks.size() == 3);
  CHECK(plan.ranks.at("conv1") == 8);
  CHECK(plan.ranks.at("conv2") >= 1);
  CHECK(plan.ranks.at("conv3") >= 1);
  CHECK(plan.target_speedup == 4.0);
  CHECK(plan.achieved_speedup >= 4.0);

  // Internal planner: the rewritten convolutions must fit the multiply budget.
  REQUIRE(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                  " --speedup 4 --mode 2d --solver asymmetric --out " + p("fast2d") +
                  quiet()) == 0);
  const Net orig = load_model(model);
  const Net fast2d = load_model(tmp.path / "fast2d");
  const Shape input{3, 32, 32};
  validate_net(fast2d, input);
  CHECK(conv_total(fast2d, input) * 4 <= conv_total(orig, input));
  CHECK(names_of(fast2d) ==
        std::vector<std::string>{"conv1.a", "conv1.b", "pool1", "conv2.a", "conv2.b",
                                 "conv3.a", "conv3.b", "flat", "fc"});
  const json report2d = read_json_file(tmp.path / "fast2d" / "report.json");
  CHECK(report2d.at("format") == "lraccel-report");
  CHECK(report2d.at("plan").at("ranks").size() == 3);
  CHECK(report2d.at("objective_traces").size() == 3);
  CHECK_FALSE(report2d.contains("spatial_widths"));

  // Explicit plan: chosen ranks pass through untouched.
  REQUIRE(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                  " --speedup 4 --mode 2d --plan " + p("plan.json") + " --out " +
                  p("fast2d-plan") + quiet()) == 0);
  const json planned = read_json_file(tmp.path / "fast2d-plan" / "report.json");
  CHECK(planned.at("plan").at("ranks").at("conv1") == 8);
  CHECK(planned.at("plan").at("ranks").at("conv2") == plan.ranks.at("conv2"));
  CHECK(planned.at("plan").at("ranks").at("conv3") == plan.ranks.at("conv3"));

  REQUIRE(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                  " --speedup 4 --mode 3d --out " + p("fast3d") + quiet()) == 0);
  const Net fast3d = load_model(tmp.path / "fast3d");
  validate_net(fast3d, input);
  CHECK(conv_total(fast3d, input) * 4 <= conv_total(orig, input));
  CHECK(names_of(fast3d) ==
        std::vector<std::string>{"conv1.v", "conv1.a", "conv1.b", "pool1", "conv2.v",
                                 "conv2.a", "conv2.b", "conv3.v", "conv3.a",
                                 "conv3.b", "flat", "fc"});
  const json report3d = read_json_file(tmp.path / "fast3d" / "report.json");
  REQUIRE(report3d.contains("spatial_widths"));
  CHECK(report3d.at("spatial_widths").size() == 3);

  REQUIRE(run_cli(kBin + " eval --ref " + model + " --test " + p("fast2d") +
                  " --data " + data + " --out " + p("eval.json") + quiet()) == 0);
  const json eval = read_json_file(tmp.path / "eval.json");
  CHECK(eval.at("format") == "lraccel-eval");
  CHECK(eval.at("images") == 24);
  CHECK(eval.at("agreement").get<double>() >= 0.0);
  CHECK(eval.at("agreement").get<double>() <= 1.0);
  CHECK(eval.at("theoretical_speedup").get<double>() > 1.0);
  CHECK(eval.at("measured_speedup").get<double>() > 0.0);
  REQUIRE(eval.at("layer_errors").size() == 3);
  for (const auto& entry : eval.at("layer_errors"))
    CHECK(entry.at("relative_frobenius").get<double>() >= 0.0);

  REQUIRE(run_cli(kBin + " bench --model " + p("fast2d") + " --shape 3x32x32" +
                  " --reps 5 --ref " + model + " --out " + p("bench.json") +
                  quiet()) == 0);
  const json bench = read_json_file(tmp.path / "bench.json");
  CHECK(bench.at("format") == "lraccel-bench");
  CHECK(bench.at("median_ms").get<double>() > 0.0);
  CHECK(bench.at("ref_median_ms").get<double>() > 0.0);
  CHECK(bench.at("theoretical_speedup").get<double>() > 1.0);
  std::uint64_t layer_sum = 0;
  for (const auto& entry : bench.at("layers"))
    layer_sum += entry.at("multiplies").get<std::uint64_t>();
  CHECK(layer_sum == bench.at("total_multiplies").get<std::uint64_t>());
}

TEST_CASE_METHOD(CliFixture, "input failures exit with code 2", "[cli]") {
  generate();
  const std::string model = p("demo/model");
  const std::string data = p("demo/data");

  CHECK(run_cli(kBin + " sample --model " + model + " --data " + data +
                " --layer nosuch --out " + p("x.lrtb") + quiet()) == 2);
  CHECK(run_cli(kBin + " sample --model " + model + " --data " + data +
                " --layer pool1 --out " + p("x.lrtb") + quiet()) == 2);
  CHECK(run_cli(kBin + " sample --model " + model + " --data " + data +
                " --layer conv1" + quiet()) == 2);  // missing required --out
  CHECK(run_cli(kBin + " rank-select --model " + model + " --spectra " +
                p("nodir") + " --speedup 4 --out " + p("p.json") + quiet()) == 2);
  CHECK(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                " --speedup 1 --out " + p("z") + quiet()) == 2);
  CHECK(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                " --speedup 4 --mode 4d --out " + p("z") + quiet()) == 2);
  CHECK(run_cli(kBin + " accelerate --model " + model + " --data " + data +
                " --speedup 4 --freeze conv1 --out " + p("z") + quiet()) == 2);
  CHECK(run_cli(kBin + " bench --model " + model + " --shape 3x32 --reps 5 --out " +
                p("b.json") + quiet()) == 2);
  CHECK(run_cli(kBin + " bench --model " + model + " --shape 3x32x32 --reps 2" +
                " --out " + p("b.json") + quiet()) == 2);
  CHECK(run_cli(kBin + " frobnicate" + quiet()) == 2);
  CHECK(run_cli(kBin + " eval --ref " + p("nomodel") + " --test " + model +
                " --data " + data + " --out " + p("e.json") + quiet()) == 2);
}

TEST_CASE_METHOD(CliFixture, "numerical failures exit with code 3 and name the layer",
                 "[cli]") {
  ConvLayer broken;
  broken.name = "conv1";
  broken.kh = broken.kw = 1;
  broken.in_channels = 2;
  broken.out_channels = 2;
  broken.nonlinearity = Nonlinearity::identity;
  broken.weights = MatF::Constant(2, broken.patch_len(),
                                  std::numeric_limits<float>::quiet_NaN());
  Net net;
  net.layers.push_back(broken);
  save_model(net, tmp.path / "broken");

  const int code = run_cli(kBin + " bench --model " + p("broken") +
                           " --shape 2x4x4 --reps 3 --out " + p("b.json") +
                           " > /dev/null 2> " + p("err.txt"));
  CHECK(code == 3);
  const std::string err = slurp(tmp.path / "err.txt");
  CHECK(err.find("conv1") != std::string::npos);
}
