// lraccel - command line front end for the low-rank convolution accelerator.
//
// Subcommands: sample, rank-select, accelerate, eval, bench.
// Exit codes: 0 on success, 2 on input or validation errors, 3 when a
// numerical routine fails (the offending layer is named on stderr).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/model_io.hpp"
#include "lraccel/pipeline.hpp"
#include "lraccel/rank_select.hpp"
#include "lraccel/sampler.hpp"
#include "lraccel/tensor.hpp"

namespace fs = std::filesystem;
using namespace lraccel;

namespace {

Shape parse_shape(const std::string& text) {
  int c = 0, h = 0, w = 0, used = 0;
  if (std::sscanf(text.c_str(), "%dx%dx%d%n", &c, &h, &w, &used) != 3 ||
      used != int(text.size()))
    throw InputError("bad shape '" + text + "': expected CxHxW");
  require(c > 0 && h > 0 && w > 0, "bad shape '" + text + "': all dims must be positive");
  return Shape{c, h, w};
}

std::map<std::string, int> parse_freeze(const std::vector<std::string>& entries) {
  std::map<std::string, int> out;
  for (const auto& entry : entries) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == entry.size())
      throw InputError("bad --freeze '" + entry + "': expected name=rank");
    const std::string name = entry.substr(0, eq);
    int rank = 0;
    std::size_t used = 0;
    try {
      rank = std::stoi(entry.substr(eq + 1), &used);
    } catch (const std::exception&) {
      throw InputError("bad --freeze '" + entry + "': rank is not a number");
    }
    if (used != entry.size() - eq - 1)
      throw InputError("bad --freeze '" + entry + "': rank is not a number");
    require(rank >= 1, "bad --freeze '" + entry + "': rank must be at least 1");
    out[name] = rank;
  }
  return out;
}

int find_conv_index(const Net& net, const std::string& name) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (layer_name(net.layers[i]) != name) continue;
    require(std::holds_alternative<ConvLayer>(net.layers[i]),
            "layer '" + name + "' is not a convolution");
    return int(i);
  }
  throw InputError("layer '" + name + "' not found in model");
}

struct SampleArgs {
  std::string model, data, layer, out;
  int n_images = 16;
  int positions = 10;
  std::uint64_t seed = 1;
};

int run_sample(const SampleArgs& a) {
  const Net net = load_model(a.model);
  const Dataset data = open_dataset(a.data);
  require(data.count() > 0, "dataset is empty");
  const int index = find_conv_index(net, a.layer);

  const SampleSet s =
      sample_layer(net, nullptr, index, data, a.n_images, a.positions, a.seed);
  save_samples(s, a.out);

  // The spectrum sidecar carries everything rank-select needs: the response
  // eigenvalues and this layer's share of the network's multiply count.
  const FeatureMap probe = load_image(data, 0);
  const Shape input{probe.channels, probe.height, probe.width};
  const auto shapes = net_shapes(net, input);
  const Shape in_shape = index == 0 ? input : shapes[std::size_t(index) - 1];
  const auto& conv = std::get<ConvLayer>(net.layers[std::size_t(index)]);
  const LayerSpectrum spectrum =
      layer_spectrum(s, double(conv_multiplies(conv, in_shape)));
  fs::path sidecar = fs::path(a.out);
  sidecar.replace_extension(".spectrum.json");
  save_spectrum(spectrum, sidecar);

  std::cout << "sampled layer '" << a.layer << "': " << s.count()
            << " responses -> " << a.out << "\n"
            << "spectrum -> " << sidecar.string() << "\n";
  return 0;
}

struct RankSelectArgs {
  std::string model, spectra, out;
  double speedup = 0.0;
  std::vector<std::string> freeze;
};

int run_rank_select(const RankSelectArgs& a) {
  require(a.speedup > 1.0, "speedup must exceed 1");
  const Net net = load_model(a.model);

  std::vector<fs::path> files;
  if (!fs::is_directory(a.spectra))
    throw InputError("spectra directory " + a.spectra + " does not exist");
  for (const auto& entry : fs::directory_iterator(a.spectra)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 14 && name.substr(name.size() - 14) == ".spectrum.json")
      files.push_back(entry.path());
  }
  require(!files.empty(), "no *.spectrum.json files in " + a.spectra);
  std::sort(files.begin(), files.end());

  std::vector<LayerSpectrum> spectra;
  for (const auto& f : files) spectra.push_back(load_spectrum(f));
  std::sort(spectra.begin(), spectra.end(),
            [](const LayerSpectrum& x, const LayerSpectrum& y) {
              return std::tie(x.layer_index, x.name) < std::tie(y.layer_index, y.name);
            });
  for (std::size_t i = 1; i < spectra.size(); ++i)
    require(spectra[i].name != spectra[i - 1].name,
            "duplicate spectrum for layer '" + spectra[i].name + "'");

  // Every convolution needs a spectrum so the resulting plan can drive the
  // accelerate stage without gaps; widths must agree with the model.
  std::map<std::string, int> conv_width;
  for (const auto& layer : net.layers)
    if (const auto* conv = std::get_if<ConvLayer>(&layer))
      conv_width[conv->name] = conv->out_channels;
  for (const auto& sp : spectra) {
    auto it = conv_width.find(sp.name);
    require(it != conv_width.end(),
            "spectrum '" + sp.name + "' names no convolution in the model");
    require(sp.channels() == it->second,
            "spectrum for '" + sp.name + "' has " + std::to_string(sp.channels()) +
                " channels, layer has " + std::to_string(it->second));
  }
  for (const auto& [name, width] : conv_width) {
    (void)width;
    const bool covered =
        std::any_of(spectra.begin(), spectra.end(),
                    [&](const LayerSpectrum& sp) { return sp.name == name; });
    require(covered, "no spectrum for layer '" + name + "'");
  }

  const std::map<std::string, int> frozen = parse_freeze(a.freeze);

  double full_cost = 0.0;
  for (const auto& sp : spectra) full_cost += sp.complexity;
  const RankSelection sel = select_ranks(spectra, full_cost / a.speedup, frozen);

  RankPlan plan;
  plan.target_speedup = a.speedup;
  plan.achieved_speedup = sel.cost > 0.0 ? sel.full_cost / sel.cost : 0.0;
  plan.objective = sel.objective;
  plan.log_objective = sel.log_objective;
  for (std::size_t l = 0; l < spectra.size(); ++l)
    plan.ranks[spectra[l].name] = sel.ranks[l];
  save_plan(plan, a.out);

  std::cout << "rank plan -> " << a.out << "\n";
  for (std::size_t l = 0; l < spectra.size(); ++l)
    std::cout << "  " << spectra[l].name << ": " << sel.ranks[l] << "/"
              << spectra[l].channels() << "\n";
  std::cout << "planned speedup " << plan.achieved_speedup << " (target "
            << a.speedup << "), kept energy " << sel.objective << "\n";
  return 0;
}

struct AccelerateArgs {
  std::string model, data, out, plan;
  std::string mode = "2d";
  std::string solver = "asymmetric";
  double speedup = 0.0;
  int n_images = 16;
  int positions = 10;
  std::uint64_t seed = 1;
  std::vector<std::string> freeze;
  double ridge = 0.0;
  double spatial_speedup = 0.0;
};

int run_accelerate(const AccelerateArgs& a) {
  const Net net = load_model(a.model);

  AccelConfig cfg;
  cfg.target_speedup = a.speedup;
  cfg.mode = mode_from_name(a.mode);
  cfg.solver = solver_from_name(a.solver);
  cfg.calibration.dataset = a.data;
  cfg.calibration.n_images = a.n_images;
  cfg.calibration.positions = a.positions;
  cfg.calibration.seed = a.seed;
  cfg.frozen = parse_freeze(a.freeze);
  cfg.ridge = a.ridge;
  cfg.spatial_speedup = a.spatial_speedup;

  RankPlan plan;
  const RankPlan* plan_override = nullptr;
  if (!a.plan.empty()) {
    plan = load_plan(a.plan);
    plan_override = &plan;
  }

  const AccelResult res = accelerate_model(net, cfg, plan_override);
  save_model(res.net, a.out);
  write_json_file(fs::path(a.out) / "report.json", accel_report_to_json(res));

  std::cout << "accelerated model -> " << a.out << "\n";
  for (const auto& [name, rank] : res.plan.ranks)
    std::cout << "  " << name << ": rank " << rank << "\n";
  std::cout << "multiply-count speedup " << res.plan.achieved_speedup << " (target "
            << a.speedup << ")\n"
            << "top-1 agreement " << res.eval.agreement << ", mean deviation "
            << res.eval.mean_abs_deviation << "\n";
  return 0;
}

struct EvalArgs {
  std::string ref, test, data, out;
};

int run_eval(const EvalArgs& a) {
  const Net ref = load_model(a.ref);
  const Net test = load_model(a.test);
  const Dataset data = open_dataset(a.data);
  const EvalReport rep = evaluate(ref, test, data, /*timed=*/true);
  write_json_file(a.out, eval_to_json(rep));

  std::cout << "eval report -> " << a.out << "\n"
            << "top-1 agreement " << rep.agreement << " over " << rep.images
            << " images\n"
            << "mean deviation " << rep.mean_abs_deviation << "\n"
            << "speedup " << rep.theoretical_speedup << " by multiply count, "
            << rep.measured_speedup << " measured\n";
  return 0;
}

struct BenchArgs {
  std::string model, shape, ref, out;
  int reps = 9;
  std::uint64_t seed = 7;
};

int run_bench(const BenchArgs& a) {
  const Net model = load_model(a.model);
  Net ref;
  if (!a.ref.empty()) ref = load_model(a.ref);
  const BenchReport rep = benchmark(model, a.ref.empty() ? nullptr : &ref,
                                    parse_shape(a.shape), a.reps, a.seed);
  write_json_file(a.out, bench_to_json(rep));

  std::cout << "bench report -> " << a.out << "\n"
            << "median forward " << rep.median_ms << " ms, "
            << rep.total_multiplies << " multiplies\n";
  if (!a.ref.empty())
    std::cout << "speedup vs reference: " << rep.measured_speedup << " measured, "
              << rep.theoretical_speedup << " by multiply count\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"low-rank acceleration of convolutional networks"};
  app.require_subcommand(1);
  app.footer("Set LRACCEL_THREADS to cap worker threads (0 or unset = all cores).");

  SampleArgs sa;
  auto* sample = app.add_subcommand(
      "sample", "collect layer responses and their spectrum from a model");
  sample->add_option("--model", sa.model, "model directory or model.json")->required();
  sample->add_option("--data", sa.data, "dataset directory")->required();
  sample->add_option("--layer", sa.layer, "convolution layer name")->required();
  sample->add_option("--n-images", sa.n_images, "images to draw from the dataset");
  sample->add_option("--positions", sa.positions, "spatial positions per image");
  sample->add_option("--seed", sa.seed, "sampling seed");
  sample->add_option("--out", sa.out, "output sample file (a .spectrum.json sidecar is written next to it)")
      ->required();

  RankSelectArgs ra;
  auto* rank_select = app.add_subcommand(
      "rank-select", "pick per-layer ranks for a whole-model speedup target");
  rank_select->add_option("--model", ra.model, "model directory or model.json")->required();
  rank_select->add_option("--spectra", ra.spectra, "directory of *.spectrum.json files")
      ->required();
  rank_select->add_option("--speedup", ra.speedup, "target whole-model speedup, > 1")
      ->required();
  rank_select->add_option("--freeze", ra.freeze,
                          "pin a layer's rank, name=rank (repeatable)");
  rank_select->add_option("--out", ra.out, "output plan file")->required();

  AccelerateArgs aa;
  auto* accelerate = app.add_subcommand(
      "accelerate", "rewrite a model's convolutions into low-rank form");
  accelerate->add_option("--model", aa.model, "model directory or model.json")->required();
  accelerate->add_option("--data", aa.data, "calibration dataset directory")->required();
  accelerate->add_option("--speedup", aa.speedup, "target whole-model speedup, > 1")
      ->required();
  accelerate->add_option("--mode", aa.mode, "decomposition mode: 2d or 3d");
  accelerate->add_option("--solver", aa.solver,
                         "channel solver: linear, nonlinear, or asymmetric");
  accelerate->add_option("--plan", aa.plan, "rank plan from rank-select (optional)");
  accelerate->add_option("--n-images", aa.n_images, "calibration images to draw");
  accelerate->add_option("--positions", aa.positions, "spatial positions per image");
  accelerate->add_option("--seed", aa.seed, "sampling seed");
  accelerate->add_option("--freeze", aa.freeze,
                         "pin a layer's rank, name=rank (repeatable); a rank at or "
                         "above the layer's width leaves the layer untouched");
  accelerate->add_option("--ridge", aa.ridge,
                         "regularizer added to the solvers' Gram matrices");
  accelerate->add_option("--spatial-speedup", aa.spatial_speedup,
                         "3d: speedup assigned to the spatial stage (0 = sqrt of target)");
  accelerate->add_option("--out", aa.out, "output model directory")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand(
      "eval", "compare an accelerated model against its reference");
  eval->add_option("--ref", ea.ref, "reference model directory")->required();
  eval->add_option("--test", ea.test, "model under test")->required();
  eval->add_option("--data", ea.data, "evaluation dataset directory")->required();
  eval->add_option("--out", ea.out, "output report file")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time forward passes on synthetic input");
  bench->add_option("--model", ba.model, "model directory or model.json")->required();
  bench->add_option("--shape", ba.shape, "input shape as CxHxW")->required();
  bench->add_option("--reps", ba.reps, "timed repetitions (at least 3)");
  bench->add_option("--ref", ba.ref, "reference model to compare against");
  bench->add_option("--seed", ba.seed, "input seed");
  bench->add_option("--out", ba.out, "output report file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*sample) return run_sample(sa);
    if (*rank_select) return run_rank_select(ra);
    if (*accelerate) return run_accelerate(aa);
    if (*eval) return run_eval(ea);
    return run_bench(ba);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
