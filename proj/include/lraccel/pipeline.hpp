#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/decompose.hpp"
#include "lraccel/model_io.hpp"
#include "lraccel/rank_select.hpp"
#include "lraccel/sampler.hpp"
#include "lraccel/spatial.hpp"
#include "lraccel/tensor.hpp"

namespace lraccel {

enum class AccelMode { channel_2d, asym_3d };

inline AccelMode mode_from_name(const std::string& name) {
  if (name == "2d" || name == "channel-2d") return AccelMode::channel_2d;
  if (name == "3d" || name == "asym-3d") return AccelMode::asym_3d;
  throw InputError("unknown mode '" + name + "' (expected 2d or 3d)");
}

inline SolverKind solver_from_name(const std::string& name) {
  if (name == "linear") return SolverKind::linear;
  if (name == "nonlinear") return SolverKind::nonlinear;
  if (name == "asymmetric") return SolverKind::asymmetric;
  throw InputError("unknown solver '" + name +
                   "' (expected linear, nonlinear or asymmetric)");
}

inline const char* solver_name(SolverKind k) {
  switch (k) {
    case SolverKind::linear: return "linear";
    case SolverKind::nonlinear: return "nonlinear";
    default: return "asymmetric";
  }
}

struct CalibrationConfig {
  std::string dataset;  // directory with index.txt + tensor blobs
  int n_images = 16;
  int positions = 10;  // sampled spatial positions per image
  std::uint64_t seed = 1;
};

struct AccelConfig {
  double target_speedup = 2.0;  // whole-model multiply-count ratio, > 1
  AccelMode mode = AccelMode::channel_2d;
  SolverKind solver = SolverKind::asymmetric;
  SolverSchedule schedule;
  CalibrationConfig calibration;
  std::map<std::string, int> frozen;  // layer name -> pinned channel rank;
                                      // >= layer width leaves the layer untouched
  double ridge = 0.0;                 // regularizer added to the solvers' Gram
  double spatial_speedup = 0.0;       // 3d: spatial-stage share (0 = sqrt(r))

  // called after each layer is spliced with the partially rewritten network;
  // the intended extension point for fine-tuning passes (default: none)
  std::function<void(const std::string&, Net&)> after_layer;
};

struct EvalReport {
  double agreement = 0.0;           // top-1 match rate on the final output
  double mean_abs_deviation = 0.0;  // mean |a - b| over final outputs
  std::vector<std::pair<std::string, double>> layer_errors;  // relative Frobenius
  double theoretical_speedup = 0.0;  // multiply-count ratio ref / test
  double measured_speedup = 0.0;     // wall-time ratio ref / test
  int images = 0;
};

struct BenchReport {
  double median_ms = 0.0;
  double ref_median_ms = 0.0;
  double measured_speedup = 1.0;     // ref / model, 1 when no reference given
  double theoretical_speedup = 1.0;  // multiply-count ratio ref / model
  std::uint64_t total_multiplies = 0;
  std::uint64_t ref_total_multiplies = 0;
  std::vector<std::pair<std::string, std::uint64_t>> layer_multiply_counts;
};

struct AccelResult {
  Net net;
  EvalReport eval;
  RankPlan plan;
  std::map<std::string, std::vector<double>> objective_traces;
  std::map<std::string, int> spatial_widths;  // 3d mode: layer -> intermediate width
};

// ---------------------------------------------------------------- evaluate

namespace detail {

inline std::vector<FeatureMap> forward_all(const Net& net, const FeatureMap& in) {
  std::vector<FeatureMap> outs;
  outs.reserve(net.layers.size());
  FeatureMap cur = in;
  for (const auto& layer : net.layers) {
    cur = layer_forward(layer, cur);
    outs.push_back(cur);
  }
  return outs;
}

inline int argmax_of(const FeatureMap& fm) {
  int best = 0;
  for (int i = 1; i < int(fm.data.size()); ++i)
    if (fm.data[std::size_t(i)] > fm.data[std::size_t(best)]) best = i;
  return best;
}

inline double ms_between(std::chrono::steady_clock::time_point a,
                         std::chrono::steady_clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace detail

// compares two networks over a dataset: final-output agreement and deviation,
// plus relative response error for every layer group the models share (layers
// are matched by base name, so a spliced "conv2.v/.a/.b" group is compared
// against the original "conv2" at the group's last layer). timing fields are
// the only nondeterministic part of the report; `timed = false` skips them
inline EvalReport evaluate(const Net& ref, const Net& test, const Dataset& data,
                           bool timed = true) {
  const int n = data.count();
  require(n >= 1, "evaluate: dataset is empty");
  std::vector<FeatureMap> images(static_cast<std::size_t>(n));
  parallel_for(std::size_t(n), [&](std::size_t i) { images[i] = load_image(data, int(i)); });

  const Shape input{images[0].channels, images[0].height, images[0].width};
  validate_net(ref, input);
  validate_net(test, input);
  const std::vector<Shape> ref_shapes = net_shapes(ref, input);
  const std::vector<Shape> test_shapes = net_shapes(test, input);
  require(!ref_shapes.empty() && !test_shapes.empty(), "evaluate: empty network");
  require(ref_shapes.back() == test_shapes.back(),
          "evaluate: models produce different output shapes");

  // pair the last ref layer of each conv group with the last test layer of
  // the same group
  struct GroupPair {
    std::string name;
    std::size_t ref_idx = 0;
    std::size_t test_idx = 0;
  };
  std::vector<GroupPair> pairs;
  for (std::size_t i = 0; i < ref.layers.size(); ++i) {
    if (!std::holds_alternative<ConvLayer>(ref.layers[i])) continue;
    const std::string group = base_name(layer_name(ref.layers[i]));
    bool known = false;
    for (auto& p : pairs)
      if (p.name == group) {
        p.ref_idx = i;
        known = true;
      }
    if (!known) pairs.push_back({group, i, 0});
  }
  std::vector<GroupPair> matched;
  for (auto& p : pairs) {
    bool found = false;
    for (std::size_t j = 0; j < test.layers.size(); ++j)
      if (base_name(layer_name(test.layers[j])) == p.name) {
        p.test_idx = j;
        found = true;
      }
    if (!found) continue;
    require(ref_shapes[p.ref_idx] == test_shapes[p.test_idx],
            "evaluate: layer '" + p.name + "' output shapes differ between models");
    matched.push_back(p);
  }

  std::vector<std::uint8_t> agree(std::size_t(n), 0);
  std::vector<double> deviation(std::size_t(n), 0.0);
  std::vector<std::vector<double>> err_num(matched.size(),
                                           std::vector<double>(std::size_t(n), 0.0));
  std::vector<std::vector<double>> err_den(matched.size(),
                                           std::vector<double>(std::size_t(n), 0.0));

  parallel_for(std::size_t(n), [&](std::size_t i) {
    const std::vector<FeatureMap> a = detail::forward_all(ref, images[i]);
    const std::vector<FeatureMap> b = detail::forward_all(test, images[i]);
    for (std::size_t p = 0; p < matched.size(); ++p) {
      const FeatureMap& fa = a[matched[p].ref_idx];
      const FeatureMap& fb = b[matched[p].test_idx];
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < fa.data.size(); ++k) {
        const double diff = double(fa.data[k]) - double(fb.data[k]);
        num += diff * diff;
        den += double(fa.data[k]) * double(fa.data[k]);
      }
      err_num[p][i] = num;
      err_den[p][i] = den;
    }
    const FeatureMap& fa = a.back();
    const FeatureMap& fb = b.back();
    agree[i] = detail::argmax_of(fa) == detail::argmax_of(fb) ? 1 : 0;
    double dev = 0.0;
    for (std::size_t k = 0; k < fa.data.size(); ++k)
      dev += std::abs(double(fa.data[k]) - double(fb.data[k]));
    deviation[i] = dev / double(fa.data.size());
  });

  EvalReport report;
  report.images = n;
  for (int i = 0; i < n; ++i) {
    report.agreement += agree[std::size_t(i)];
    report.mean_abs_deviation += deviation[std::size_t(i)];
  }
  report.agreement /= double(n);
  report.mean_abs_deviation /= double(n);
  for (std::size_t p = 0; p < matched.size(); ++p) {
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) {
      num += err_num[p][std::size_t(i)];
      den += err_den[p][std::size_t(i)];
    }
    const double err = den > 0.0 ? std::sqrt(num / den) : (num > 0.0 ? HUGE_VAL : 0.0);
    report.layer_errors.emplace_back(matched[p].name, err);
  }

  const std::vector<std::uint64_t> rm = net_multiplies(ref, input);
  const std::vector<std::uint64_t> tm = net_multiplies(test, input);
  const double ref_mult = double(std::accumulate(rm.begin(), rm.end(), std::uint64_t(0)));
  const double test_mult = double(std::accumulate(tm.begin(), tm.end(), std::uint64_t(0)));
  report.theoretical_speedup = test_mult > 0.0 ? ref_mult / test_mult : 1.0;

  if (timed) {
    const auto run = [&](const Net& net) {
      const auto t0 = std::chrono::steady_clock::now();
      float sink = 0.0f;
      for (const auto& img : images) {
        FeatureMap out = net_forward(net, img);
        sink += out.data.empty() ? 0.0f : out.data[0];
      }
      const auto t1 = std::chrono::steady_clock::now();
      volatile float keep = sink;
      (void)keep;
      return detail::ms_between(t0, t1);
    };
    const double ref_ms = run(ref);
    const double test_ms = run(test);
    report.measured_speedup = test_ms > 0.0 ? ref_ms / test_ms : 1.0;
  }
  return report;
}

// ---------------------------------------------------------------- benchmark

// median single-threaded forward wall time over `reps` runs on one seeded
// random input, with per-layer multiply counts; `ref`, when given, provides
// the measured and theoretical speedup baselines
inline BenchReport benchmark(const Net& model, const Net* ref, const Shape& input,
                             int reps, std::uint64_t seed = 7) {
  require(reps >= 3, "benchmark: need at least 3 repetitions");
  validate_net(model, input);
  if (ref) validate_net(*ref, input);

  FeatureMap fm(input.channels, input.height, input.width);
  Rng rng(mix_seed(seed, 0x6e6863));
  for (auto& v : fm.data) v = float(rng.normal());

  BenchReport report;
  const std::vector<std::uint64_t> counts = net_multiplies(model, input);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    report.layer_multiply_counts.emplace_back(layer_name(model.layers[i]), counts[i]);
    report.total_multiplies += counts[i];
  }
  if (ref) {
    const std::vector<std::uint64_t> rc = net_multiplies(*ref, input);
    report.ref_total_multiplies = std::accumulate(rc.begin(), rc.end(), std::uint64_t(0));
    if (report.total_multiplies > 0)
      report.theoretical_speedup =
          double(report.ref_total_multiplies) / double(report.total_multiplies);
  }

  const auto median_time = [&](const Net& net) {
    float sink = net_forward(net, fm).data[0];  // warm-up
    std::vector<double> times(static_cast<std::size_t>(reps));
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      FeatureMap out = net_forward(net, fm);
      const auto t1 = std::chrono::steady_clock::now();
      sink += out.data[0];
      times[std::size_t(r)] = detail::ms_between(t0, t1);
    }
    volatile float keep = sink;
    (void)keep;
    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    return times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  };
  report.median_ms = median_time(model);
  if (ref) {
    report.ref_median_ms = median_time(*ref);
    if (report.median_ms > 0.0)
      report.measured_speedup = report.ref_median_ms / report.median_ms;
  }
  return report;
}

// ---------------------------------------------------------------- accelerate

namespace detail {

struct TargetLayer {
  std::size_t index = 0;   // position in the original network
  const ConvLayer* layer = nullptr;
  Shape in_shape;
  std::uint64_t multiplies = 0;
  bool untouched = false;  // frozen at (or above) full width
  int frozen_rank = 0;     // 0 = free
  int dd = 0;              // 3d: intermediate width of the spatial split
  double unit_cost = 0.0;  // multiplies per unit of channel rank, spliced form
  double vertical_cost = 0.0;  // 3d: rank-independent spatial-stage multiplies
};

// rewritten cost of the two-layer form is unit_cost * d' exactly: the first
// layer keeps the original window over d' filters and the 1x1 expansion adds
// one full-width column per rank unit
inline void fill_2d_costs(TargetLayer& t) {
  const ConvLayer& l = *t.layer;
  ConvLayer first = l;
  first.out_channels = 1;
  const Shape f_out = conv_out_shape(first, t.in_shape);

  ConvLayer expand;
  expand.name = l.name;
  expand.in_channels = 1;
  expand.out_channels = l.out_channels;
  t.unit_cost = double(conv_multiplies(first, t.in_shape)) +
                double(conv_multiplies(expand, f_out));
}

// multiply cost of the 3d split as a function of the channel rank is
// vertical_cost + unit_cost * d'; both terms are exact conv op counts
inline void fill_3d_costs(TargetLayer& t, double spatial_speedup) {
  const ConvLayer& l = *t.layer;
  t.dd = choose_dd(l, spatial_speedup);

  ConvLayer vertical;
  vertical.name = l.name;
  vertical.kh = l.kh;
  vertical.kw = 1;
  vertical.in_channels = l.in_channels;
  vertical.out_channels = t.dd;
  vertical.stride_h = l.stride_h;
  vertical.stride_w = 1;
  vertical.pad_h = l.pad_h;
  vertical.pad_w = 0;
  const Shape v_out = conv_out_shape(vertical, t.in_shape);
  t.vertical_cost = double(conv_multiplies(vertical, t.in_shape));

  ConvLayer reduced;
  reduced.name = l.name;
  reduced.kh = 1;
  reduced.kw = l.kw;
  reduced.in_channels = t.dd;
  reduced.out_channels = 1;
  reduced.stride_h = 1;
  reduced.stride_w = l.stride_w;
  reduced.pad_h = 0;
  reduced.pad_w = l.pad_w;
  const Shape r_out = conv_out_shape(reduced, v_out);

  ConvLayer expand;
  expand.name = l.name;
  expand.kh = 1;
  expand.kw = 1;
  expand.in_channels = 1;
  expand.out_channels = l.out_channels;
  t.unit_cost = double(conv_multiplies(reduced, v_out)) +
                double(conv_multiplies(expand, r_out));
}

inline void splice(Net& net, const std::string& name, std::vector<Layer> pieces) {
  const std::size_t pos = approx_layer_position(net, name);
  net.layers.erase(net.layers.begin() + std::ptrdiff_t(pos));
  net.layers.insert(net.layers.begin() + std::ptrdiff_t(pos),
                    std::make_move_iterator(pieces.begin()),
                    std::make_move_iterator(pieces.end()));
}

}  // namespace detail

// rewrites every convolution of `net` under the configured multiply budget:
// ranks are allocated once from response spectra of the original network,
// then layers are rewritten shallow to deep while the partially rewritten
// network supplies the approximated inputs for asymmetric reconstruction.
// `plan_override` substitutes an externally computed rank plan for the
// spectrum-based selection
inline AccelResult accelerate_model(const Net& net, const AccelConfig& cfg,
                                    const RankPlan* plan_override = nullptr) {
  require(cfg.target_speedup > 1.0, "accelerate: target speedup must exceed 1");
  require(cfg.calibration.n_images >= 1, "accelerate: n_images must be at least 1");
  require(cfg.calibration.positions >= 1, "accelerate: positions must be at least 1");

  Dataset data = open_dataset(cfg.calibration.dataset);
  const FeatureMap probe = load_image(data, 0);
  const Shape input{probe.channels, probe.height, probe.width};
  validate_net(net, input);

  // every convolution is a target unless pinned at full width
  std::vector<detail::TargetLayer> targets;
  {
    Shape cur = input;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      if (const auto* c = std::get_if<ConvLayer>(&net.layers[i])) {
        detail::TargetLayer t;
        t.index = i;
        t.layer = c;
        t.in_shape = cur;
        t.multiplies = conv_multiplies(*c, cur);
        if (auto it = cfg.frozen.find(c->name); it != cfg.frozen.end()) {
          require(it->second >= 1, "accelerate: frozen rank for '" + c->name +
                                       "' must be at least 1");
          t.frozen_rank = it->second;
          t.untouched = it->second >= c->out_channels;
        }
        targets.push_back(t);
      }
      cur = layer_out_shape(net.layers[i], cur);
    }
  }
  require(!targets.empty(), "accelerate: network has no convolution layers");
  for (const auto& [name, rank] : cfg.frozen) {
    const bool known = std::any_of(targets.begin(), targets.end(),
                                   [&](const auto& t) { return t.layer->name == name; });
    require(known, "accelerate: frozen layer '" + name + "' not in network");
  }

  const double r = cfg.target_speedup;
  const double spatial = cfg.spatial_speedup > 0.0 ? cfg.spatial_speedup : std::sqrt(r);
  double selectable_cost = 0.0;
  for (auto& t : targets) {
    if (t.untouched) continue;
    selectable_cost += double(t.multiplies);
    if (cfg.mode == AccelMode::asym_3d)
      detail::fill_3d_costs(t, spatial);
    else
      detail::fill_2d_costs(t);
  }

  // rank allocation: one pass over spectra of the original, unmodified network
  std::map<std::string, int> chosen;
  double objective = 0.0, log_objective = 0.0;
  if (plan_override) {
    for (const auto& t : targets) {
      if (t.untouched) continue;
      auto it = plan_override->ranks.find(t.layer->name);
      require(it != plan_override->ranks.end(),
              "accelerate: plan has no rank for layer '" + t.layer->name + "'");
      require(it->second >= 1, "accelerate: plan rank for '" + t.layer->name +
                                   "' must be at least 1");
      chosen[t.layer->name] = std::min(it->second, t.layer->out_channels);
    }
    objective = plan_override->objective;
    log_objective = plan_override->log_objective;
  } else if (selectable_cost > 0.0) {
    std::vector<LayerSpectrum> spectra;
    std::map<std::string, int> frozen_below;
    for (const auto& t : targets) {
      if (t.untouched) continue;
      SampleSet s = sample_layer(net, nullptr, t.index, data, cfg.calibration.n_images,
                                 cfg.calibration.positions, cfg.calibration.seed);
      // weight each layer by the exact rewritten cost per rank unit, so the
      // greedy measure's denominator is the true marginal multiply count and
      // the selected plan's cost equals the rewritten network's cost
      spectra.push_back(layer_spectrum(s, t.unit_cost * t.layer->out_channels));
      if (t.frozen_rank > 0) frozen_below[t.layer->name] = t.frozen_rank;
    }

    double budget = selectable_cost / r;
    if (cfg.mode == AccelMode::asym_3d) {
      for (const auto& t : targets)
        if (!t.untouched) budget -= t.vertical_cost;
      require(budget > 0.0,
              "accelerate: the spatial stage alone exceeds the multiply budget; "
              "raise spatial_speedup or the target speedup");
    }
    const RankSelection sel = select_ranks(spectra, budget, frozen_below);
    for (std::size_t i = 0; i < spectra.size(); ++i)
      chosen[spectra[i].name] = sel.ranks[i];
    objective = sel.objective;
    log_objective = sel.log_objective;
  }

  // sequential rewrite, shallow to deep; the rewritten prefix provides the
  // approximated inputs that the asymmetric solver compensates for
  Net approx = net;
  AccelResult result;
  const bool want_hat = cfg.solver == SolverKind::asymmetric;
  for (const auto& t : targets) {
    const std::string& name = t.layer->name;
    const int width = t.layer->out_channels;
    const int d_prime = t.untouched ? width : chosen.at(name);
    if (d_prime >= width && cfg.mode == AccelMode::channel_2d) continue;
    if (t.untouched) continue;

    try {
      const SampleSet s =
          sample_layer(net, want_hat ? &approx : nullptr, t.index, data,
                       cfg.calibration.n_images, cfg.calibration.positions,
                       cfg.calibration.seed);
      if (cfg.mode == AccelMode::channel_2d) {
        Decomposition dec;
        switch (cfg.solver) {
          case SolverKind::linear:
            dec = solve_linear(s, d_prime);
            break;
          case SolverKind::nonlinear:
            dec = solve_nonlinear(s, d_prime, cfg.schedule, t.layer->nonlinearity,
                                  nullptr, cfg.ridge);
            break;
          case SolverKind::asymmetric:
            dec = solve_asymmetric(s, t.layer->weights, d_prime, cfg.schedule,
                                   t.layer->nonlinearity, nullptr, cfg.ridge);
            break;
        }
        auto [a, b] = build_layers(*t.layer, dec);
        result.objective_traces[name] = dec.objective_trace;
        detail::splice(approx, name, {Layer(std::move(a)), Layer(std::move(b))});
      } else {
        Spliced3d sp = accelerate_3d(*t.layer, s, r, d_prime, cfg.schedule, cfg.solver,
                                     spatial, t.dd, cfg.ridge);
        result.objective_traces[name] = sp.channel.objective_trace;
        result.spatial_widths[name] = t.dd;
        detail::splice(approx, name,
                       {Layer(std::move(sp.vertical)), Layer(std::move(sp.reduced)),
                        Layer(std::move(sp.expand))});
      }
    } catch (const NumericalError& e) {
      throw NumericalError("layer '" + name + "': " + e.what());
    }
    if (cfg.after_layer) cfg.after_layer(name, approx);
  }
  validate_net(approx, input);

  result.plan.target_speedup = r;
  result.plan.objective = objective;
  result.plan.log_objective = log_objective;
  for (const auto& t : targets)
    result.plan.ranks[t.layer->name] =
        t.untouched ? t.layer->out_channels : chosen.at(t.layer->name);
  {
    const std::vector<std::uint64_t> om = net_multiplies(net, input);
    const std::vector<std::uint64_t> am = net_multiplies(approx, input);
    const double orig = double(std::accumulate(om.begin(), om.end(), std::uint64_t(0)));
    const double now = double(std::accumulate(am.begin(), am.end(), std::uint64_t(0)));
    result.plan.achieved_speedup = now > 0.0 ? orig / now : 1.0;
  }

  result.net = std::move(approx);
  result.eval = evaluate(net, result.net, data);
  return result;
}

// ---------------------------------------------------------------- reports

inline json eval_to_json(const EvalReport& r) {
  json j;
  j["format"] = "lraccel-eval";
  j["version"] = 1;
  j["agreement"] = r.agreement;
  j["mean_abs_deviation"] = r.mean_abs_deviation;
  j["theoretical_speedup"] = r.theoretical_speedup;
  j["measured_speedup"] = r.measured_speedup;
  j["images"] = r.images;
  j["layer_errors"] = json::array();
  for (const auto& [name, err] : r.layer_errors)
    j["layer_errors"].push_back({{"layer", name}, {"relative_frobenius", err}});
  return j;
}

inline json bench_to_json(const BenchReport& r) {
  json j;
  j["format"] = "lraccel-bench";
  j["version"] = 1;
  j["median_ms"] = r.median_ms;
  j["ref_median_ms"] = r.ref_median_ms;
  j["measured_speedup"] = r.measured_speedup;
  j["theoretical_speedup"] = r.theoretical_speedup;
  j["total_multiplies"] = r.total_multiplies;
  j["ref_total_multiplies"] = r.ref_total_multiplies;
  j["layers"] = json::array();
  for (const auto& [name, count] : r.layer_multiply_counts)
    j["layers"].push_back({{"layer", name}, {"multiplies", count}});
  return j;
}

inline json accel_report_to_json(const AccelResult& r) {
  json j;
  j["format"] = "lraccel-report";
  j["version"] = 1;
  j["plan"] = plan_to_json(r.plan);
  j["eval"] = eval_to_json(r.eval);
  j["objective_traces"] = r.objective_traces;
  if (!r.spatial_widths.empty()) j["spatial_widths"] = r.spatial_widths;
  return j;
}

}  // namespace lraccel
