#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/linalg.hpp"
#include "lraccel/model_io.hpp"
#include "lraccel/sampler.hpp"

namespace lraccel {

// response spectrum of one layer plus its share of the network's work;
// eigenvalues are those of the centered response Gram matrix, descending
struct LayerSpectrum {
  int layer_index = -1;
  std::string name;
  Eigen::VectorXd eigenvalues;
  double complexity = 0.0;

  int channels() const { return int(eigenvalues.size()); }
};

inline LayerSpectrum layer_spectrum(const SampleSet& s, double complexity) {
  require(s.Y.cols() >= 2, "layer_spectrum: need at least two samples");
  const Eigen::VectorXd ybar = s.Y.rowwise().mean();
  const Eigen::MatrixXd Yc = s.Y.colwise() - ybar;
  EigResult eig = sym_eig(Yc * Yc.transpose());
  LayerSpectrum out;
  out.layer_index = s.layer_index;
  out.name = s.layer_name;
  out.eigenvalues = eig.values.cwiseMax(0.0);
  out.complexity = complexity;
  return out;
}

// ---------------------------------------------------------------- selection

struct RankSelection {
  std::vector<int> ranks;  // aligned with the spectra argument
  double cost = 0.0;       // sum (d'_l / d_l) complexity_l under the plan
  double full_cost = 0.0;  // sum of complexities at full rank
  double log_objective = 0.0;
  double objective = 0.0;
};

// product of kept-eigenvalue sums; the log form survives deep networks
inline double log_objective_energy(const std::vector<LayerSpectrum>& spectra,
                                   const std::vector<int>& ranks) {
  require(spectra.size() == ranks.size(), "objective: rank list length mismatch");
  double log_sum = 0.0;
  for (std::size_t l = 0; l < spectra.size(); ++l) {
    require(ranks[l] >= 1 && ranks[l] <= spectra[l].channels(),
            "objective: rank out of range for '" + spectra[l].name + "'");
    const double kept = spectra[l].eigenvalues.head(ranks[l]).sum();
    log_sum += std::log(std::max(kept, 1e-300));
  }
  return log_sum;
}

inline double objective_energy(const std::vector<LayerSpectrum>& spectra,
                               const std::vector<int>& ranks) {
  return std::exp(log_objective_energy(spectra, ranks));
}

// walks ranks down from full, each step dropping the eigenvalue with the
// least relative contribution per unit of complexity saved, until the plan
// cost fits the budget.  frozen layers keep their given rank; a frozen rank
// at or above the layer's size means "leave this layer alone".
inline RankSelection select_ranks(const std::vector<LayerSpectrum>& spectra,
                                  double budget,
                                  const std::map<std::string, int>& frozen = {}) {
  require(!spectra.empty(), "select_ranks: no spectra");
  require(budget > 0.0, "select_ranks: budget must be positive");

  const int L = int(spectra.size());
  std::vector<int> ranks(spectra.size());
  std::vector<bool> fixed(spectra.size(), false);
  for (int l = 0; l < L; ++l) {
    const auto& sp = spectra[std::size_t(l)];
    require(sp.channels() >= 1, "select_ranks: empty spectrum for '" + sp.name + "'");
    require(sp.complexity > 0.0,
            "select_ranks: nonpositive complexity for '" + sp.name + "'");
    ranks[std::size_t(l)] = sp.channels();
    auto it = frozen.find(sp.name);
    if (it != frozen.end()) {
      require(it->second >= 1, "select_ranks: frozen rank for '" + sp.name +
                                   "' must be at least 1");
      ranks[std::size_t(l)] = std::min(it->second, sp.channels());
      fixed[std::size_t(l)] = true;
    }
  }
  for (const auto& [name, rank] : frozen) {
    bool known = false;
    for (const auto& sp : spectra) known = known || sp.name == name;
    require(known, "select_ranks: frozen layer '" + name + "' has no spectrum");
  }

  auto plan_cost = [&] {
    double c = 0.0;
    for (int l = 0; l < L; ++l)
      c += double(ranks[std::size_t(l)]) / spectra[std::size_t(l)].channels() *
           spectra[std::size_t(l)].complexity;
    return c;
  };

  RankSelection out;
  for (const auto& sp : spectra) out.full_cost += sp.complexity;

  while (plan_cost() > budget) {
    int pick = -1;
    double pick_measure = 0.0;
    for (int l = 0; l < L; ++l) {
      const auto& sp = spectra[std::size_t(l)];
      const int r = ranks[std::size_t(l)];
      if (fixed[std::size_t(l)] || r <= 1) continue;
      const double kept = sp.eigenvalues.head(r).sum();
      const double drop_fraction = kept > 0.0 ? sp.eigenvalues(r - 1) / kept : 0.0;
      const double saving = sp.complexity / sp.channels();
      const double measure = drop_fraction / saving;
      if (pick < 0 || measure < pick_measure) {
        pick = l;
        pick_measure = measure;
      }
    }
    if (pick < 0)
      throw InputError("select_ranks: budget " + std::to_string(budget) +
                       " is infeasible even at minimum ranks");
    --ranks[std::size_t(pick)];
  }

  out.ranks = ranks;
  out.cost = plan_cost();
  out.log_objective = log_objective_energy(spectra, ranks);
  out.objective = std::exp(out.log_objective);
  return out;
}

// ---------------------------------------------------------------- files

inline json spectrum_to_json(const LayerSpectrum& sp) {
  json j;
  j["format"] = "lraccel-spectrum";
  j["version"] = 1;
  j["layer_index"] = sp.layer_index;
  j["name"] = sp.name;
  j["complexity"] = sp.complexity;
  j["eigenvalues"] = std::vector<double>(sp.eigenvalues.begin(), sp.eigenvalues.end());
  return j;
}

inline LayerSpectrum spectrum_from_json(const json& j, const std::string& ctx) {
  if (j.value("format", "") != "lraccel-spectrum")
    throw InputError(ctx + ": not a spectrum file");
  LayerSpectrum sp;
  sp.layer_index = j.at("layer_index").get<int>();
  sp.name = j.at("name").get<std::string>();
  sp.complexity = j.at("complexity").get<double>();
  auto vals = j.at("eigenvalues").get<std::vector<double>>();
  sp.eigenvalues = Eigen::Map<const Eigen::VectorXd>(vals.data(), long(vals.size()));
  return sp;
}

inline void save_spectrum(const LayerSpectrum& sp, const fs::path& path) {
  write_json_file(path, spectrum_to_json(sp));
}

inline LayerSpectrum load_spectrum(const fs::path& path) {
  return spectrum_from_json(read_json_file(path), path.string());
}

// chosen rank per layer name plus bookkeeping for reports
struct RankPlan {
  double target_speedup = 0.0;
  double achieved_speedup = 0.0;
  double objective = 0.0;
  double log_objective = 0.0;
  std::map<std::string, int> ranks;
};

inline json plan_to_json(const RankPlan& p) {
  json j;
  j["format"] = "lraccel-plan";
  j["version"] = 1;
  j["target_speedup"] = p.target_speedup;
  j["achieved_speedup"] = p.achieved_speedup;
  j["objective"] = p.objective;
  j["log_objective"] = p.log_objective;
  j["ranks"] = p.ranks;
  return j;
}

inline RankPlan plan_from_json(const json& j, const std::string& ctx) {
  if (j.value("format", "") != "lraccel-plan")
    throw InputError(ctx + ": not a rank plan file");
  RankPlan p;
  p.target_speedup = j.value("target_speedup", 0.0);
  p.achieved_speedup = j.value("achieved_speedup", 0.0);
  p.objective = j.value("objective", 0.0);
  p.log_objective = j.value("log_objective", 0.0);
  p.ranks = j.at("ranks").get<std::map<std::string, int>>();
  return p;
}

inline void save_plan(const RankPlan& p, const fs::path& path) {
  write_json_file(path, plan_to_json(p));
}

inline RankPlan load_plan(const fs::path& path) {
  return plan_from_json(read_json_file(path), path.string());
}

}  // namespace lraccel
