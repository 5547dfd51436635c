#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/linalg.hpp"
#include "lraccel/sampler.hpp"
#include "lraccel/tensor.hpp"

namespace lraccel {

struct SolverSchedule {
  struct Stage {
    double lambda = 1.0;
    int iterations = 25;
  };
  std::vector<Stage> stages{{0.01, 25}, {1.0, 25}};
};

enum class SolverKind { linear, nonlinear, asymmetric };

// low-rank channel approximation of one layer: replaces responses y by
// P Q^T y + bias, with P Q^T of rank `rank`
struct Decomposition {
  std::string layer_name;
  int rank = 0;
  SolverKind solver = SolverKind::linear;
  Eigen::MatrixXd P;
  Eigen::MatrixXd Q;
  Eigen::VectorXd bias;
  std::vector<double> objective_trace;  // relaxed objective per outer iteration

  Eigen::MatrixXd map() const { return P * Q.transpose(); }
};

// objective values after each half-step, for convergence checks
struct SolverDiagnostics {
  struct HalfStep {
    int stage = 0;
    double lambda = 0.0;
    double after_z = 0.0;
    double after_mb = 0.0;
  };
  std::vector<HalfStep> steps;
};

// ---------------------------------------------------------------- z-step

// argmin_z (relu(y) - relu(z))^2 + lambda (z - y')^2, ties toward z1
inline double solve_z(double y, double y_prime, double lambda) {
  const double ry = relu(y);
  const double z0 = std::min(0.0, y_prime);
  const double z1 = std::max(0.0, (lambda * y_prime + ry) / (lambda + 1.0));
  const double f0 = ry * ry + lambda * (z0 - y_prime) * (z0 - y_prime);
  const double f1 = (ry - z1) * (ry - z1) + lambda * (z1 - y_prime) * (z1 - y_prime);
  return f0 < f1 ? z0 : z1;
}

// guarded grid search + refinement for nonlinearities without a closed form
template <typename R>
double solve_z_generic(R&& r, double y, double y_prime, double lambda) {
  auto f = [&](double z) {
    const double dz = r(y) - r(z);
    return dz * dz + lambda * (z - y_prime) * (z - y_prime);
  };
  double lo = std::min({y, y_prime, 0.0}) - 1.0;
  double hi = std::max({y, y_prime, 0.0}) + 1.0;
  double best = lo;
  for (int pass = 0; pass < 4; ++pass) {
    const int n = 1001;
    const double step = (hi - lo) / (n - 1);
    double best_f = f(lo);
    best = lo;
    for (int i = 1; i < n; ++i) {
      const double z = lo + i * step;
      const double v = f(z);
      if (v < best_f) {
        best_f = v;
        best = z;
      }
    }
    lo = best - step;
    hi = best + step;
  }
  return best;
}

namespace detail {

inline double elementwise_z(Nonlinearity nl, double y, double y_prime, double lambda) {
  if (nl == Nonlinearity::relu) return solve_z(y, y_prime, lambda);
  return (y + lambda * y_prime) / (1.0 + lambda);  // identity: plain quadratic
}

inline Eigen::MatrixXd apply_nl(Nonlinearity nl, const Eigen::MatrixXd& m) {
  if (nl == Nonlinearity::identity) return m;
  return m.cwiseMax(0.0);
}

inline double relaxed_objective(const Eigen::MatrixXd& R, const Eigen::MatrixXd& Z,
                                const Eigen::MatrixXd& Yp, double lambda,
                                Nonlinearity nl) {
  return (R - apply_nl(nl, Z)).squaredNorm() + lambda * (Z - Yp).squaredNorm();
}

// alternating solver for min sum (r(y) - r(M y_reg + b))^2 over rank-d'
// maps, relaxed with auxiliary variables z under the given penalty schedule
inline Decomposition solve_relaxed(const Eigen::MatrixXd& Y_true,
                                   const Eigen::MatrixXd& Y_reg, int d_prime,
                                   const SolverSchedule& schedule, Nonlinearity nl,
                                   SolverKind kind, SolverDiagnostics* diag,
                                   double ridge) {
  require(Y_true.rows() == Y_reg.rows() && Y_true.cols() == Y_reg.cols(),
          "solver: target and regressor responses must have the same shape");
  const int d = int(Y_true.rows());
  require(d_prime >= 1 && d_prime <= d, "solver: rank out of range");

  const Eigen::VectorXd ybar_reg = Y_reg.rowwise().mean();
  const Eigen::MatrixXd Yc_reg = Y_reg.colwise() - ybar_reg;
  const Whitener wh =
      make_whitener(Yc_reg * Yc_reg.transpose(), ridge, /*pseudo=*/true);

  const Eigen::MatrixXd R = apply_nl(nl, Y_true);

  // start from the data-reconstruction optimum (no nonlinearity)
  const Eigen::VectorXd ybar_true = Y_true.rowwise().mean();
  const Eigen::MatrixXd Yc_true = Y_true.colwise() - ybar_true;
  Eigen::MatrixXd M = rrr_from_cross(wh, Yc_true * Yc_reg.transpose(), d_prime).M;
  Eigen::VectorXd b = ybar_true - M * ybar_reg;

  Decomposition dec;
  dec.rank = d_prime;
  dec.solver = kind;

  Eigen::MatrixXd Z(d, Y_true.cols());
  int stage_index = 0;
  for (const auto& stage : schedule.stages) {
    require(stage.lambda > 0.0 && stage.iterations >= 0, "solver: bad schedule stage");
    for (int it = 0; it < stage.iterations; ++it) {
      Eigen::MatrixXd Yp = (M * Y_reg).colwise() + b;
      for (int j = 0; j < Z.cols(); ++j)
        for (int i = 0; i < d; ++i)
          Z(i, j) = elementwise_z(nl, Y_true(i, j), Yp(i, j), stage.lambda);
      const double after_z = relaxed_objective(R, Z, Yp, stage.lambda, nl);

      const Eigen::VectorXd zbar = Z.rowwise().mean();
      const Eigen::MatrixXd Zc = Z.colwise() - zbar;
      M = rrr_from_cross(wh, Zc * Yc_reg.transpose(), d_prime).M;
      b = zbar - M * ybar_reg;

      Yp = (M * Y_reg).colwise() + b;
      const double after_mb = relaxed_objective(R, Z, Yp, stage.lambda, nl);
      dec.objective_trace.push_back(after_mb);
      if (diag) diag->steps.push_back({stage_index, stage.lambda, after_z, after_mb});
    }
    ++stage_index;
  }

  if (!M.allFinite() || !b.allFinite())
    throw NumericalError("solver: diverged to non-finite parameters");

  auto [P, Q] = split_m(M, d_prime);
  dec.P = P;
  dec.Q = Q;
  dec.bias = b;
  return dec;
}

}  // namespace detail

// ---------------------------------------------------------------- solvers

// data reconstruction: project centered responses on their top-d' principal
// directions; P = Q = U_d', bias = ybar - M ybar
inline Decomposition solve_linear(const SampleSet& s, int d_prime) {
  const int d = int(s.Y.rows());
  require(d_prime >= 1 && d_prime <= d, "solve_linear: rank out of range");
  const Eigen::VectorXd ybar = s.Y.rowwise().mean();
  const Eigen::MatrixXd Yc = s.Y.colwise() - ybar;
  EigResult eig = sym_eig(Yc * Yc.transpose());
  Decomposition dec;
  dec.layer_name = s.layer_name;
  dec.rank = d_prime;
  dec.solver = SolverKind::linear;
  dec.P = eig.U.leftCols(d_prime);
  dec.Q = dec.P;
  dec.bias = ybar - dec.P * (dec.P.transpose() * ybar);
  return dec;
}

inline Decomposition solve_nonlinear(const SampleSet& s, int d_prime,
                                     const SolverSchedule& schedule,
                                     Nonlinearity nl = Nonlinearity::relu,
                                     SolverDiagnostics* diag = nullptr,
                                     double ridge = 0.0) {
  Decomposition dec = detail::solve_relaxed(s.Y, s.Y, d_prime, schedule, nl,
                                            SolverKind::nonlinear, diag, ridge);
  dec.layer_name = s.layer_name;
  return dec;
}

// reconstruct the true responses from responses of the approximated input:
// regressor is W x_hat, targets stay r(W x)
inline Decomposition solve_asymmetric(const SampleSet& s, const MatF& weights,
                                      int d_prime, const SolverSchedule& schedule,
                                      Nonlinearity nl = Nonlinearity::relu,
                                      SolverDiagnostics* diag = nullptr,
                                      double ridge = 0.0) {
  require(s.has_x_hat(), "solve_asymmetric: sample set lacks approximated patches");
  require(weights.cols() == s.X_hat.rows(),
          "solve_asymmetric: weight shape does not match patches");
  Eigen::MatrixXd Y_reg = weights.cast<double>() * s.X_hat;
  Decomposition dec = detail::solve_relaxed(s.Y, Y_reg, d_prime, schedule, nl,
                                            SolverKind::asymmetric, diag, ridge);
  dec.layer_name = s.layer_name;
  return dec;
}

// value of the reconstruction objective sum ||r(y) - r(M y_reg + b)||^2
inline double reconstruction_error(const Eigen::MatrixXd& Y_true,
                                   const Eigen::MatrixXd& Y_reg,
                                   const Eigen::MatrixXd& M, const Eigen::VectorXd& b,
                                   Nonlinearity nl = Nonlinearity::relu) {
  Eigen::MatrixXd Yp = (M * Y_reg).colwise() + b;
  return (detail::apply_nl(nl, Y_true) - detail::apply_nl(nl, Yp)).squaredNorm();
}

// ---------------------------------------------------------------- rewrite

// splits one convolution into [d' filters, identity] + [1x1 expansion with
// bias and the original nonlinearity]; composition computes P Q^T W x + b
inline std::pair<ConvLayer, ConvLayer> build_layers(const ConvLayer& l,
                                                    const Decomposition& dec) {
  require(l.weights.rows() == dec.P.rows(),
          "build_layers: decomposition dimension does not match layer");
  ConvLayer first;
  first.name = l.name + ".a";
  first.kh = l.kh;
  first.kw = l.kw;
  first.in_channels = l.in_channels;
  first.out_channels = dec.rank;
  first.stride_h = l.stride_h;
  first.stride_w = l.stride_w;
  first.pad_h = l.pad_h;
  first.pad_w = l.pad_w;
  first.nonlinearity = Nonlinearity::identity;
  first.weights = (dec.Q.transpose() * l.weights.cast<double>()).cast<float>();

  ConvLayer second;
  second.name = l.name + ".b";
  second.in_channels = dec.rank;
  second.out_channels = l.out_channels;
  second.nonlinearity = l.nonlinearity;
  second.weights.resize(l.out_channels, dec.rank + 1);
  second.weights.leftCols(dec.rank) = dec.P.cast<float>();
  second.weights.col(dec.rank) = dec.bias.cast<float>();
  return {first, second};
}

}  // namespace lraccel
