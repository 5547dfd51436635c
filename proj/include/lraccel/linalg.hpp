#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "lraccel/common.hpp"

namespace lraccel {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct EigResult {
  MatrixXd U;        // columns are eigenvectors, matching order
  VectorXd values;   // descending
};

// dense symmetric eigendecomposition; input must be symmetric to 1e-8
inline EigResult sym_eig(const MatrixXd& S) {
  require(S.rows() == S.cols(), "sym_eig: matrix not square");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  require((S - S.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * scale,
          "sym_eig: matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver((S + S.transpose()) * 0.5);
  if (solver.info() != Eigen::Success)
    throw NumericalError("sym_eig: eigensolver failed to converge");
  EigResult out;
  out.U = solver.eigenvectors().rowwise().reverse();
  out.values = solver.eigenvalues().reverse();
  return out;
}

struct SvdResult {
  MatrixXd U;
  VectorXd S;  // descending
  MatrixXd V;
};

inline SvdResult svd(const MatrixXd& A) {
  Eigen::BDCSVD<MatrixXd> solver(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (solver.info() != Eigen::Success)
    throw NumericalError("svd: decomposition failed");
  return {solver.matrixU(), solver.singularValues(), solver.matrixV()};
}

// ---------------------------------------------------------------- rrr

struct RrrSolution {
  MatrixXd M;  // Z.rows() x Y.rows(), rank <= requested
  int rank = 0;
  MatrixXd U;  // orthonormal columns
  VectorXd S;
  MatrixXd V;  // generalized-orthonormal: V^T (YY^T + ridge I) V == I
};

// sentinel: pick ridge = 1e-6 * trace(YY^T) / d
constexpr double kAutoRidge = -1.0;

namespace detail {

// whitening transform of a gram matrix G = YY^T (+ ridge):
// G = E diag(l) E^T, Ew = E diag(l)^-1/2 with near-null directions zeroed
struct Whitener {
  MatrixXd Ew;
};

inline Whitener make_whitener(MatrixXd G, double ridge, bool pseudo) {
  const int d = static_cast<int>(G.rows());
  if (ridge == kAutoRidge) ridge = 1e-6 * G.trace() / d;
  require(ridge >= 0.0, "rrr: negative ridge");
  if (ridge > 0.0) G.diagonal().array() += ridge;

  EigResult eig = sym_eig(G);
  const double lmax = eig.values(0);
  const double floor = 1e-12 * std::max(lmax, 0.0);
  if (!pseudo && ridge == 0.0 && (lmax <= 0.0 || eig.values(d - 1) <= floor))
    throw NumericalError("rrr: YY^T numerically singular and ridge is zero");

  VectorXd w(d);
  for (int i = 0; i < d; ++i)
    w(i) = eig.values(i) > floor && eig.values(i) > 0.0
               ? 1.0 / std::sqrt(eig.values(i))
               : 0.0;
  return {eig.U * w.asDiagonal()};
}

// rank-constrained least squares  min ||Z - M Y||_F  given the whitener of
// YY^T and the cross matrix Z Y^T: M = truncated-SVD(Z Y^T Ew) un-whitened
inline RrrSolution rrr_from_cross(const Whitener& wh, const MatrixXd& ZYt, int d_prime) {
  MatrixXd T = ZYt * wh.Ew;
  SvdResult tsvd = svd(T);

  int rank = 0;
  while (rank < d_prime && tsvd.S(rank) > 0.0) ++rank;

  RrrSolution out;
  out.rank = rank;
  out.U = tsvd.U.leftCols(rank);
  out.S = tsvd.S.head(rank);
  out.V = wh.Ew * tsvd.V.leftCols(rank);
  out.M = rank > 0 ? MatrixXd(out.U * out.S.asDiagonal() * out.V.transpose())
                   : MatrixXd::Zero(ZYt.rows(), ZYt.cols());
  return out;
}

inline RrrSolution rrr_engine(const MatrixXd& Y, const MatrixXd& Z, int d_prime,
                              double ridge, bool pseudo) {
  require(Y.cols() == Z.cols(), "rrr: Y and Z sample counts differ");
  require(Y.cols() > 0, "rrr: empty sample set");
  const int dy = static_cast<int>(Y.rows());
  const int dz = static_cast<int>(Z.rows());
  require(d_prime >= 1 && d_prime <= std::min(dy, dz), "rrr: rank out of range");
  Whitener wh = make_whitener(Y * Y.transpose(), ridge, pseudo);
  return rrr_from_cross(wh, Z * Y.transpose(), d_prime);
}

}  // namespace detail

inline RrrSolution reduced_rank_regression(const MatrixXd& Y, const MatrixXd& Z,
                                           int d_prime, double ridge = kAutoRidge) {
  return detail::rrr_engine(Y, Z, d_prime, ridge, /*pseudo=*/false);
}

// P Q^T == M with P = U sqrt(S), Q = V sqrt(S); M must have rank <= d_prime
inline std::pair<MatrixXd, MatrixXd> split_m(const MatrixXd& M, int d_prime) {
  require(d_prime >= 1 && d_prime <= std::min(M.rows(), M.cols()),
          "split_m: rank out of range");
  SvdResult s = svd(M);
  const double smax = s.S(0);
  if (d_prime < s.S.size() && s.S(d_prime) > 1e-8 * std::max(smax, 1e-300))
    throw NumericalError("split_m: matrix has effective rank above the requested split");
  VectorXd root = s.S.head(d_prime).cwiseMax(0.0).cwiseSqrt();
  MatrixXd P = s.U.leftCols(d_prime) * root.asDiagonal();
  MatrixXd Q = s.V.leftCols(d_prime) * root.asDiagonal();
  return {P, Q};
}

}  // namespace lraccel
