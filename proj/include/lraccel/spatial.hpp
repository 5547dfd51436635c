#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "lraccel/common.hpp"
#include "lraccel/decompose.hpp"
#include "lraccel/linalg.hpp"
#include "lraccel/sampler.hpp"
#include "lraccel/tensor.hpp"

namespace lraccel {

// one convolution split into a vertical (kh x 1) and a horizontal (1 x kw)
// pass through dd intermediate maps; composing them applies the best
// rank-dd approximation of the filter bank in the separable sense
struct SpatialSplit {
  ConvLayer vertical;    // kh x 1, dd outputs, identity, zero bias
  ConvLayer horizontal;  // 1 x kw, original outputs, original bias
  Eigen::VectorXd singular_values;
};

// filters rearranged so separable structure becomes low matrix rank:
// A[(ch kh + i), (j d + f)] = w[f][ch][i][j]
inline Eigen::MatrixXd filter_matrix(const ConvLayer& l) {
  Eigen::MatrixXd A(l.in_channels * l.kh, l.kw * l.out_channels);
  for (int f = 0; f < l.out_channels; ++f)
    for (int ch = 0; ch < l.in_channels; ++ch)
      for (int i = 0; i < l.kh; ++i)
        for (int j = 0; j < l.kw; ++j)
          A(ch * l.kh + i, j * l.out_channels + f) =
              l.weights(f, (ch * l.kh + i) * l.kw + j);
  return A;
}

inline SpatialSplit spatial_decompose(const ConvLayer& l, int dd) {
  const int max_dd = std::min(l.in_channels * l.kh, l.kw * l.out_channels);
  require(dd >= 1 && dd <= max_dd,
          "spatial_decompose: intermediate width out of range for '" + l.name + "'");

  SvdResult f = svd(filter_matrix(l));

  SpatialSplit out;
  out.singular_values = f.S;
  const Eigen::VectorXd root = f.S.head(dd).cwiseMax(0.0).cwiseSqrt();

  ConvLayer& v = out.vertical;
  v.name = l.name + ".v";
  v.kh = l.kh;
  v.kw = 1;
  v.in_channels = l.in_channels;
  v.out_channels = dd;
  v.stride_h = l.stride_h;
  v.stride_w = 1;
  v.pad_h = l.pad_h;
  v.pad_w = 0;
  v.nonlinearity = Nonlinearity::identity;
  v.weights = MatF::Zero(dd, v.patch_len());
  for (int m = 0; m < dd; ++m)
    for (int q = 0; q < l.in_channels * l.kh; ++q)
      v.weights(m, q) = float(f.U(q, m) * root(m));

  ConvLayer& h = out.horizontal;
  h.name = l.name + ".h";
  h.kh = 1;
  h.kw = l.kw;
  h.in_channels = dd;
  h.out_channels = l.out_channels;
  h.stride_h = 1;
  h.stride_w = l.stride_w;
  h.pad_h = 0;
  h.pad_w = l.pad_w;
  h.nonlinearity = l.nonlinearity;
  h.weights = MatF::Zero(l.out_channels, h.patch_len());
  for (int fo = 0; fo < l.out_channels; ++fo) {
    for (int m = 0; m < dd; ++m)
      for (int j = 0; j < l.kw; ++j)
        h.weights(fo, m * l.kw + j) =
            float(f.V(j * l.out_channels + fo, m) * root(m));
    h.weights(fo, h.patch_len() - 1) = l.weights(fo, l.patch_len() - 1);
  }
  return out;
}

// intermediate width balancing the two passes' work for a spatial-stage
// speedup of s on a kh = kw = k layer
inline int choose_dd(int c, int d, int k, double s) {
  require(c >= 1 && d >= 1 && k >= 1, "choose_dd: bad layer size");
  require(s > 0.0, "choose_dd: speedup must be positive");
  const int dd = int(std::llround(double(d) * k * c / (s * (c + d))));
  return std::clamp(dd, 1, std::min(c * k, k * d));
}

// general-kernel form: balances dd*(kh*c + kw*d) against d*kh*kw*c / s;
// reduces to the square-kernel formula when kh == kw
inline int choose_dd(const ConvLayer& l, double s) {
  require(s > 0.0, "choose_dd: speedup must be positive");
  const double num = double(l.out_channels) * l.kh * l.kw * l.in_channels;
  const double den = s * (double(l.kh) * l.in_channels + double(l.kw) * l.out_channels);
  const int dd = int(std::llround(num / den));
  return std::clamp(dd, 1, std::min(l.in_channels * l.kh, l.kw * l.out_channels));
}

// columns for the horizontal layer cut from full kh x kw patch columns:
// each original window, pushed through the vertical filters column by column
inline Eigen::MatrixXd horizontal_patches(const SpatialSplit& split,
                                          const Eigen::MatrixXd& X) {
  const ConvLayer& v = split.vertical;
  const ConvLayer& h = split.horizontal;
  const int rows = v.in_channels * v.kh;  // per original-patch column
  require(X.rows() == std::int64_t(rows) * h.kw + 1,
          "horizontal_patches: patch rows do not match the split layer");

  const Eigen::MatrixXd Vcore =
      v.weights.leftCols(rows).cast<double>();  // dd x (c kh)
  Eigen::MatrixXd out(h.patch_len(), X.cols());
  Eigen::MatrixXd col_slice(rows, X.cols());
  for (int j = 0; j < h.kw; ++j) {
    for (int q = 0; q < rows; ++q) col_slice.row(q) = X.row(q * h.kw + j);
    const Eigen::MatrixXd vj = Vcore * col_slice;  // dd x n
    for (int m = 0; m < v.out_channels; ++m) out.row(m * h.kw + j) = vj.row(m);
  }
  out.row(h.patch_len() - 1).setOnes();
  return out;
}

// ---------------------------------------------------------------- 3d splice

// separable split plus a channel-step decomposition of the horizontal pass;
// with the asymmetric solver the channel step regresses toward the original
// layer's responses, absorbing both the spatial truncation and any error
// already present in the sampled inputs
struct Spliced3d {
  ConvLayer vertical;  // ".v"
  ConvLayer reduced;   // ".a"
  ConvLayer expand;    // ".b"
  Decomposition channel;
};

// spatial_speedup > 0 overrides the default even split (each stage
// contributing sqrt(r)); dd_override > 0 pins the intermediate width directly
inline Spliced3d accelerate_3d(const ConvLayer& l, const SampleSet& s, double r,
                               int d_prime, const SolverSchedule& schedule,
                               SolverKind kind = SolverKind::asymmetric,
                               double spatial_speedup = 0.0, int dd_override = 0,
                               double ridge = 0.0) {
  require(s.X.rows() == l.patch_len(),
          "accelerate_3d: sample patches do not match layer '" + l.name + "'");
  require(d_prime >= 1 && d_prime <= l.out_channels,
          "accelerate_3d: channel rank out of range for '" + l.name + "'");

  int dd = dd_override;
  if (dd <= 0) {
    require(r > 1.0 || spatial_speedup > 0.0,
            "accelerate_3d: target speedup must exceed 1 for '" + l.name + "'");
    const double s_sp = spatial_speedup > 0.0 ? spatial_speedup : std::sqrt(r);
    dd = choose_dd(l, s_sp);
  }

  SpatialSplit split = spatial_decompose(l, dd);
  const Eigen::MatrixXd Xh_reg =
      horizontal_patches(split, s.has_x_hat() ? s.X_hat : s.X);

  SampleSet hs;
  hs.layer_index = s.layer_index;
  hs.layer_name = l.name;
  hs.seed = s.seed;

  Decomposition dec;
  if (kind == SolverKind::asymmetric) {
    hs.Y = s.Y;  // targets stay the original layer's responses
    hs.X = Xh_reg;
    hs.X_hat = Xh_reg;
    dec = solve_asymmetric(hs, split.horizontal.weights, d_prime, schedule,
                           l.nonlinearity, nullptr, ridge);
  } else {
    hs.X = Xh_reg;
    hs.Y = split.horizontal.weights.cast<double>() * Xh_reg;
    dec = kind == SolverKind::linear
              ? solve_linear(hs, d_prime)
              : solve_nonlinear(hs, d_prime, schedule, l.nonlinearity, nullptr, ridge);
  }

  ConvLayer base = split.horizontal;
  base.name = l.name;
  auto [a, b] = build_layers(base, dec);

  Spliced3d out;
  out.vertical = split.vertical;
  out.reduced = a;
  out.expand = b;
  out.channel = dec;
  return out;
}

}  // namespace lraccel
