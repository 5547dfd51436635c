#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <variant>
#include <vector>

#include "lraccel/common.hpp"

namespace lraccel {

enum class Nonlinearity { identity, relu };

inline float relu(float x) { return x > 0.0f ? x : 0.0f; }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double apply_nonlinearity(Nonlinearity nl, double x) {
  return nl == Nonlinearity::relu ? relu(x) : x;
}

using MatF = Eigen::MatrixXf;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// dense activation volume, data laid out [channel][row][col]
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

  float& at(int ch, int row, int col) {
    return data[(static_cast<std::size_t>(ch) * height + row) * width + col];
  }
  const float& at(int ch, int row, int col) const {
    return data[(static_cast<std::size_t>(ch) * height + row) * width + col];
  }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
};

inline bool all_finite(const FeatureMap& fm) {
  for (float v : fm.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// convolution descriptor; weights are d x (kh*kw*c + 1), one filter per row,
// laid out channel-major then filter row then filter column, bias last
struct ConvLayer {
  std::string name;
  int kh = 1, kw = 1;
  int in_channels = 0, out_channels = 0;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  MatF weights;

  int patch_len() const { return kh * kw * in_channels + 1; }
};

struct PoolLayer {
  std::string name;
  int window = 2;
  int stride = 2;
};

struct FlattenLayer {
  std::string name;
};

struct DenseLayer {
  std::string name;
  Nonlinearity nonlinearity = Nonlinearity::identity;
  MatF weights;           // out x in
  Eigen::VectorXf bias;   // out
};

using Layer = std::variant<ConvLayer, PoolLayer, FlattenLayer, DenseLayer>;

struct Net {
  std::vector<Layer> layers;
};

inline const std::string& layer_name(const Layer& layer) {
  return std::visit([](const auto& l) -> const std::string& { return l.name; }, layer);
}

// spliced layers keep the original layer's name plus a ".suffix"
inline std::string base_name(const std::string& name) {
  auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

// ---------------------------------------------------------------- shapes

struct Shape {
  int channels = 0, height = 0, width = 0;

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.channels == b.channels && a.height == b.height && a.width == b.width;
  }
  friend bool operator!=(const Shape& a, const Shape& b) { return !(a == b); }
};

inline Shape conv_out_shape(const ConvLayer& l, const Shape& in) {
  require(in.channels == l.in_channels,
          "conv '" + l.name + "': input has " + std::to_string(in.channels) +
              " channels, layer expects " + std::to_string(l.in_channels));
  int h = (in.height + 2 * l.pad_h - l.kh) / l.stride_h + 1;
  int w = (in.width + 2 * l.pad_w - l.kw) / l.stride_w + 1;
  require(h > 0 && w > 0, "conv '" + l.name + "': window larger than padded input");
  return {l.out_channels, h, w};
}

inline Shape pool_out_shape(const PoolLayer& l, const Shape& in) {
  require(in.height >= l.window && in.width >= l.window,
          "pool '" + l.name + "': window larger than input");
  int h = static_cast<int>(std::ceil(double(in.height - l.window) / l.stride)) + 1;
  int w = static_cast<int>(std::ceil(double(in.width - l.window) / l.stride)) + 1;
  return {in.channels, h, w};
}

inline Shape layer_out_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          return conv_out_shape(l, in);
        } else if constexpr (std::is_same_v<T, PoolLayer>) {
          return pool_out_shape(l, in);
        } else if constexpr (std::is_same_v<T, FlattenLayer>) {
          return {in.channels * in.height * in.width, 1, 1};
        } else {
          require(l.weights.cols() == std::int64_t(in.channels) * in.height * in.width,
                  "dense '" + l.name + "': weight columns do not match input size");
          return {static_cast<int>(l.weights.rows()), 1, 1};
        }
      },
      layer);
}

// shape after every layer; index i is the output of layers[i]
inline std::vector<Shape> net_shapes(const Net& net, const Shape& input) {
  std::vector<Shape> out;
  out.reserve(net.layers.size());
  Shape cur = input;
  for (const auto& layer : net.layers) {
    cur = layer_out_shape(layer, cur);
    out.push_back(cur);
  }
  return out;
}

inline void validate_net(const Net& net, const Shape& input) {
  for (const auto& layer : net.layers) {
    require(!layer_name(layer).empty(), "net: every layer needs a name");
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      require(c->kh >= 1 && c->kw >= 1 && c->stride_h >= 1 && c->stride_w >= 1 &&
                  c->pad_h >= 0 && c->pad_w >= 0,
              "conv '" + c->name + "': bad geometry");
      require(c->weights.rows() == c->out_channels && c->weights.cols() == c->patch_len(),
              "conv '" + c->name + "': weight matrix is " + std::to_string(c->weights.rows()) +
                  "x" + std::to_string(c->weights.cols()) + ", expected " +
                  std::to_string(c->out_channels) + "x" + std::to_string(c->patch_len()));
    }
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    for (std::size_t j = i + 1; j < net.layers.size(); ++j)
      require(layer_name(net.layers[i]) != layer_name(net.layers[j]),
              "net: duplicate layer name '" + layer_name(net.layers[i]) + "'");
  net_shapes(net, input);  // throws on any chaining mismatch
}

// ---------------------------------------------------------------- patches

inline FeatureMap pad_map(const FeatureMap& fm, int pad_h, int pad_w) {
  if (pad_h == 0 && pad_w == 0) return fm;
  FeatureMap out(fm.channels, fm.height + 2 * pad_h, fm.width + 2 * pad_w);
  for (int ch = 0; ch < fm.channels; ++ch)
    for (int r = 0; r < fm.height; ++r)
      std::memcpy(&out.at(ch, r + pad_h, pad_w), &fm.at(ch, r, 0),
                  sizeof(float) * fm.width);
  return out;
}

// column vector [x; 1] for the window anchored at (row, col); the window
// must lie fully inside fm (apply pad_map first if the layer pads)
inline std::vector<float> extract_patch(const FeatureMap& fm, int row, int col,
                                        int kh, int kw) {
  require(row >= 0 && col >= 0 && row + kh <= fm.height && col + kw <= fm.width,
          "extract_patch: window [" + std::to_string(row) + "," + std::to_string(col) +
              "]+" + std::to_string(kh) + "x" + std::to_string(kw) +
              " leaves the map");
  std::vector<float> patch(static_cast<std::size_t>(kh) * kw * fm.channels + 1);
  std::size_t idx = 0;
  for (int ch = 0; ch < fm.channels; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) patch[idx++] = fm.at(ch, row + i, col + j);
  patch[idx] = 1.0f;
  return patch;
}

inline std::vector<float> extract_patch(const FeatureMap& fm, int row, int col, int k) {
  return extract_patch(fm, row, col, k, k);
}

// patch matrix, one column [x; 1] per output position in row-major position order
inline MatF im2col(const FeatureMap& padded, int kh, int kw, int stride_h, int stride_w,
                   int out_h, int out_w) {
  const int plen = kh * kw * padded.channels + 1;
  MatF cols(plen, std::int64_t(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const std::int64_t p = std::int64_t(oy) * out_w + ox;
      float* dst = cols.col(p).data();
      std::size_t idx = 0;
      for (int ch = 0; ch < padded.channels; ++ch)
        for (int i = 0; i < kh; ++i) {
          const float* src = &padded.at(ch, oy * stride_h + i, ox * stride_w);
          for (int j = 0; j < kw; ++j) dst[idx++] = src[j];
        }
      dst[idx] = 1.0f;
    }
  }
  return cols;
}

// ---------------------------------------------------------------- forward

inline FeatureMap conv_forward(const ConvLayer& l, const FeatureMap& fm) {
  Shape out_shape = conv_out_shape(l, {fm.channels, fm.height, fm.width});
  RowMatF result;  // d x positions
  if (l.kh == 1 && l.kw == 1 && l.stride_h == 1 && l.stride_w == 1 &&
      l.pad_h == 0 && l.pad_w == 0) {
    // pointwise convolution: the patch matrix is the feature map itself, so
    // multiply in place instead of staging a copy of the whole map
    Eigen::Map<const RowMatF> x(fm.data.data(), fm.channels,
                                std::int64_t(fm.height) * fm.width);
    result.noalias() = l.weights.leftCols(fm.channels) * x;
    result.colwise() += l.weights.col(fm.channels);
  } else {
    FeatureMap padded_store;
    const FeatureMap* padded = &fm;
    if (l.pad_h || l.pad_w) {
      padded_store = pad_map(fm, l.pad_h, l.pad_w);
      padded = &padded_store;
    }
    MatF cols = im2col(*padded, l.kh, l.kw, l.stride_h, l.stride_w,
                       out_shape.height, out_shape.width);
    result.noalias() = l.weights * cols;
  }
  if (l.nonlinearity == Nonlinearity::relu)
    result = result.cwiseMax(0.0f);
  FeatureMap out(out_shape.channels, out_shape.height, out_shape.width);
  std::memcpy(out.data.data(), result.data(), sizeof(float) * out.data.size());
  if (!all_finite(out))
    throw NumericalError("conv '" + l.name + "': non-finite output");
  return out;
}

inline FeatureMap pool_forward(const PoolLayer& l, const FeatureMap& fm) {
  Shape s = pool_out_shape(l, {fm.channels, fm.height, fm.width});
  FeatureMap out(s.channels, s.height, s.width);
  for (int ch = 0; ch < fm.channels; ++ch)
    for (int oy = 0; oy < s.height; ++oy)
      for (int ox = 0; ox < s.width; ++ox) {
        const int r0 = oy * l.stride, c0 = ox * l.stride;
        const int r1 = std::min(r0 + l.window, fm.height);
        const int c1 = std::min(c0 + l.window, fm.width);
        float m = fm.at(ch, r0, c0);
        for (int r = r0; r < r1; ++r)
          for (int c = c0; c < c1; ++c) m = std::max(m, fm.at(ch, r, c));
        out.at(ch, oy, ox) = m;
      }
  return out;
}

inline FeatureMap dense_forward(const DenseLayer& l, const FeatureMap& fm) {
  require(l.weights.cols() == fm.size(),
          "dense '" + l.name + "': input size mismatch");
  Eigen::Map<const Eigen::VectorXf> x(fm.data.data(), fm.size());
  Eigen::VectorXf y = l.weights * x + l.bias;
  if (l.nonlinearity == Nonlinearity::relu) y = y.cwiseMax(0.0f);
  FeatureMap out(static_cast<int>(y.size()), 1, 1);
  std::memcpy(out.data.data(), y.data(), sizeof(float) * y.size());
  if (!all_finite(out))
    throw NumericalError("dense '" + l.name + "': non-finite output");
  return out;
}

inline FeatureMap layer_forward(const Layer& layer, const FeatureMap& fm) {
  return std::visit(
      [&](const auto& l) -> FeatureMap {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          return conv_forward(l, fm);
        } else if constexpr (std::is_same_v<T, PoolLayer>) {
          return pool_forward(l, fm);
        } else if constexpr (std::is_same_v<T, FlattenLayer>) {
          FeatureMap out = fm;
          out.channels = fm.channels * fm.height * fm.width;
          out.height = out.width = 1;
          return out;
        } else {
          return dense_forward(l, fm);
        }
      },
      layer);
}

// forward through layers [0, count)
inline FeatureMap net_forward_prefix(const Net& net, FeatureMap fm, std::size_t count) {
  require(count <= net.layers.size(), "net_forward_prefix: count out of range");
  for (std::size_t i = 0; i < count; ++i) fm = layer_forward(net.layers[i], fm);
  return fm;
}

inline FeatureMap net_forward(const Net& net, FeatureMap fm) {
  return net_forward_prefix(net, std::move(fm), net.layers.size());
}

// ---------------------------------------------------------------- op counts

// multiplies per forward pass; bias adds are not multiplies
inline std::uint64_t conv_multiplies(const ConvLayer& l, const Shape& in) {
  Shape out = conv_out_shape(l, in);
  return std::uint64_t(l.out_channels) * l.kh * l.kw * l.in_channels * out.height * out.width;
}

inline std::uint64_t layer_multiplies(const Layer& layer, const Shape& in) {
  if (const auto* c = std::get_if<ConvLayer>(&layer)) return conv_multiplies(*c, in);
  if (const auto* d = std::get_if<DenseLayer>(&layer))
    return std::uint64_t(d->weights.rows()) * d->weights.cols();
  return 0;
}

inline std::vector<std::uint64_t> net_multiplies(const Net& net, const Shape& input) {
  std::vector<std::uint64_t> out;
  out.reserve(net.layers.size());
  Shape cur = input;
  for (const auto& layer : net.layers) {
    out.push_back(layer_multiplies(layer, cur));
    cur = layer_out_shape(layer, cur);
  }
  return out;
}

}  // namespace lraccel
