#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>

#include "lraccel/common.hpp"
#include "lraccel/model_io.hpp"
#include "lraccel/tensor.hpp"

namespace lraccel {

// paired calibration columns for one conv layer: X holds true input patches
// (trailing 1 included), Y = W X the true pre-nonlinearity responses, X_hat
// the same windows cut from the approximated prefix net (empty if none)
struct SampleSet {
  int layer_index = -1;
  std::string layer_name;
  std::uint64_t seed = 0;
  Eigen::MatrixXd X;
  Eigen::MatrixXd X_hat;
  Eigen::MatrixXd Y;

  int count() const { return int(X.cols()); }
  bool has_x_hat() const { return X_hat.size() > 0; }
};

// index of the first layer in `approx` whose base name matches `name`; the
// prefix [0, result) is the approximated counterpart of the original prefix
inline std::size_t approx_layer_position(const Net& approx, const std::string& name) {
  for (std::size_t i = 0; i < approx.layers.size(); ++i)
    if (base_name(layer_name(approx.layers[i])) == name) return i;
  throw InputError("approx net has no layer matching '" + name + "'");
}

// draws `positions` windows per image uniformly over the layer's output
// positions and fills one column per draw; image index and layer seed the
// substream, so the draw set is independent of any other layer's
inline SampleSet sample_layer(const Net& net, const Net* approx, int layer_index,
                              const Dataset& data, int n_images, int positions,
                              std::uint64_t seed) {
  require(layer_index >= 0 && layer_index < int(net.layers.size()),
          "sample_layer: layer index out of range");
  const auto* conv = std::get_if<ConvLayer>(&net.layers[layer_index]);
  require(conv != nullptr, "sample_layer: layer " + std::to_string(layer_index) +
                               " is not a convolution");
  require(n_images > 0 && n_images <= data.count(),
          "sample_layer: need 1..dataset size images, got " + std::to_string(n_images));
  require(positions > 0, "sample_layer: positions per image must be positive");

  const std::size_t approx_pos =
      approx ? approx_layer_position(*approx, conv->name) : 0;

  const int n = n_images * positions;
  SampleSet out;
  out.layer_index = layer_index;
  out.layer_name = conv->name;
  out.seed = seed;
  out.X.resize(conv->patch_len(), n);
  out.Y.resize(conv->out_channels, n);
  if (approx) out.X_hat.resize(conv->patch_len(), n);

  Eigen::MatrixXd W = conv->weights.cast<double>();

  parallel_for(n_images, [&](std::int64_t img) {
    FeatureMap image = load_image(data, int(img));
    FeatureMap in = net_forward_prefix(net, image, std::size_t(layer_index));
    Shape out_shape = conv_out_shape(*conv, {in.channels, in.height, in.width});
    FeatureMap padded = pad_map(in, conv->pad_h, conv->pad_w);

    FeatureMap padded_hat;
    if (approx) {
      FeatureMap in_hat = net_forward_prefix(*approx, image, approx_pos);
      require(in_hat.channels == in.channels && in_hat.height == in.height &&
                  in_hat.width == in.width,
              "sample_layer: approx prefix output shape differs at '" + conv->name + "'");
      padded_hat = pad_map(in_hat, conv->pad_h, conv->pad_w);
    }

    Rng rng(mix_seed(seed, std::uint64_t(layer_index) + 1, std::uint64_t(img) + 1));
    for (int p = 0; p < positions; ++p) {
      const auto pos = rng.index(std::uint64_t(out_shape.height) * out_shape.width);
      const int oy = int(pos / out_shape.width);
      const int ox = int(pos % out_shape.width);
      const int col = int(img) * positions + p;
      auto patch = extract_patch(padded, oy * conv->stride_h, ox * conv->stride_w,
                                 conv->kh, conv->kw);
      for (int i = 0; i < conv->patch_len(); ++i) out.X(i, col) = patch[i];
      if (approx) {
        auto patch_hat = extract_patch(padded_hat, oy * conv->stride_h,
                                       ox * conv->stride_w, conv->kh, conv->kw);
        for (int i = 0; i < conv->patch_len(); ++i) out.X_hat(i, col) = patch_hat[i];
      }
    }
  });

  out.Y = W * out.X;
  return out;
}

// ---------------------------------------------------------------- file form
//
//   magic "LRSS" | version u32 | layer u32 | seed u64 | flags u32 |
//   name len u32 | name bytes | blob X | blob Y | [blob X_hat]

constexpr std::uint32_t kSampleVersion = 1;

inline Blob samples_matrix_blob(const Eigen::MatrixXd& m) {
  Blob b;
  b.dims = {std::uint32_t(m.rows()), std::uint32_t(m.cols())};
  b.data.resize(std::size_t(m.rows()) * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      b.data[std::size_t(r) * m.cols() + c] = float(m(r, c));
  return b;
}

inline Eigen::MatrixXd samples_matrix_from_blob(const Blob& b, const std::string& ctx) {
  if (b.dims.size() != 2) throw InputError(ctx + ": expected a rank-2 blob");
  Eigen::MatrixXd m(int(b.dims[0]), int(b.dims[1]));
  for (std::uint32_t r = 0; r < b.dims[0]; ++r)
    for (std::uint32_t c = 0; c < b.dims[1]; ++c)
      m(r, c) = b.data[std::size_t(r) * b.dims[1] + c];
  return m;
}

inline void save_samples(const SampleSet& s, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write("LRSS", 4);
  detail::write_raw(os, kSampleVersion);
  detail::write_raw(os, std::uint32_t(s.layer_index));
  detail::write_raw(os, s.seed);
  detail::write_raw(os, std::uint32_t(s.has_x_hat() ? 1 : 0));
  detail::write_raw(os, std::uint32_t(s.layer_name.size()));
  os.write(s.layer_name.data(), std::streamsize(s.layer_name.size()));
  write_blob(os, samples_matrix_blob(s.X));
  write_blob(os, samples_matrix_blob(s.Y));
  if (s.has_x_hat()) write_blob(os, samples_matrix_blob(s.X_hat));
  if (!os) throw InputError("write failed for " + path.string());
}

inline SampleSet load_samples(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read " + path.string());
  const std::string ctx = path.string();
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LRSS", 4) != 0)
    throw InputError(ctx + ": not a sample set (bad magic)");
  auto version = detail::read_raw<std::uint32_t>(is, ctx);
  if (version > kSampleVersion)
    throw InputError(ctx + ": sample set version is newer than this reader");
  SampleSet s;
  s.layer_index = int(detail::read_raw<std::uint32_t>(is, ctx));
  s.seed = detail::read_raw<std::uint64_t>(is, ctx);
  auto flags = detail::read_raw<std::uint32_t>(is, ctx);
  auto name_len = detail::read_raw<std::uint32_t>(is, ctx);
  s.layer_name.resize(name_len);
  is.read(s.layer_name.data(), name_len);
  if (!is) throw InputError(ctx + ": truncated file");
  s.X = samples_matrix_from_blob(read_blob(is, ctx), ctx);
  s.Y = samples_matrix_from_blob(read_blob(is, ctx), ctx);
  if (flags & 1) s.X_hat = samples_matrix_from_blob(read_blob(is, ctx), ctx);
  return s;
}

}  // namespace lraccel
