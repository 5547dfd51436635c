// lraccel-gen - emit a small random convolutional model plus a matching
// dataset, so the lraccel pipeline can be exercised without external files.
//
// Writes <out>/model (loadable with --model) and <out>/data (loadable with
// --data).  Images are spatially smoothed noise, which gives the layer
// responses the correlated, fast-decaying spectra the rank planner feeds on.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lraccel/common.hpp"
#include "lraccel/model_io.hpp"
#include "lraccel/tensor.hpp"

namespace fs = std::filesystem;
using namespace lraccel;

namespace {

ConvLayer make_conv(const std::string& name, int in, int out, int k, Rng& rng) {
  ConvLayer l;
  l.name = name;
  l.kh = l.kw = k;
  l.in_channels = in;
  l.out_channels = out;
  l.pad_h = l.pad_w = k / 2;
  l.nonlinearity = Nonlinearity::relu;
  l.weights = MatF(out, l.patch_len());
  const float scale = 1.0f / std::sqrt(float(k * k * in));
  for (int o = 0; o < out; ++o) {
    for (int p = 0; p + 1 < l.patch_len(); ++p)
      l.weights(o, p) = scale * float(rng.normal());
    l.weights(o, l.patch_len() - 1) = 0.1f * float(rng.normal());
  }
  return l;
}

DenseLayer make_dense(const std::string& name, int in, int out, Rng& rng) {
  DenseLayer l;
  l.name = name;
  l.nonlinearity = Nonlinearity::identity;
  l.weights = MatF(out, in);
  l.bias = Eigen::VectorXf(out);
  const float scale = 1.0f / std::sqrt(float(in));
  for (int o = 0; o < out; ++o) {
    for (int i = 0; i < in; ++i) l.weights(o, i) = scale * float(rng.normal());
    l.bias(o) = 0.0f;
  }
  return l;
}

// 3x3 mean filter with clamped borders; a few passes leave the noise smooth.
FeatureMap box_blur(const FeatureMap& fm) {
  FeatureMap out(fm.channels, fm.height, fm.width);
  for (int c = 0; c < fm.channels; ++c)
    for (int i = 0; i < fm.height; ++i)
      for (int j = 0; j < fm.width; ++j) {
        float sum = 0.0f;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = std::clamp(i + di, 0, fm.height - 1);
            const int jj = std::clamp(j + dj, 0, fm.width - 1);
            sum += fm.at(c, ii, jj);
          }
        out.at(c, i, j) = sum / 9.0f;
      }
  return out;
}

std::vector<FeatureMap> make_images(int n, int channels, int size, Rng& rng) {
  std::vector<FeatureMap> images;
  images.reserve(std::size_t(n));
  for (int img = 0; img < n; ++img) {
    FeatureMap fm(channels, size, size);
    for (float& v : fm.data) v = float(rng.normal());
    for (int pass = 0; pass < 3; ++pass) fm = box_blur(fm);
    for (int c = 0; c < channels; ++c) {
      const float offset = 0.5f * float(rng.normal());
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) fm.at(c, i, j) += offset;
    }
    images.push_back(std::move(fm));
  }
  return images;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate a demo model and dataset for lraccel"};

  std::string out;
  int images = 24;
  int size = 32;
  std::uint64_t seed = 1;
  app.add_option("--out", out, "output directory (model/ and data/ are created inside)")
      ->required();
  app.add_option("--images", images, "number of dataset images");
  app.add_option("--size", size, "image height and width");
  app.add_option("--seed", seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    require(images >= 2, "need at least 2 images");
    require(size >= 8, "size must be at least 8");

    Rng rng(mix_seed(seed, 0x67656e));
    Net net;
    net.layers.push_back(make_conv("conv1", 3, 16, 3, rng));
    net.layers.push_back(PoolLayer{"pool1", 2, 2});
    net.layers.push_back(make_conv("conv2", 16, 32, 3, rng));
    net.layers.push_back(make_conv("conv3", 32, 32, 3, rng));
    net.layers.push_back(FlattenLayer{"flat"});
    const int half = size / 2;
    net.layers.push_back(make_dense("fc", 32 * half * half, 10, rng));
    validate_net(net, Shape{3, size, size});

    const fs::path root(out);
    save_model(net, root / "model");
    save_dataset(root / "data", make_images(images, 3, size, rng));

    std::cout << "model -> " << (root / "model").string() << "\n"
              << "data  -> " << (root / "data").string() << " (" << images
              << " images, 3x" << size << "x" << size << ")\n";
    return 0;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
