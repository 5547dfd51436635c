#include <catch2/catch_amalgamated.hpp>

#include "lraccel/sampler.hpp"
#include "test_util.hpp"

using namespace lraccel;

namespace {

struct Fixture {
  TempDir tmp{"lraccel-sampler"};
  Net net;
  Dataset data;

  explicit Fixture(std::uint64_t seed, int images = 6) {
    Rng rng(seed);
    net.layers.push_back(random_conv(rng, "conv1", 3, 6, 3, 1, 1));
    PoolLayer pool;
    pool.name = "pool1";
    net.layers.push_back(pool);
    net.layers.push_back(random_conv(rng, "conv2", 6, 8, 3, 1, 1));

    std::vector<FeatureMap> imgs;
    for (int i = 0; i < images; ++i) imgs.push_back(random_fm(rng, 3, 12, 12));
    save_dataset(tmp.path / "d", imgs);
    data = open_dataset(tmp.path / "d");
  }
};

}  // namespace

TEST_CASE("sample counts and layout") {
  Fixture fx(21);
  SampleSet s = sample_layer(fx.net, nullptr, 2, fx.data, 5, 7, 99);
  REQUIRE(s.count() == 35);
  REQUIRE(s.layer_name == "conv2");
  REQUIRE(s.layer_index == 2);
  REQUIRE(s.seed == 99);
  REQUIRE(!s.has_x_hat());

  const auto& conv = std::get<ConvLayer>(fx.net.layers[2]);
  REQUIRE(s.X.rows() == conv.patch_len());
  REQUIRE(s.Y.rows() == conv.out_channels);
  // homogeneous coordinate present on every patch
  REQUIRE((s.X.row(s.X.rows() - 1).array() == 1.0).all());
}

TEST_CASE("responses equal the weight matrix applied to the patches") {
  Fixture fx(22);
  SampleSet s = sample_layer(fx.net, nullptr, 0, fx.data, 4, 6, 1);
  const auto& conv = std::get<ConvLayer>(fx.net.layers[0]);
  Eigen::MatrixXd expected = conv.weights.cast<double>() * s.X;
  REQUIRE((s.Y - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patches are genuine windows of the layer input") {
  Fixture fx(23);
  SampleSet s = sample_layer(fx.net, nullptr, 2, fx.data, 3, 20, 7);
  const auto& conv = std::get<ConvLayer>(fx.net.layers[2]);
  for (int img = 0; img < 3; ++img) {
    FeatureMap in = net_forward_prefix(fx.net, load_image(fx.data, img), 2);
    Shape os = conv_out_shape(conv, {in.channels, in.height, in.width});
    FeatureMap padded = pad_map(in, conv.pad_h, conv.pad_w);
    MatF cols = im2col(padded, conv.kh, conv.kw, conv.stride_h, conv.stride_w,
                       os.height, os.width);
    for (int p = 0; p < 20; ++p) {
      const int col = img * 20 + p;
      bool found = false;
      for (int c = 0; c < cols.cols() && !found; ++c)
        if ((cols.col(c).cast<double>() - s.X.col(col)).cwiseAbs().maxCoeff() == 0.0)
          found = true;
      REQUIRE(found);
    }
  }
}

TEST_CASE("same seed reproduces the draw, another seed changes it") {
  Fixture fx(24);
  SampleSet a = sample_layer(fx.net, nullptr, 2, fx.data, 4, 8, 5);
  SampleSet b = sample_layer(fx.net, nullptr, 2, fx.data, 4, 8, 5);
  SampleSet c = sample_layer(fx.net, nullptr, 2, fx.data, 4, 8, 6);
  REQUIRE(a.X == b.X);
  REQUIRE(a.Y == b.Y);
  REQUIRE(a.X != c.X);
}

TEST_CASE("approximated patches coincide when the approx net is the original") {
  Fixture fx(25);
  SampleSet s = sample_layer(fx.net, &fx.net, 2, fx.data, 4, 8, 5);
  REQUIRE(s.has_x_hat());
  REQUIRE(s.X_hat == s.X);
}

TEST_CASE("approximated patches come from the rewritten prefix") {
  Fixture fx(26);
  Net approx = fx.net;
  auto& c1 = std::get<ConvLayer>(approx.layers[0]);
  c1.weights *= 0.5f;  // perturbed first layer changes conv2's inputs

  SampleSet s = sample_layer(fx.net, &approx, 2, fx.data, 4, 8, 5);
  SampleSet plain = sample_layer(fx.net, nullptr, 2, fx.data, 4, 8, 5);
  REQUIRE(s.X == plain.X);  // true patches and draws are approx-independent
  REQUIRE(s.X_hat != s.X);
  REQUIRE(s.X_hat.rows() == s.X.rows());
  // homogeneous coordinate survives on the approximated side too
  REQUIRE((s.X_hat.row(s.X_hat.rows() - 1).array() == 1.0).all());
}

TEST_CASE("splice suffixes still match their original layer") {
  Fixture fx(27);
  Net approx = fx.net;
  auto& c2 = std::get<ConvLayer>(approx.layers[2]);
  c2.name = "conv2.a";  // as after splicing
  SampleSet s = sample_layer(fx.net, &approx, 2, fx.data, 2, 4, 5);
  REQUIRE(s.has_x_hat());
}

TEST_CASE("sampling rejects bad requests") {
  Fixture fx(28);
  REQUIRE_THROWS_AS(sample_layer(fx.net, nullptr, 1, fx.data, 2, 4, 5), InputError);
  REQUIRE_THROWS_AS(sample_layer(fx.net, nullptr, 3, fx.data, 2, 4, 5), InputError);
  REQUIRE_THROWS_AS(sample_layer(fx.net, nullptr, 0, fx.data, 0, 4, 5), InputError);
  REQUIRE_THROWS_AS(sample_layer(fx.net, nullptr, 0, fx.data, 7, 4, 5), InputError);
  REQUIRE_THROWS_AS(sample_layer(fx.net, nullptr, 0, fx.data, 2, 0, 5), InputError);

  Net approx;
  approx.layers.push_back(FlattenLayer{"other"});
  REQUIRE_THROWS_AS(sample_layer(fx.net, &approx, 0, fx.data, 2, 4, 5), InputError);
}

TEST_CASE("sample files roundtrip") {
  Fixture fx(29);
  SampleSet s = sample_layer(fx.net, &fx.net, 2, fx.data, 3, 5, 77);
  save_samples(s, fx.tmp.path / "s.lrtb");
  SampleSet back = load_samples(fx.tmp.path / "s.lrtb");

  REQUIRE(back.layer_index == s.layer_index);
  REQUIRE(back.layer_name == s.layer_name);
  REQUIRE(back.seed == s.seed);
  // patches are f32-valued, so storage is exact; responses are f64 products
  // and stored rounded to f32
  REQUIRE(back.X == s.X);
  REQUIRE(back.X_hat == s.X_hat);
  REQUIRE(back.Y.rows() == s.Y.rows());
  REQUIRE((back.Y - s.Y).cwiseAbs().maxCoeff() < 1e-5);

  SampleSet plain = sample_layer(fx.net, nullptr, 2, fx.data, 3, 5, 77);
  save_samples(plain, fx.tmp.path / "p.lrtb");
  REQUIRE(!load_samples(fx.tmp.path / "p.lrtb").has_x_hat());
}

TEST_CASE("sample reader rejects foreign files") {
  Fixture fx(30);
  Rng rng(1);
  save_blob_file(fx.tmp.path / "x.lrtb", to_blob(random_fm(rng, 2, 2, 2)));
  REQUIRE_THROWS_AS(load_samples(fx.tmp.path / "x.lrtb"), InputError);
}
