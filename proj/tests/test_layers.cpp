#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "owsd/layers.hpp"
#include "owsd/network.hpp"
#include "owsd/scrambler.hpp"

using namespace owsd;

TEST_CASE("dense layer with identity weights passes input through") {
  Network net({LayerSpec::dense(3)}, {3}, 0);
  Tensor* W = net.layer(0).params()[0];
  Tensor* b = net.layer(0).params()[1];
  REQUIRE(W->shape == Shape{3, 3});
  std::fill(W->data.begin(), W->data.end(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) W->data[i * 3 + i] = 1.0;
  std::fill(b->data.begin(), b->data.end(), 0.0);

  Tensor out = net.infer(Tensor({1, 3}, {1.0, 2.0, 3.0}));
  CHECK(out.data == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("softmax of equal logits is uniform") {
  Network net({LayerSpec::softmax()}, {2}, 0);
  Tensor out = net.infer(Tensor({1, 2}, {0.0, 0.0}));
  CHECK(out.data[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(out.data[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("softmax rows always sum to 1") {
  Network net({LayerSpec::softmax()}, {7}, 0);
  Rng rng(3);
  Tensor x = Tensor::randn({5, 7}, rng, 10.0);
  x.data[0] = 500.0;  // max-shift must survive large logits
  Tensor out = net.infer(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      const double p = out.data[r * 7 + c];
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("relu and tanh pointwise maps") {
  Network relu({LayerSpec::relu()}, {4}, 0);
  Tensor out = relu.infer(Tensor({1, 4}, {-2.0, -0.0, 0.5, 3.0}));
  CHECK(out.data == std::vector<double>{0.0, 0.0, 0.5, 3.0});

  Network th({LayerSpec::tanh()}, {2}, 0);
  Tensor ty = th.infer(Tensor({1, 2}, {0.0, 100.0}));
  CHECK(ty.data[0] == 0.0);
  CHECK(ty.data[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("conv2d output geometry") {
  // Ho = (H + 2p - K)/s + 1
  Network net({LayerSpec::conv2d(5, 3, 2, 1)}, {9, 9, 2}, 1);
  CHECK(net.output_shape() == Shape{5, 5, 5});

  Rng rng(2);
  Tensor x = Tensor::randn({2, 9, 9, 2}, rng, 1.0);
  CHECK(net.infer(x).shape == Shape{2, 5, 5, 5});
}

TEST_CASE("deconv2d output geometry inverts stride-2 conv downsampling") {
  // Ho = (H-1)s + K - 2p: the DCGAN upsampling block doubles the side.
  Network net({LayerSpec::deconv2d(3, 4, 2, 1)}, {8, 8, 16}, 1);
  CHECK(net.output_shape() == Shape{16, 16, 3});
}

TEST_CASE("batchnorm training pass normalizes per channel") {
  Network net({LayerSpec::batchnorm()}, {6}, 0);
  Rng data_rng(4), train_rng(5);
  Tensor x = Tensor::randn({64, 6}, data_rng, 3.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += 7.0;
  Tensor y = net.forward_train(x, train_rng);
  for (std::size_t c = 0; c < 6; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 64; ++r) mean += y.data[r * 6 + c];
    mean /= 64.0;
    for (std::size_t r = 0; r < 64; ++r) {
      const double d = y.data[r * 6 + c] - mean;
      var += d * d;
    }
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps in the denominator shifts var slightly below 1
  }

  // Inference uses the running buffers: a pure function of (weights, input).
  Tensor a = net.infer(x);
  Tensor b = net.infer(x);
  CHECK(a.data == b.data);
}

TEST_CASE("dropout is identity at inference and masks in training") {
  Network net({LayerSpec::dropout(0.5)}, {128}, 0);
  Rng rng(9);
  Tensor x = Tensor::randn({2, 128}, rng, 1.0);
  Tensor y = net.infer(x);
  CHECK(y.data == x.data);

  Rng train_rng(10);
  Tensor t = net.forward_train(x, train_rng);
  std::size_t zeroed = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (t.data[i] == 0.0) ++zeroed;
    else CHECK(t.data[i] == Catch::Approx(x.data[i] * 2.0));  // inverted-dropout scaling
  }
  CHECK(zeroed > 64);
  CHECK(zeroed < 192);
}

TEST_CASE("reshape validates element count") {
  Network net({LayerSpec::reshape({4, 4, 2})}, {32}, 0);
  CHECK(net.output_shape() == Shape{4, 4, 2});
  CHECK_THROWS_AS(Network({LayerSpec::reshape({5, 5})}, {32}, 0), invalid_architecture_error);
}

TEST_CASE("layer specs reject invalid configurations") {
  CHECK_THROWS_AS(Network({LayerSpec::dense(0)}, {3}, 0), invalid_architecture_error);
  LayerSpec bad_dropout = LayerSpec::dropout(1.0);
  CHECK_THROWS_AS(bad_dropout.validate(), invalid_architecture_error);
  // kernel larger than the padded input cannot compose
  CHECK_THROWS_AS(Network({LayerSpec::conv2d(4, 9, 1, 0)}, {5, 5, 1}, 0),
                  invalid_architecture_error);
  // dense on an image without a reshape
  CHECK_THROWS_AS(Network({LayerSpec::dense(4)}, {5, 5, 1}, 0), invalid_architecture_error);
  CHECK_THROWS_AS(Network({}, {3}, 0), invalid_architecture_error);
}

TEST_CASE("layer spec json round trip") {
  std::vector<LayerSpec> arch = {
      LayerSpec::conv2d(8, 3, 2, 1), LayerSpec::batchnorm(),    LayerSpec::relu(),
      LayerSpec::reshape({128}),     LayerSpec::dropout(0.25),  LayerSpec::dense(10),
      LayerSpec::softmax(),          LayerSpec::deconv2d(3, 4, 2, 1), LayerSpec::tanh(),
  };
  auto back = arch_from_json(arch_to_json(arch));
  REQUIRE(back.size() == arch.size());
  for (std::size_t i = 0; i < arch.size(); ++i) {
    CHECK(back[i].kind == arch[i].kind);
    CHECK(back[i].units == arch[i].units);
    CHECK(back[i].filters == arch[i].filters);
    CHECK(back[i].kernel == arch[i].kernel);
    CHECK(back[i].stride == arch[i].stride);
    CHECK(back[i].pad == arch[i].pad);
    CHECK(back[i].rate == arch[i].rate);
    CHECK(back[i].target == arch[i].target);
  }
  json unknown = {{"kind", "pooling"}};
  CHECK_THROWS_AS(layer_spec_from_json(unknown), invalid_architecture_error);
}

TEST_CASE("generator stack composes to the configured image shape") {
  // toy: 64 -> 4x4x128 -> 8 -> 16 -> 32x32x3
  GeneratorConfig toy = toy_generator_config(64);
  Network net(generator_arch(toy), {toy.embedding_dim}, 3);
  CHECK(net.output_shape() == Shape{32, 32, 3});
  CHECK(toy.image_size() == 32);
}

TEST_CASE("network copy is deep and inference is thread-safe state") {
  Network a({LayerSpec::dense(4), LayerSpec::tanh()}, {3}, 5);
  Network b = a;
  Tensor x({1, 3}, {0.3, -0.2, 0.9});
  CHECK(a.infer(x).data == b.infer(x).data);
  b.layer(0).params()[0]->data[0] += 1.0;
  CHECK(a.infer(x).data != b.infer(x).data);
}
