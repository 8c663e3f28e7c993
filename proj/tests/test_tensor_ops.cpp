#include <doctest.h>

#include <cmath>

#include "cunet/error.hpp"
#include "cunet/gradcheck.hpp"
#include "cunet/ops.hpp"
#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"
#include "oracles.hpp"

using namespace cunet;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(s, std::move(v));
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

}  // namespace

TEST_CASE("tensor factories enforce shape invariants") {
  CHECK(Tensor::zeros({2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ContractError);
}

TEST_CASE("backward of sum is all ones, of sum(x*x) is 2x") {
  Tensor x = Tensor::full({1, 1, 2, 2, 2}, 3.0, true);
  backward(ops::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  x.zero_grad();
  backward(ops::sum(ops::mul(x, x)));
  for (double g : x.grad()) CHECK(g == 6.0);
}

TEST_CASE("backward rejects non-scalar and non-finite losses") {
  Tensor x = Tensor::full({1, 1, 1, 1, 2}, 1.0, true);
  CHECK_THROWS_AS(backward(ops::relu(x)), ContractError);
  Tensor inf = Tensor::full({1}, INFINITY, true);
  CHECK_THROWS(backward(ops::sum(inf)));
}

TEST_CASE("fan-out gradients equal the sum of per-use gradients") {
  Rng rng(3);
  Tensor x = random_tensor({1, 2, 2, 2, 2}, rng);
  Tensor w1 = random_tensor(x.shape(), rng), w2 = random_tensor(x.shape(), rng);
  x.set_requires_grad(true);
  backward(ops::add(weighted_sum(ops::relu(x), w1), weighted_sum(ops::softmax_channels(x), w2)));
  const std::vector<double> both(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(weighted_sum(ops::relu(x), w1));
  std::vector<double> sep(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(weighted_sum(ops::softmax_channels(x), w2));
  for (std::size_t i = 0; i < sep.size(); ++i) CHECK(both[i] == doctest::Approx(sep[i] + x.grad()[i]).epsilon(1e-14));
}

TEST_CASE("tape is released after backward") {
  Tensor x = Tensor::full({1, 1, 1, 1, 3}, 2.0, true);
  Tensor y = ops::mul(x, x);
  CHECK_FALSE(y.is_leaf());
  backward(ops::sum(y));
  CHECK(y.is_leaf());
}

TEST_CASE("no tape is recorded under NoGradGuard") {
  Tensor x = Tensor::full({1, 1, 1, 1, 3}, 2.0, true);
  NoGradGuard guard;
  CHECK(ops::mul(x, x).is_leaf());
}

TEST_CASE("conv3d matches the direct-sum oracle on random 1x2x6x6x6, dilation 2, pad 2") {
  Rng rng(11);
  Tensor x = random_tensor({1, 2, 6, 6, 6}, rng), k = random_tensor({3, 2, 3, 3, 3}, rng),
         b = random_tensor({3}, rng);
  const Tensor y = ops::conv3d(x, k, b, {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}});
  auto vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  const auto ref = oracle::conv3d(vec(x), {1, 2, 6, 6, 6}, vec(k), {3, 2, 3, 3, 3}, vec(b), 1, 2, 2);
  REQUIRE(y.shape() == Shape(ref.shape.begin(), ref.shape.end()));
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.data.size(); ++i) worst = std::max(worst, std::abs(y.data()[i] - ref.data[i]));
  CHECK(worst < 1e-9);
}

TEST_CASE("conv3d identity kernel and errors") {
  Rng rng(1);
  Tensor x = random_tensor({1, 1, 3, 4, 5}, rng);
  const Tensor y = ops::conv3d(x, Tensor::full({1, 1, 1, 1, 1}, 1.0), Tensor::zeros({1}));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  CHECK(ops::conv_out_extent(11, 3, 1, 5, 0) == 1);  // dilated extent 11
  CHECK(ops::conv_out_extent(10, 3, 1, 5, 0) == 0);
  try {
    ops::conv3d(Tensor::zeros({1, 1, 4, 8, 8}), Tensor::zeros({1, 1, 3, 3, 3}), Tensor::zeros({1}),
                {{1, 1, 1}, {3, 1, 1}, {0, 0, 0}});
    FAIL("expected an error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("depth") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv3d(Tensor::zeros({1, 2, 4, 4, 4}), Tensor::zeros({1, 3, 3, 3, 3}),
                              Tensor::zeros({1})),
                  ContractError);
}

TEST_CASE("instance_norm standardizes each slice and zeroes constants") {
  Rng rng(5);
  const Tensor y = ops::instance_norm(random_tensor({2, 3, 4, 4, 4}, rng, -5.0, 9.0));
  for (std::size_t s = 0; s < 6; ++s) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 64; ++i) mean += y.data()[s * 64 + i];
    mean /= 64;
    for (std::size_t i = 0; i < 64; ++i) var += std::pow(y.data()[s * 64 + i] - mean, 2);
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(var / 64 - 1.0) < 1e-6);
  }
  const Tensor flat = ops::instance_norm(Tensor::full({1, 1, 2, 2, 2}, 7.0));
  for (double v : flat.data()) CHECK(v == 0.0);
}

TEST_CASE("relu values") {
  const Tensor y = ops::relu(Tensor::from_data({1, 1, 1, 1, 2}, {-1.0, 2.5}));
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 2.5);
}

TEST_CASE("dropout: identity at rate 0 and in eval mode, rate 0.2 zeroes about 20%") {
  Rng rng(9);
  Tensor x = Tensor::full({1, 1, 10, 100, 100}, 1.0);
  const Tensor kept = ops::dropout(x, 0.0, rng, true), eval = ops::dropout(x, 0.7, rng, false);
  for (double v : kept.data()) REQUIRE(v == 1.0);
  for (double v : eval.data()) REQUIRE(v == 1.0);
  std::size_t zeros = 0;
  const Tensor dropped = ops::dropout(x, 0.2, rng, true);
  for (double v : dropped.data()) {
    if (v == 0.0) ++zeros;
    else REQUIRE(v == doctest::Approx(1.25));
  }
  CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.2) <= 0.01);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, rng, true), ContractError);
}

TEST_CASE("upsample3d_trilinear doubles extents and keeps constants") {
  const Tensor y = ops::upsample3d_trilinear(Tensor::full({1, 1, 4, 4, 4}, 2.5));
  CHECK(y.shape() == Shape{1, 1, 8, 8, 8});
  for (double v : y.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
  // align-corners=false: output 1 of a 2-wide line samples 0.25 of the way.
  const Tensor line = ops::upsample3d_trilinear(Tensor::from_data({1, 1, 1, 1, 2}, {0.0, 4.0}));
  CHECK(line.data()[0] == 0.0);
  CHECK(line.data()[1] == doctest::Approx(1.0));
  CHECK(line.data()[2] == doctest::Approx(3.0));
  CHECK(line.data()[3] == 4.0);
}

TEST_CASE("maxpool3d halves, routes ties to the first element, rejects odd extents") {
  Tensor x = Tensor::full({1, 1, 4, 4, 4}, 1.0, true);
  const Tensor y = ops::maxpool3d(x);
  CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
  backward(ops::sum(y));
  std::size_t hot = 0;
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const double g = x.grad()[(z * 4 + r) * 4 + c];
        const bool first = z % 2 == 0 && r % 2 == 0 && c % 2 == 0;
        CHECK(g == (first ? 1.0 : 0.0));
        hot += g != 0.0;
      }
  CHECK(hot == 8);
  CHECK_THROWS_AS(ops::maxpool3d(Tensor::zeros({1, 1, 3, 4, 4})), ContractError);
}

TEST_CASE("softmax sums to one, concat widths, slices recover inputs, add zero") {
  const Tensor s = ops::softmax_channels(Tensor::zeros({1, 4, 2, 2, 2}));
  for (double v : s.data()) CHECK(v == 0.25);
  Rng rng(2);
  const Tensor logits = random_tensor({2, 4, 3, 3, 3}, rng, -8.0, 8.0);
  const Tensor p = ops::softmax_channels(logits);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t v = 0; v < 27; ++v) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double e = p.data()[(b * 4 + c) * 27 + v];
        CHECK(e > 0.0);
        CHECK(e < 1.0);
        sum += e;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

  Tensor a = random_tensor({1, 8, 2, 2, 2}, rng), b = random_tensor({1, 8, 2, 2, 2}, rng);
  const Tensor c = ops::concat({a, b});
  CHECK(c.dim(1) == 16);
  const Tensor a2 = ops::slice_channels(c, 0, 8), b2 = ops::slice_channels(c, 8, 8);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a2.data()[i] == a.data()[i]);
    CHECK(b2.data()[i] == b.data()[i]);
  }
  const Tensor z = ops::add(a, Tensor::zeros(a.shape()));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(z.data()[i] == a.data()[i]);
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({1, 7, 2, 2, 2})), ContractError);
  CHECK_THROWS_AS(ops::concat({a, Tensor::zeros({1, 1, 2, 2, 3})}), ContractError);
}

TEST_CASE("grad_check of a linear function is exact") {
  Rng rng(4);
  Tensor x = random_tensor({1, 1, 2, 3, 2}, rng);
  const Tensor w = random_tensor(x.shape(), rng);
  const auto r = grad_check([&](const Tensor& t) { return weighted_sum(t, w); }, x);
  CHECK(r.max_rel_error < 1e-10);
  CHECK(r.checked == 12);
}

TEST_CASE("finite-difference suite passes at the documented tolerances") {
  for (const auto& row : run_gradcheck_suite()) {
    INFO(row.name << " err " << row.result.max_rel_error);
    CHECK(row.passed());
  }
}
