#include <cmath>

#include "cunet/data.hpp"
#include "cunet/gradcheck.hpp"
#include "cunet/loss.hpp"
#include "cunet/network.hpp"
#include "cunet/ops.hpp"

namespace cunet {

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

// Inputs to a kinked op are kept away from the kink so central differences stay valid.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    do x = rng.normal();
    while (std::abs(x) < 1e-3);
  }
  return Tensor::from_data(shape, std::move(v));
}

// Scalar probe: sum(out * w) with fixed random weights.
class Probe {
 public:
  explicit Probe(Rng& rng) : rng_(rng) {}
  Tensor operator()(const Tensor& out) {
    auto it = weights_.find(out.shape());
    if (it == weights_.end()) it = weights_.emplace(out.shape(), random_tensor(out.shape(), rng_)).first;
    return ops::sum(ops::mul(out, it->second));
  }

 private:
  Rng& rng_;
  std::map<Shape, Tensor> weights_;
};

}  // namespace

std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opts) {
  std::vector<SuiteEntry> out;
  Rng rng(opts.seed);
  Probe probe(rng);
  const double eps = opts.eps;
  auto record = [&](std::string name, GradCheckResult r, double tol) {
    out.push_back({std::move(name), r, tol});
  };
  auto op_check = [&](const std::string& name, const std::function<Tensor()>& fn,
                      std::vector<Tensor> wrt) {
    record(name, grad_check([&] { return probe(fn()); }, std::move(wrt), eps), opts.op_tolerance);
  };

  struct ConvCase {
    Shape in, kernel;
    ops::Conv3dOptions conv;
  };
  const std::vector<ConvCase> convs = {
      {{1, 2, 4, 4, 4}, {3, 2, 3, 3, 3}, ops::Conv3dOptions::same(3, 1)},
      {{2, 1, 5, 6, 4}, {2, 1, 3, 3, 3}, {{2, 1, 2}, {2, 2, 1}, {2, 2, 1}}},
      {{1, 3, 3, 3, 3}, {2, 3, 1, 1, 1}, {}},
  };
  for (const auto& c : convs) {
    Tensor x = random_tensor(c.in, rng), k = random_tensor(c.kernel, rng),
           b = random_tensor({c.kernel[0]}, rng);
    op_check("conv3d " + shape_str(c.in), [&] { return ops::conv3d(x, k, b, c.conv); }, {x, k, b});
  }

  const std::vector<Shape> shapes = {{1, 2, 3, 3, 3}, {2, 1, 4, 2, 3}, {1, 3, 2, 2, 2}};
  for (const auto& s : shapes) {
    Tensor x = random_tensor(s, rng);
    op_check("instance_norm " + shape_str(s), [&] { return ops::instance_norm(x); }, {x});
  }
  for (const auto& s : shapes) {
    Tensor x = away_from_zero(s, rng);
    op_check("relu " + shape_str(s), [&] { return ops::relu(x); }, {x});
  }
  for (const auto& s : shapes) {
    Tensor x = random_tensor(s, rng);
    op_check("dropout " + shape_str(s), [&] {
      Rng mask(opts.seed + 1);
      return ops::dropout(x, 0.2, mask, true);
    }, {x});
  }
  for (const Shape& s : std::vector<Shape>{{1, 1, 2, 2, 2}, {1, 2, 3, 2, 4}, {2, 1, 1, 3, 2}}) {
    Tensor x = random_tensor(s, rng);
    op_check("upsample3d_trilinear " + shape_str(s), [&] { return ops::upsample3d_trilinear(x); }, {x});
  }
  for (const Shape& s : std::vector<Shape>{{1, 1, 4, 4, 4}, {1, 2, 2, 4, 6}, {2, 1, 2, 2, 2}}) {
    Tensor x = random_tensor(s, rng);
    op_check("maxpool3d " + shape_str(s), [&] { return ops::maxpool3d(x); }, {x});
  }
  for (const auto& s : shapes) {
    Shape s2 = s;
    s2[1] += 1;
    Tensor a = random_tensor(s, rng), b = random_tensor(s2, rng);
    op_check("concat " + shape_str(s), [&] { return ops::concat({a, b, a}); }, {a, b});
    op_check("slice_channels " + shape_str(s2), [&] { return ops::slice_channels(b, 1, s[1]); }, {b});
    Tensor c = random_tensor(s, rng);
    op_check("add " + shape_str(s), [&] { return ops::add(a, c); }, {a, c});
    op_check("mul " + shape_str(s), [&] { return ops::mul(a, ops::mul(c, a)); }, {a, c});
  }
  for (const Shape& s : std::vector<Shape>{{1, 4, 2, 2, 2}, {2, 3, 3, 1, 2}, {1, 2, 2, 2, 2}}) {
    Tensor x = random_tensor(s, rng, -2.0, 2.0);
    op_check("softmax_channels " + shape_str(s), [&] { return ops::softmax_channels(x); }, {x});
  }
  for (const Shape& s : std::vector<Shape>{{1, 4, 2, 2, 2}, {1, 3, 2, 3, 2}, {2, 2, 2, 2, 2}}) {
    Tensor p = random_tensor(s, rng, 0.05, 1.0);
    std::vector<double> t(shape_numel(s), 0.0);
    const std::size_t vox = s[2] * s[3] * s[4];
    for (std::size_t b = 0; b < s[0]; ++b)
      for (std::size_t v = 0; v < vox; ++v) t[(b * s[1] + rng.below(s[1])) * vox + v] = 1.0;
    Tensor truth = Tensor::from_data(s, std::move(t));
    record("dice_loss " + shape_str(s),
           grad_check([&] { return dice_loss(p, truth); }, {p}, eps), opts.op_tolerance);
  }
  {
    Tensor x = random_tensor({1, 2, 4, 4, 4}, rng), k = random_tensor({3, 2, 3, 3, 3}, rng),
           b = random_tensor({3}, rng);
    op_check("conv3d-instance_norm-relu", [&] {
      return ops::relu(ops::instance_norm(ops::conv3d(x, k, b, ops::Conv3dOptions::same(3, 1))));
    }, {x, k, b});
  }

  auto block_check = [&](const std::string& name, LayerGraph& g, const Shape& in_shape, double tol,
                         std::optional<std::size_t> sample, bool dice) {
    g.initialize(opts.seed + 7);
    Tensor x = random_tensor(in_shape, rng);
    std::vector<Tensor> wrt = g.parameters();
    if (!sample) wrt.push_back(x);
    Tensor truth;
    if (dice) {
      std::vector<std::uint8_t> idx(in_shape[2] * in_shape[3] * in_shape[4]);
      for (auto& v : idx) v = static_cast<std::uint8_t>(rng.below(g.output_channels()));
      truth = one_hot(idx, {in_shape[2], in_shape[3], in_shape[4]}, g.output_channels());
    }
    auto fn = [&] {
      Rng mask(opts.seed + 2);
      Tensor y = g.forward(x, {true, &mask});
      return dice ? dice_loss(y, truth) : probe(y);
    };
    record(name, grad_check(fn, wrt, eps, sample, opts.seed + 3), tol);
  };
  {
    LayerGraph g;
    const std::size_t in = g.add_input(2);
    g.set_output(build_dense_block(g, in, 2, "block"));
    block_check("dense_block in=2", g, {1, 2, 4, 4, 4}, opts.op_tolerance, std::nullopt, false);
  }
  {
    LayerGraph g;
    const std::size_t in = g.add_input(2);
    g.set_output(build_rib(g, in, 2, 3, {1, 3, 5}, "rib"));
    block_check("rib 2->3", g, {1, 2, 4, 4, 4}, opts.op_tolerance, std::nullopt, false);
  }
  {
    NetConfig cfg = NetConfig::scaled(2, 2);
    LayerGraph g = build_network(cfg);
    block_check("network base=2 depth=2 patch=8^3", g, {1, 4, 8, 8, 8}, opts.net_tolerance,
                opts.net_samples, true);
  }
  return out;
}

}  // namespace cunet
