#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "doctest.h"

#include "pnp/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace pnp;
using pnp::testing::check_gradients;
using pnp::testing::random_tensor;

namespace {

// sum(t * w) with one fixed random w per shape, so repeated evaluations of a
// loss closure see the same weights.
struct FrozenWeights {
  explicit FrozenWeights(std::uint64_t seed) : rng(seed) {}
  Tensor operator()(const Tensor& t) {
    auto it = cache.find(t.shape());
    if (it == cache.end()) it = cache.emplace(t.shape(), random_tensor(t.shape(), rng, 1.0, false)).first;
    return sum(mul(t, it->second));
  }
  SplitMix64 rng;
  std::map<Shape, Tensor> cache;
};

}  // namespace

TEST_CASE("matmul small products") {
  auto a = Tensor::matrix({{1, 0}, {0, 1}});
  auto b = Tensor::matrix({{3, 4}, {5, 6}});
  CHECK(matmul(a, b).to_vector() == std::vector<double>{3, 4, 5, 6});
  auto c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == 11.0);
}

TEST_CASE("matmul gradient against finite differences") {
  SplitMix64 rng(11);
  auto a = random_tensor({5, 4}, rng);
  auto b = random_tensor({4, 3}, rng);
  auto w = random_tensor({5, 3}, rng, 1.0, false);
  auto r = check_gradients([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3}), b({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    const auto first = msg.find("[2x3]");
    CHECK(first != std::string::npos);
    CHECK(msg.find("[2x3]", first + 1) != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({4, 1})), DimensionError);
}

TEST_CASE("tensors reject empty dimensions and bad data length") {
  CHECK_THROWS_AS(Tensor(Shape{0, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST_CASE("softmax examples") {
  auto s = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto big = softmax(Tensor::vector({1000, 0}), 0);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  CHECK_THROWS_AS(softmax(Tensor::vector({1, 2}), 1), DimensionError);
}

TEST_CASE("softmax Jacobian against finite differences") {
  SplitMix64 rng(7);
  auto x = random_tensor({7}, rng);
  auto w = random_tensor({7}, rng, 1.0, false);
  auto r = check_gradients([&] { return sum(mul(softmax(x, 0), w)); }, {x});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax sums to one along the reduced axis") {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor({3, 4, 5}, rng, 20.0, false);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto s = softmax(x, axis);
      const Shape& sh = x.shape();
      const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? sh[2] : sh[1] * sh[2]);
      const std::size_t outer = x.numel() / (sh[axis] * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          double total = 0.0;
          for (std::size_t k = 0; k < sh[axis]; ++k) total += s[(o * sh[axis] + k) * inner + i];
          CHECK(std::abs(total - 1.0) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("layer norm examples") {
  auto y = layer_norm_noaffine(Tensor::vector({1, 3}), 1e-5);
  CHECK(y[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK(std::abs(y[0] + 0.999995) < 1e-6);
  auto c = layer_norm_noaffine(Tensor::vector({5, 5, 5}));
  for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("layer norm gradient and zero-mean property") {
  SplitMix64 rng(5);
  auto x = random_tensor({8}, rng);
  auto w = random_tensor({8}, rng, 1.0, false);
  auto r = check_gradients([&] { return sum(mul(layer_norm_noaffine(x), w)); }, {x});
  CHECK(r.max_rel_error < 1e-6);

  for (int trial = 0; trial < 100; ++trial) {
    const double offset = 1e3 * rng.normal();
    auto m = random_tensor({6, 9}, rng, std::exp(3.0 * rng.normal()), false);
    auto y = layer_norm_noaffine(add_scalar(m, offset));
    for (std::size_t i = 0; i < 6; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < 9; ++j) mu += y.at(i, j);
      CHECK(std::abs(mu / 9.0) < 1e-10);
    }
  }

  // Huge offset, spread far below sqrt(eps): the mean's rounding error is
  // what survives normalization here.
  for (double offset : {1234.5678, -9876.54321, 3.3e4}) {
    auto m = random_tensor({4, 61}, rng, 1e-6, false);
    auto y = layer_norm_noaffine(add_scalar(m, offset));
    for (std::size_t i = 0; i < 4; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < 61; ++j) mu += y.at(i, j);
      CHECK(std::abs(mu / 61.0) < 1e-10);
    }
  }
}

TEST_CASE("backward examples") {
  auto x = Tensor::vector({1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = Tensor::vector({1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);

  SplitMix64 rng(21);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  // A plain mean of row softmaxes is constant, so weight the entries.
  auto w = random_tensor({3, 5}, rng, 1.0, false);
  auto r = check_gradients([&] { return mean(mul(softmax(matmul(a, b), 1), w)); }, {a, b});
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("backward contract and reachability") {
  auto x = Tensor::vector({1, 2}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);

  auto used = Tensor::vector({1, 2}, true);
  auto unused = Tensor::vector({3, 4}, true);
  backward(sum(used));
  for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("gradients accumulate across fan-out and calls until zeroed") {
  auto x = Tensor::vector({1.5, -2.0}, true);
  backward(sum(add(x, x)));
  CHECK(x.grad()[0] == 2.0);
  backward(sum(x));
  CHECK(x.grad()[0] == 3.0);
  x.zero_grad();
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("finite difference oracle examples") {
  SplitMix64 rng(2);
  auto x = random_tensor({6}, rng);
  auto g = finite_diff_gradient([](const Tensor& t) { return sum(t).item(); }, x);
  for (double v : g.data()) CHECK(std::abs(v - 1.0) < 1e-9);

  auto sq = finite_diff_gradient([](const Tensor& t) { return t[0] * t[0]; }, Tensor::scalar(3.0));
  CHECK(std::abs(sq.item() - 6.0) < 1e-8);

  // Three-layer composite: backward and the central difference agree.
  auto w1 = random_tensor({4, 6}, rng, 0.5, false), w2 = random_tensor({6, 5}, rng, 0.5, false);
  auto w3 = random_tensor({5, 1}, rng, 0.5, false);
  auto input = random_tensor({3, 4}, rng);
  auto f = [&](const Tensor& t) {
    return sum(matmul(sigmoid(matmul(layer_norm_noaffine(matmul(t, w1)), w2)), w3));
  };
  input.zero_grad();
  backward(f(input));
  auto numeric = finite_diff_gradient([&](const Tensor& t) { return f(t).item(); }, input);
  std::vector<double> analytic(input.grad().begin(), input.grad().end());
  CHECK(pnp::testing::relative_error(analytic, numeric.to_vector()) < 1e-5);
}

TEST_CASE("finite difference reports non-finite evaluations") {
  auto x = Tensor::vector({1.0, 2.0});
  CHECK_THROWS_AS(finite_diff_gradient(
                      [](const Tensor& t) { return t[0] > 1.0 ? std::nan("") : 0.0; }, x),
                  EvaluationError);
}

TEST_CASE("every differentiable operation matches finite differences") {
  SplitMix64 rng(1234);
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const char* name, double err) {
    if (err > worst) {
      worst = err;
      worst_op = name;
    }
  };
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto v = random_tensor({4}, rng);
    auto s = random_tensor({3}, rng);
    auto m = random_tensor({4, 2}, rng);
    const double k = rng.normal();

    FrozenWeights loss(rng.next());

    track("add", check_gradients([&] { return loss(add(a, b)); }, {a, b}).max_rel_error);
    track("sub", check_gradients([&] { return loss(sub(a, b)); }, {a, b}).max_rel_error);
    track("mul", check_gradients([&] { return loss(mul(a, b)); }, {a, b}).max_rel_error);
    track("scale", check_gradients([&] { return loss(scale(a, k)); }, {a}).max_rel_error);
    track("add_scalar", check_gradients([&] { return loss(add_scalar(a, k)); }, {a}).max_rel_error);
    {
      // Keep ReLU inputs away from the kink so the central difference is exact.
      auto r = a.detach();
      r.set_requires_grad(true);
      for (auto& x : r.mutable_data()) x = std::abs(x) < 0.05 ? 0.5 : x;
      track("relu", check_gradients([&] { return loss(relu(r)); }, {r}).max_rel_error);
    }
    track("sigmoid", check_gradients([&] { return loss(sigmoid(a)); }, {a}).max_rel_error);
    track("square", check_gradients([&] { return loss(square(a)); }, {a}).max_rel_error);
    {
      std::vector<bool> mask(12);
      for (std::size_t i = 0; i < 12; ++i) mask[i] = rng.bounded(3) == 0;
      track("fill_masked", check_gradients([&] { return loss(fill_masked(a, mask, -2.0)); }, {a}).max_rel_error);
    }
    track("add_rowwise", check_gradients([&] { return loss(add_rowwise(a, v)); }, {a, v}).max_rel_error);
    track("mul_rowwise", check_gradients([&] { return loss(mul_rowwise(a, v)); }, {a, v}).max_rel_error);
    track("scale_rows", check_gradients([&] { return loss(scale_rows(a, s)); }, {a, s}).max_rel_error);
    track("matmul", check_gradients([&] { return loss(matmul(a, m)); }, {a, m}).max_rel_error);
    track("transpose", check_gradients([&] { return loss(transpose(a)); }, {a}).max_rel_error);
    track("sum", check_gradients([&] { return scale(sum(a), k); }, {a}).max_rel_error);
    track("mean", check_gradients([&] { return scale(mean(a), k); }, {a}).max_rel_error);
    track("softmax0", check_gradients([&] { return loss(softmax(a, 0)); }, {a}).max_rel_error);
    track("softmax1", check_gradients([&] { return loss(softmax(a, 1)); }, {a}).max_rel_error);
    {
      std::vector<bool> cols = {false, true, false, rng.bounded(2) == 0};
      track("masked_softmax", check_gradients([&] { return loss(masked_softmax_rows(a, cols)); }, {a}).max_rel_error);
    }
    track("layer_norm", check_gradients([&] { return loss(layer_norm_noaffine(a)); }, {a}).max_rel_error);
    {
      std::vector<std::size_t> labels = {rng.bounded(4), rng.bounded(4), rng.bounded(4)};
      track("cross_entropy", check_gradients([&] { return loss(cross_entropy_rows(a, labels)); }, {a}).max_rel_error);
    }
    track("reshape", check_gradients([&] { return loss(reshape(a, {4, 3})); }, {a}).max_rel_error);
    {
      std::vector<std::size_t> rows = {2, 0, 2};
      track("gather_rows", check_gradients([&] { return loss(gather_rows(a, rows)); }, {a}).max_rel_error);
      auto part = random_tensor({2, 4}, rng);
      std::vector<std::size_t> dest = {2, 0};
      track("scatter_rows", check_gradients([&] { return loss(scatter_rows(part, dest, 3)); }, {part}).max_rel_error);
      auto top = random_tensor({1, 4}, rng);
      track("concat_rows", check_gradients([&] { return loss(concat_rows({top, part})); }, {top, part}).max_rel_error);
    }
    {
      auto left = random_tensor({3, 1}, rng);
      auto right = random_tensor({3, 3}, rng);
      track("slice_cols", check_gradients([&] { return loss(slice_cols(a, 1, 3)); }, {a}).max_rel_error);
      track("concat_cols", check_gradients([&] { return loss(concat_cols({left, right})); }, {left, right}).max_rel_error);
    }
  }
  INFO("worst operation: " << worst_op);
  CHECK(worst < 1e-5);
}

TEST_CASE("graph replay is bit-exact and every node gets a gradient buffer") {
  SplitMix64 rng(99);
  auto x = random_tensor({4, 5}, rng);
  auto w = random_tensor({5, 3}, rng);
  auto out = mean(softmax(layer_norm_noaffine(matmul(x, w)), 1));
  const double first = out.item();
  Graph g = Graph::record(out);
  CHECK(g.size() >= 6);
  g.replay();
  CHECK(out.item() == first);

  // Identical inputs rebuilt from scratch give identical bits.
  auto again = mean(softmax(layer_norm_noaffine(matmul(x.detach(), w.detach())), 1));
  CHECK(again.item() == first);

  g.backward();
  CHECK(x.grad().size() == x.numel());
  CHECK(w.grad().size() == w.numel());

  // Replay tracks changed leaves.
  x.mutable_data()[0] += 1.0;
  g.replay();
  auto fresh = mean(softmax(layer_norm_noaffine(matmul(x.detach(), w.detach())), 1));
  CHECK(out.item() == fresh.item());
}
