#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "doctest.h"

#include "pnp/sampler.hpp"
#include "support/fixtures.hpp"

using namespace pnp;
using pnp::testing::brute_force_top;
using pnp::testing::check_gradients;
using pnp::testing::random_feature_map;
using pnp::testing::random_tensor;

namespace {

ScoringNetParams zero_scorer(std::size_t c) {
  return {Tensor({c, kScoringHidden}, 0.0, true), Tensor({kScoringHidden}, 0.0, true),
          Tensor({kScoringHidden, 1}, 0.0, true), Tensor({1}, 0.0, true)};
}

FeatureMap map_from_rows(std::size_t h, std::size_t w, std::vector<double> values, std::size_t c) {
  FeatureMap fm;
  fm.height = h;
  fm.width = w;
  fm.channels = c;
  fm.features = Tensor({h * w, c}, std::move(values));
  return fm;
}

// Perturb a scorer off the ReLU kinks: every hidden pre-activation at least
// `margin` away from zero for the given features.
void keep_off_kinks(ScoringNetParams& p, const Tensor& features, double margin = 1e-3) {
  const std::size_t c = features.dim(1);
  auto b = p.bias1.mutable_data();
  for (std::size_t j = 0; j < kScoringHidden; ++j) {
    for (bool near = true; near;) {
      near = false;
      for (std::size_t i = 0; i < features.dim(0); ++i) {
        double pre = b[j];
        for (std::size_t k = 0; k < c; ++k) pre += features.at(i, k) * p.weight1.at(k, j);
        near = near || std::abs(pre) < margin;
      }
      if (near) b[j] += 3 * margin;
    }
  }
}

}  // namespace

TEST_CASE("scoring network examples") {
  auto fm = map_from_rows(2, 2, std::vector<double>(8, 0.0), 2);
  auto zero = zero_scorer(2);
  const auto zeros = score_features(fm, zero);
  for (double s : zeros.data()) CHECK(s == 0.0);

  // One active hidden unit summing both channels: relu(2 + 3) = 5, times w2 = 0.5.
  auto p = zero_scorer(2);
  p.weight1.mutable_data()[0 * kScoringHidden + 0] = 1.0;
  p.weight1.mutable_data()[1 * kScoringHidden + 0] = 1.0;
  p.weight2.mutable_data()[0] = 0.5;
  auto one = map_from_rows(1, 1, {2, 3}, 2);
  CHECK(score_features(one, p).item() == doctest::Approx(2.5).epsilon(1e-15));

  SplitMix64 rng(1);
  auto wrong = ScoringNetParams::init(3, rng);
  CHECK_THROWS_AS(score_features(fm, wrong), DimensionError);
}

TEST_CASE("scoring gradient against finite differences") {
  SplitMix64 rng(17);
  auto fm = random_feature_map(3, 3, 4, rng);
  auto p = ScoringNetParams::init(4, rng);
  keep_off_kinks(p, fm.features);
  auto r = check_gradients([&] { return mean(score_features(fm, p)); }, p.parameters());
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("padded locations score lowest and are never polled") {
  SplitMix64 rng(3);
  auto fm = random_feature_map(4, 4, 3, rng, false, 0.4);
  auto p = ScoringNetParams::init(3, rng);
  auto s = score_features(fm, p);
  for (std::size_t i = 0; i < fm.size(); ++i) {
    if (fm.is_padded(i)) CHECK(s[i] == std::numeric_limits<double>::lowest());
  }
  auto fine = poll_sample(fm, s, 1.0);
  CHECK(fine.size() == fm.valid_count());
  for (auto i : fine.indices) CHECK_FALSE(fm.is_padded(i));
}

TEST_CASE("scoring is permutation equivariant") {
  SplitMix64 rng(8);
  auto fm = random_feature_map(3, 4, 5, rng);
  auto p = ScoringNetParams::init(5, rng);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm, rng);
  auto permuted = fm;
  permuted.features = gather_rows(fm.features, perm);
  auto s = score_features(fm, p), sp = score_features(permuted, p);
  for (std::size_t i = 0; i < 12; ++i) CHECK(sp[i] == s[perm[i]]);
}

TEST_CASE("poll sampler examples") {
  auto fm = map_from_rows(2, 2, {1, 0, 0, 1, 1, 1, 2, 0}, 2);
  auto scores = Tensor::vector({0.1, 0.9, 0.5, 0.2});
  auto fine = poll_sample(fm, scores, 0.5);
  CHECK(fine.indices == std::vector<std::size_t>{1, 2});

  auto all = poll_sample(fm, scores, 1.0);
  CHECK(all.indices == std::vector<std::size_t>{1, 2, 3, 0});

  auto single = map_from_rows(1, 1, {1, 3}, 2);
  auto mod = poll_sample(single, Tensor::vector({0.5}), 1.0);
  CHECK(mod.vectors[0] == doctest::Approx(-0.5).epsilon(1e-5));
  CHECK(mod.vectors[1] == doctest::Approx(0.5).epsilon(1e-5));

  CHECK_THROWS_AS(poll_sample(fm, scores, 0.0), ContractError);
  CHECK_THROWS_AS(poll_sample(fm, scores, 1.5), ContractError);
  CHECK_THROWS_AS(poll_sample(fm, scores, std::nan("")), ContractError);
}

TEST_CASE("poll count rounding") {
  CHECK(poll_count(0.5, 4) == 2);
  CHECK(poll_count(0.01, 4) == 1);
  CHECK(poll_count(1.0, 7) == 7);
  CHECK(poll_count(0.33, 100) == 33);
  CHECK(poll_count(0.3, 10) == 3);  // 0.3 * 10 is 2.9999999999999996 in binary
}

TEST_CASE("poll selection equals brute-force top-N, ties included") {
  SplitMix64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.bounded(6), w = 1 + rng.bounded(6), L = h * w;
    auto fm = random_feature_map(h, w, 2, rng, false, trial % 3 == 0 ? 0.3 : 0.0);
    std::vector<double> s(L);
    for (auto& x : s) x = static_cast<double>(rng.bounded(4));  // heavy ties
    const double alpha = 0.05 + 0.95 * rng.uniform();
    auto fine = poll_sample(fm, Tensor({L}, s), alpha);
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(alpha * fm.valid_count() + 1e-9)));
    CHECK(fine.indices == brute_force_top(s, fm.padding_mask, n));
  }
}

TEST_CASE("modulated fine vectors pass gradient to every scorer tensor") {
  SplitMix64 rng(31);
  auto fm = random_feature_map(3, 3, 4, rng, false, 0.0, true);
  auto p = ScoringNetParams::init(4, rng);
  keep_off_kinks(p, fm.features);
  auto w = random_tensor({4, 4}, rng, 1.0, false);
  auto loss = [&] {
    auto fine = poll_sample(fm, score_features(fm, p), 0.45);
    return sum(mul(fine.vectors, w));
  };
  auto params = p.parameters();
  params.push_back(fm.features);
  auto r = check_gradients(loss, params);
  CHECK(r.max_rel_error < 1e-5);
  backward(loss());
  for (const auto& t : p.parameters()) {
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("pool sampler examples") {
  // Locations 0 and 1 remain after polling location 2.
  auto fm = map_from_rows(1, 3, {1, 2, 3, 6, 9, 9}, 2);
  auto fine = poll_sample(fm, Tensor::vector({0, 0, 1}), 0.34);
  REQUIRE(fine.indices == std::vector<std::size_t>{2});
  auto wv = Tensor::matrix({{1, 0}, {0, 1}});
  auto coarse = pool_sample(fm, fine, Tensor({2, 1}, 0.0), wv);
  CHECK(coarse.remaining_indices == std::vector<std::size_t>{0, 1});
  CHECK(coarse.aggregation_weights.to_vector() == std::vector<double>{0.5, 0.5});
  CHECK(coarse.vectors.to_vector() == std::vector<double>{2, 4});

  auto one_left = poll_sample(fm, Tensor::vector({1, 0, 1}), 0.67);
  REQUIRE(one_left.indices == std::vector<std::size_t>{0, 2});
  auto wv2 = Tensor::matrix({{2, 0}, {1, 1}});
  auto two = pool_sample(fm, one_left, Tensor::matrix({{0.3, -1}, {2, 0.5}}), wv2);
  CHECK(two.aggregation_weights.to_vector() == std::vector<double>{1.0, 1.0});
  // f'_r = [3, 6] * wv2 = [12, 6]
  CHECK(two.vectors.to_vector() == std::vector<double>{12, 6, 12, 6});

  auto none = pool_sample(fm, fine, Tensor(), wv);
  CHECK(none.size() == 0);
  CHECK(none.remaining_indices.size() == 2);
  auto full = poll_sample(fm, Tensor::vector({0, 0, 1}), 1.0);
  CHECK(pool_sample(fm, full, Tensor({2, 3}, 0.1), wv).size() == 0);
  CHECK_THROWS_AS(pool_sample(fm, fine, Tensor({3, 1}), wv), DimensionError);
}

TEST_CASE("pool sampler gradient against finite differences") {
  SplitMix64 rng(44);
  // Eight locations, four polled, so L - N = 4 remain; C = 3, M = 2.
  auto fm = random_feature_map(2, 4, 3, rng, false, 0.0, true);
  auto scores = random_tensor({8}, rng, 1.0, false);
  auto wa = random_tensor({3, 2}, rng);
  auto wv = random_tensor({3, 3}, rng);
  auto loss = [&] {
    auto fine = poll_sample(fm, scores, 0.5);
    return sum(pool_sample(fm, fine, wa, wv).vectors);
  };
  CHECK(pool_sample(fm, poll_sample(fm, scores, 0.5), wa, wv).aggregation_weights.dim(0) == 4);
  auto r = check_gradients(loss, {wa, wv, fm.features});
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("aggregation weights are probability columns and the sets partition the map") {
  SplitMix64 rng(5150);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 2 + rng.bounded(5), w = 2 + rng.bounded(5), c = 1 + rng.bounded(4);
    auto fm = random_feature_map(h, w, c, rng, false, trial % 2 ? 0.25 : 0.0);
    auto p = PoolParams::init(c, 1 + rng.bounded(4), rng);
    auto fine = poll_sample(fm, random_tensor({h * w}, rng, 1.0, false), 0.05 + 0.9 * rng.uniform());
    auto coarse = pool_sample(fm, fine, p);

    std::set<std::size_t> fine_set(fine.indices.begin(), fine.indices.end());
    CHECK(fine_set.size() == fine.size());
    std::size_t covered = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      const bool in_fine = fine_set.count(i) > 0;
      const bool in_rest = std::binary_search(coarse.remaining_indices.begin(),
                                              coarse.remaining_indices.end(), i);
      CHECK_FALSE((in_fine && in_rest));
      if (fm.is_padded(i)) CHECK_FALSE((in_fine || in_rest));
      else CHECK((in_fine || in_rest));
      covered += in_fine || in_rest;
    }
    CHECK(covered == fm.valid_count());

    if (coarse.size() == 0) continue;
    const auto& a = coarse.aggregation_weights;
    for (std::size_t m = 0; m < a.dim(1); ++m) {
      double total = 0.0;
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        CHECK(a.at(r, m) > 0.0);
        CHECK(a.at(r, m) <= 1.0);
        total += a.at(r, m);
      }
      CHECK(std::abs(total - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("abstract set assembly") {
  SplitMix64 rng(61);
  auto fm = random_feature_map(2, 2, 3, rng, true);
  auto fine = poll_sample(fm, Tensor::vector({0.1, 0.9, 0.5, 0.2}), 0.5);
  auto abs = build_abstract_set(fine, pool_sample(fm, fine, Tensor(), Tensor({3, 3}, 0.0)), fm, true);
  CHECK(abs.token_count() == 2);
  CHECK(abs.tokens.to_vector() == fine.vectors.to_vector());
  CHECK(abs.token_positions.to_vector() == gather_rows(fm.position_embeddings, fine.indices).to_vector());
  CHECK(abs.token_padding == std::vector<bool>{false, false});

  // Uniform weights over remaining locations 0 and 3.
  auto uniform = build_abstract_set(fine, pool_sample(fm, fine, Tensor({3, 1}, 0.0), Tensor({3, 3}, 0.0)), fm, true);
  CHECK(uniform.token_count() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    const double expect = 0.5 * (fm.position_embeddings.at(0, k) + fm.position_embeddings.at(3, k));
    CHECK(uniform.token_positions.at(2, k) == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(uniform.token_padding == std::vector<bool>{false, false, false});

  auto bare = random_feature_map(2, 2, 3, rng);
  auto f2 = poll_sample(bare, Tensor::vector({1, 2, 3, 4}), 0.5);
  CHECK_THROWS_AS(build_abstract_set(f2, pool_sample(bare, f2, Tensor(), Tensor({3, 3}, 0.0)), bare, true), ContractError);
  CHECK_NOTHROW(build_abstract_set(f2, pool_sample(bare, f2, Tensor(), Tensor({3, 3}, 0.0)), bare));
}

TEST_CASE("coarse pseudo positions are convex combinations") {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + rng.bounded(4);
    auto fm = random_feature_map(3 + rng.bounded(3), 3 + rng.bounded(3), c, rng, true);
    auto p = PoolParams::init(c, 1 + rng.bounded(3), rng);
    auto fine = poll_sample(fm, random_tensor({fm.size()}, rng, 1.0, false), 0.2 + 0.5 * rng.uniform());
    auto abs = build_abstract_set(fine, pool_sample(fm, fine, p), fm, true);
    const auto& rem = abs.coarse.remaining_indices;
    for (std::size_t k = 0; k < c; ++k) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (auto r : rem) {
        lo = std::min(lo, fm.position_embeddings.at(r, k));
        hi = std::max(hi, fm.position_embeddings.at(r, k));
      }
      for (std::size_t m = 0; m < abs.coarse.size(); ++m) {
        const double v = abs.token_positions.at(fine.size() + m, k);
        CHECK(v >= lo - 1e-12);
        CHECK(v <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("reverse projection examples") {
  SplitMix64 rng(90);
  auto fm = random_feature_map(2, 3, 2, rng);
  auto fine = poll_sample(fm, random_tensor({6}, rng, 1.0, false), 1.0);
  auto abs = build_abstract_set(fine, pool_sample(fm, fine, Tensor(), Tensor({2, 2}, 0.0)), fm);
  auto encoded = random_tensor({6, 2}, rng, 1.0, false);
  auto grid = reverse_project(encoded, abs, 2, 3);
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t k = 0; k < 2; ++k) CHECK(grid.features.at(fine.indices[t], k) == encoded.at(t, k));
  }

  // M = 1 with weights [0.5, 0.5] over locations 0 and 1.
  auto line = map_from_rows(1, 3, {1, 2, 3, 6, 9, 9}, 2);
  auto f1 = poll_sample(line, Tensor::vector({0, 0, 1}), 0.34);
  auto a1 = build_abstract_set(f1, pool_sample(line, f1, Tensor({2, 1}, 0.0), Tensor({2, 2}, 0.0)), line);
  auto back = reverse_project(Tensor::matrix({{7, 7}, {4, -2}}), a1, 1, 3);
  CHECK(back.features.to_vector() == std::vector<double>{2, -1, 2, -1, 7, 7});

  CHECK_THROWS_AS(reverse_project(Tensor({3, 2}), a1, 1, 3), DimensionError);
}

TEST_CASE("reverse projection preserves fine tokens and zeroes padding") {
  SplitMix64 rng(91);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.bounded(4);
    auto fm = random_feature_map(2 + rng.bounded(4), 2 + rng.bounded(4), c, rng, false, 0.2);
    auto p = PoolParams::init(c, rng.bounded(3), rng);
    auto fine = poll_sample(fm, random_tensor({fm.size()}, rng, 1.0, false), 0.1 + 0.8 * rng.uniform());
    auto abs = build_abstract_set(fine, pool_sample(fm, fine, p), fm);
    auto encoded = random_tensor({abs.token_count(), c}, rng, 1.0, false);
    auto grid = reverse_project(encoded, abs, fm.height, fm.width);
    auto regathered = gather_rows(grid.features, fine.indices);
    for (std::size_t t = 0; t < fine.size(); ++t) {
      for (std::size_t k = 0; k < c; ++k) CHECK(regathered.at(t, k) == encoded.at(t, k));
    }
    for (std::size_t i = 0; i < fm.size(); ++i) {
      if (!fm.is_padded(i)) continue;
      for (std::size_t k = 0; k < c; ++k) CHECK(grid.features.at(i, k) == 0.0);
      CHECK(grid.padding_mask[i]);
    }
  }
}

TEST_CASE("full ratio without pooling keeps every modulated feature") {
  SplitMix64 rng(12);
  auto fm = random_feature_map(3, 3, 4, rng);
  auto p = ScoringNetParams::init(4, rng);
  auto scores = score_features(fm, p);
  auto fine = poll_sample(fm, scores, 1.0);
  auto abs = build_abstract_set(fine, pool_sample(fm, fine, Tensor(), Tensor({4, 4}, 0.0)), fm);
  REQUIRE(abs.token_count() == 9);
  auto normed = layer_norm_noaffine(fm.features);
  std::vector<bool> seen(9, false);
  for (std::size_t t = 0; t < 9; ++t) {
    const std::size_t loc = fine.indices[t];
    seen[loc] = true;
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(abs.tokens.at(t, k) == doctest::Approx(normed.at(loc, k) * scores[loc]).epsilon(1e-14));
    }
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
}

TEST_CASE("poll ratio schedule") {
  PollRatioSchedule fixed(0.33, 0.33, 5);
  for (int i = 0; i < 10; ++i) CHECK(fixed.next() == 0.33);

  PollRatioSchedule s(0.15, 0.8, 42);
  double lo = 1.0, hi = 0.0, total = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double a = sample_poll_ratio(s);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    total += a;
  }
  CHECK(lo >= 0.15);
  CHECK(hi < 0.8);
  CHECK(std::abs(total / 10000.0 - 0.475) < 0.01);

  PollRatioSchedule a(0.2, 0.6, 9), b(0.2, 0.6, 9);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());

  CHECK_THROWS_AS(PollRatioSchedule(0.0, 0.5, 1), ContractError);
  CHECK_THROWS_AS(PollRatioSchedule(0.6, 0.5, 1), ContractError);
  CHECK_THROWS_AS(PollRatioSchedule(0.2, 1.0, 1), ContractError);
}
