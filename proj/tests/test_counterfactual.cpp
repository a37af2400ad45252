#include <algorithm>
#include <cmath>
#include <map>

#include "cal/attention_net.hpp"
#include "cal/counterfactual.hpp"
#include "cal/grad_check.hpp"
#include "cal/ops.hpp"
#include "cal/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cal;
using namespace testutil;

namespace {

AttentionModel tiny_model(std::uint64_t seed = 3) {
  AttentionModelConfig config;
  config.depth = 2;
  config.num_heads = 2;
  config.num_classes = 3;
  config.init_seed = seed;
  return AttentionModel::init(config);
}

CounterfactualStrategy strat(CounterfactualKind kind, std::uint64_t seed = 42) {
  CounterfactualStrategy s;
  s.kind = kind;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("uniform strategy: per-sample constant equal to the attention mean") {
  Rng rng(1);
  Tensor a = random_tensor({3, 2, 4, 4}, rng, 0.0, 2.0);
  Tensor a_bar = generate_counterfactual(a, strat(CounterfactualKind::Uniform));
  auto av = a.values();
  auto bv = a_bar.values();
  for (std::size_t n = 0; n < 3; ++n) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 32; ++j) mean += av[n * 32 + j];
    mean /= 32.0;
    for (std::size_t j = 0; j < 32; ++j) CHECK(std::abs(bv[n * 32 + j] - mean) < 1e-12);
  }

  Tensor half = Tensor::full({2, 2, 3, 3}, 0.5);
  Tensor half_bar = generate_counterfactual(half, strat(CounterfactualKind::Uniform));
  for (double v : half_bar.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("reversed strategy: a constant map reverses to exactly zero") {
  Tensor constant = Tensor::full({2, 3, 4, 4}, 1.25);
  Tensor reversed = generate_counterfactual(constant, strat(CounterfactualKind::Reversed));
  for (double v : reversed.values()) CHECK(v == 0.0);

  // per-sample max minus the map, never negative
  Rng rng(2);
  Tensor a = random_tensor({2, 2, 3, 3}, rng, 0.0, 1.0);
  Tensor r = generate_counterfactual(a, strat(CounterfactualKind::Reversed));
  auto av = a.values();
  auto rv = r.values();
  for (std::size_t n = 0; n < 2; ++n) {
    double vmax = 0.0;
    for (std::size_t j = 0; j < 18; ++j) vmax = std::max(vmax, av[n * 18 + j]);
    for (std::size_t j = 0; j < 18; ++j) {
      CHECK(rv[n * 18 + j] == doctest::Approx(vmax - av[n * 18 + j]));
      CHECK(rv[n * 18 + j] >= 0.0);
    }
  }
}

TEST_CASE("random strategy: values in [0,2) with Monte Carlo mean 1.0 +/- 0.01") {
  Tensor a = Tensor::zeros({4, 4, 16, 16});  // 4096 values per draw
  double total = 0.0;
  std::size_t count = 0;
  double vmin = 1e9, vmax = -1e9;
  for (int draw = 0; draw < 256; ++draw) {  // 1,048,576 samples total
    Tensor a_bar = generate_counterfactual(a, strat(CounterfactualKind::Random, 1000 + draw));
    for (double v : a_bar.values()) {
      total += v;
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    count += a_bar.size();
  }
  CHECK(count >= 1000000);
  CHECK(vmin >= 0.0);
  CHECK(vmax < 2.0);
  CHECK(std::abs(total / count - 1.0) < 0.01);
}

TEST_CASE("shuffle strategy: preserves the per-sample map multiset") {
  Rng rng(3);
  Tensor a = random_tensor({6, 2, 3, 3}, rng, 0.0, 1.0);
  Tensor s = generate_counterfactual(a, strat(CounterfactualKind::Shuffle, 9));
  auto collect = [](const Tensor& t) {
    std::vector<std::vector<double>> rows;
    const std::size_t per = t.size() / t.dim(0);
    auto v = t.values();
    for (std::size_t n = 0; n < t.dim(0); ++n) {
      rows.emplace_back(v.begin() + n * per, v.begin() + (n + 1) * per);
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  CHECK(collect(a) == collect(s));
}

TEST_CASE("shuffle strategy: rejects N=1 and draws permutations roughly uniformly") {
  Tensor single = Tensor::zeros({1, 2, 2, 2});
  CHECK_THROWS_WITH_AS(generate_counterfactual(single, strat(CounterfactualKind::Shuffle)),
                       doctest::Contains("N >= 2"), std::invalid_argument);

  // batch of 3 distinguishable samples: tally which permutation was drawn
  Tensor a({3, 1, 1, 1}, {0.0, 1.0, 2.0});
  std::map<std::vector<int>, int> counts;
  const int trials = 6000;
  for (int i = 0; i < trials; ++i) {
    Tensor s = generate_counterfactual(a, strat(CounterfactualKind::Shuffle, 5000 + i));
    std::vector<int> perm(3);
    for (int j = 0; j < 3; ++j) perm[j] = static_cast<int>(s.values()[j]);
    counts[perm]++;
  }
  CHECK(counts.size() == 6);  // identity included
  for (const auto& [perm, count] : counts) {
    CHECK(std::abs(count / static_cast<double>(trials) - 1.0 / 6.0) < 0.03);
  }
}

TEST_CASE("strategies: deterministic given the seed and never carry gradients") {
  Rng rng(4);
  Tensor base = random_tensor({4, 2, 3, 3}, rng, 0.0, 1.5);
  Tensor traced = relu(Tensor(base.shape(),
                              {base.values().begin(), base.values().end()},
                              /*requires_grad=*/true));
  REQUIRE(traced.tracks_grad());
  for (auto kind : {CounterfactualKind::Random, CounterfactualKind::Uniform,
                    CounterfactualKind::Reversed, CounterfactualKind::Shuffle}) {
    Tensor first = generate_counterfactual(traced, strat(kind, 77));
    Tensor second = generate_counterfactual(traced, strat(kind, 77));
    CHECK(bitwise_equal(first.values(), second.values()));
    CHECK(!first.tracks_grad());
  }
}

TEST_CASE("counterfactual_predict: intervening with the factual maps reproduces the logits") {
  AttentionModel model = tiny_model();
  Rng rng(5);
  Tensor images = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
  ForwardResult r = forward(model, images);
  Tensor y_cf = counterfactual_predict(model, r.features, r.attention.detach());
  CHECK(bitwise_equal(y_cf.values(), r.logits.values()));
}

TEST_CASE("counterfactual_predict: zero attention leaves only the classifier bias") {
  AttentionModel model = tiny_model();
  Rng rng(6);
  Tensor images = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
  ForwardResult r = forward(model, images);
  Tensor y_cf = counterfactual_predict(model, r.features, Tensor::zeros(r.attention.shape()));
  auto bias = model.cls_bias.values();
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(y_cf.values()[n * 3 + k] == bias[k]);
    }
  }
}

TEST_CASE("counterfactual_predict: equals the factual pipeline run with A replaced") {
  AttentionModel model = tiny_model();
  Rng rng(7);
  Tensor images = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
  ForwardResult r = forward(model, images);
  Tensor a_bar = generate_counterfactual(r.attention, strat(CounterfactualKind::Random));
  Tensor expected = classify(model, global_representation(attention_pool(r.features, a_bar)));
  CHECK(bitwise_equal(counterfactual_predict(model, r.features, a_bar).values(),
                      expected.values()));

  Tensor traced = relu(Tensor(a_bar.shape(), {a_bar.values().begin(), a_bar.values().end()},
                              /*requires_grad=*/true));
  CHECK_THROWS_WITH_AS(counterfactual_predict(model, r.features, traced),
                       doctest::Contains("detached"), std::invalid_argument);
  CHECK_THROWS_AS(counterfactual_predict(model, r.features, Tensor::zeros({2, 2, 3, 3})),
                  std::invalid_argument);
}

TEST_CASE("compute_effect: difference semantics") {
  Rng rng(8);
  Tensor y = random_tensor({3, 4}, rng);
  Tensor zero_effect = compute_effect(y, y);
  for (double v : zero_effect.values()) CHECK(v == 0.0);

  Tensor effect = compute_effect(y, Tensor::zeros(y.shape()));
  CHECK(bitwise_equal(effect.values(), y.values()));

  Tensor other = random_tensor({3, 4}, rng);
  Tensor diff = compute_effect(y, other);
  auto yv = y.values();
  auto ov = other.values();
  for (std::size_t i = 0; i < yv.size(); ++i) CHECK(diff.values()[i] == yv[i] - ov[i]);

  CHECK_THROWS_AS(compute_effect(y, Tensor::zeros({3, 5})), std::invalid_argument);
}

TEST_CASE("cal_loss: lambda_effect = 0 recovers the baseline cross entropy bitwise") {
  Rng rng(9);
  Tensor effect = random_tensor({4, 3}, rng);
  Tensor logits = random_tensor({4, 3}, rng);
  const std::vector<int> labels = {0, 1, 2, 1};
  const double switched_off = cal_loss(effect, logits, labels, 0.0).scalar_value();
  const double baseline = softmax_cross_entropy(logits, labels).scalar_value();
  CHECK(switched_off == baseline);
  CHECK_THROWS_AS(cal_loss(effect, logits, labels, -0.5), std::invalid_argument);
}

TEST_CASE("cal_loss: a uniform effect contributes exactly ln K") {
  Rng rng(10);
  Tensor effect = Tensor::full({2, 4}, 0.0);
  Tensor logits = random_tensor({2, 4}, rng);
  const std::vector<int> labels = {1, 3};
  const double with_effect = cal_loss(effect, logits, labels, 1.0).scalar_value();
  const double without = cal_loss(effect, logits, labels, 0.0).scalar_value();
  CHECK(with_effect - without == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cal_loss: matches the sum-of-CE oracle and passes gradient checks") {
  Rng rng(11);
  Tensor effect = random_tensor({3, 4}, rng, -2.0, 2.0);
  Tensor logits = random_tensor({3, 4}, rng, -2.0, 2.0);
  const std::vector<int> labels = {2, 0, 3};
  const double lambda = 0.7;
  const double expected = lambda * softmax_cross_entropy(effect, labels).scalar_value() +
                          softmax_cross_entropy(logits, labels).scalar_value();
  CHECK(cal_loss(effect, logits, labels, lambda).scalar_value() ==
        doctest::Approx(expected).epsilon(1e-12));

  CHECK(check_gradients(
            [&](const Tensor& t) { return cal_loss(t, logits, labels, lambda); }, effect) < 1e-4);
  CHECK(check_gradients(
            [&](const Tensor& t) { return cal_loss(effect, t, labels, lambda); }, logits) < 1e-4);
}

TEST_CASE("detachment: counterfactual generation adds no gradient path through A") {
  AttentionModel model = tiny_model(21);
  Rng rng(12);
  Tensor images = random_tensor({4, 3, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> labels = {0, 1, 2, 0};

  auto run = [&](bool frozen_copy) {
    model.zero_grads();
    ForwardResult r = forward(model, images);
    // reversed/shuffle derive their values from the learned attention, so
    // they are the interesting cases here
    CounterfactualStrategy s = strat(CounterfactualKind::Reversed, 5);
    Tensor source = frozen_copy ? r.attention.detach() : r.attention;
    Tensor a_bar = generate_counterfactual(source, s);
    Tensor y_cf = counterfactual_predict(model, r.features, a_bar);
    Tensor loss = cal_loss(compute_effect(r.logits, y_cf), r.logits, labels, 1.0);
    backward(loss);
    return std::vector<double>(model.attn_weight.grad().begin(),
                               model.attn_weight.grad().end());
  };

  const std::vector<double> with_live = run(false);
  const std::vector<double> with_frozen = run(true);
  REQUIRE(with_live.size() == with_frozen.size());
  for (std::size_t i = 0; i < with_live.size(); ++i) CHECK(with_live[i] == with_frozen[i]);
}

TEST_CASE("attention_dropout: p = 0 is the identity") {
  Rng rng(13);
  Tensor a = random_tensor({2, 2, 3, 3}, rng, 0.0, 1.0);
  Tensor out = attention_dropout(a, 0.0, 7);
  CHECK(bitwise_equal(out.values(), a.values()));
  CHECK_THROWS_AS(attention_dropout(a, 1.0, 7), std::invalid_argument);
  CHECK_THROWS_AS(attention_dropout(a, -0.1, 7), std::invalid_argument);
}

TEST_CASE("attention_dropout: survivors scale by 1/(1-p), survivor rate near p") {
  Tensor ones = Tensor::full({4, 4, 16, 16}, 1.0);
  Tensor out = attention_dropout(ones, 0.5, 11);
  std::size_t survivors = 0;
  for (double v : out.values()) {
    CHECK((v == 0.0 || v == 2.0));
    if (v != 0.0) ++survivors;
  }
  const double rate = static_cast<double>(survivors) / out.size();
  CHECK(std::abs(rate - 0.5) < 0.03);
}

TEST_CASE("attention_dropout: expectation over many seeds recovers the input") {
  Rng rng(14);
  Tensor a = random_tensor({1, 2, 2, 2}, rng, 0.5, 1.5);
  std::vector<double> mean(a.size(), 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    Tensor out = attention_dropout(a, 0.5, 100 + i);
    auto ov = out.values();
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += ov[j];
  }
  auto av = a.values();
  for (std::size_t j = 0; j < mean.size(); ++j) {
    CHECK(std::abs(mean[j] / draws - av[j]) / av[j] < 0.02);
  }
}

TEST_CASE("attention_dropout: gradients flow only through survivors") {
  Rng rng(15);
  Tensor a = random_tensor({2, 2, 3, 3}, rng, 0.2, 1.0);
  CHECK(check_gradients([](const Tensor& t) { return sum(attention_dropout(t, 0.4, 3)); }, a) <
        1e-4);
}

TEST_CASE("entropy_regularizer: extremes") {
  Tensor uniform = Tensor::full({1, 1, 4, 4}, 0.25);
  CHECK(entropy_regularizer(uniform).scalar_value() ==
        doctest::Approx(-std::log(16.0)).epsilon(1e-12));

  std::vector<double> hot(16, 0.0);
  hot[3] = 0.8;
  Tensor one_hot({1, 1, 4, 4}, std::move(hot));
  CHECK(entropy_regularizer(one_hot).scalar_value() == doctest::Approx(0.0));

  Tensor zero = Tensor::zeros({2, 3, 4, 4});
  CHECK(entropy_regularizer(zero).scalar_value() == 0.0);
}

TEST_CASE("entropy_regularizer: matches the p log p oracle and gradient checks") {
  Rng rng(16);
  Tensor a = random_tensor({2, 2, 3, 3}, rng, 0.1, 2.0);
  auto av = a.values();
  double expected = 0.0;
  for (std::size_t m = 0; m < 4; ++m) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += av[m * 9 + j];
    for (std::size_t j = 0; j < 9; ++j) {
      const double p = av[m * 9 + j] / s;
      expected += p * std::log(p);
    }
  }
  expected /= 4.0;
  CHECK(entropy_regularizer(a).scalar_value() == doctest::Approx(expected).epsilon(1e-12));

  CHECK(check_gradients([](const Tensor& t) { return entropy_regularizer(t); }, a) < 1e-4);
}

TEST_CASE("attention_l2_normalize: per-head unit norms") {
  Tensor a({1, 1, 1, 2}, {3.0, 4.0});
  Tensor out = attention_l2_normalize(a);
  CHECK(out.values()[0] == doctest::Approx(0.6));
  CHECK(out.values()[1] == doctest::Approx(0.8));

  Tensor unit({1, 1, 1, 2}, {1.0, 0.0});
  CHECK(bitwise_equal(attention_l2_normalize(unit).values(), unit.values()));

  Rng rng(17);
  Tensor random_maps = random_tensor({2, 3, 4, 4}, rng, 0.0, 2.0);
  Tensor normalized = attention_l2_normalize(random_maps);
  auto nv = normalized.values();
  for (std::size_t m = 0; m < 6; ++m) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 16; ++j) norm += nv[m * 16 + j] * nv[m * 16 + j];
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);
  }
  Tensor zeros = Tensor::zeros({1, 2, 2, 2});
  Tensor zout = attention_l2_normalize(zeros);
  for (double v : zout.values()) CHECK(v == 0.0);
}
