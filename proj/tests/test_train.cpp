#include <cmath>
#include <filesystem>
#include <fstream>

#include "cal/grad_check.hpp"
#include "cal/ops.hpp"
#include "cal/rng.hpp"
#include "cal/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cal;
using namespace testutil;

namespace {

DatasetSpec tiny_data(std::uint64_t seed = 1) {
  DatasetSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = 8;
  spec.test_samples_per_class = 4;
  spec.image_size = 16;
  spec.bias_strength = 0.0;
  spec.seed = seed;
  return spec;
}

AttentionModel tiny_model(int classes, std::uint64_t seed = 2) {
  AttentionModelConfig config;
  config.depth = 2;
  config.num_heads = 2;
  config.num_classes = classes;
  config.init_seed = seed;
  return AttentionModel::init(config);
}

TrainConfig tiny_train(Objective objective, int epochs = 2) {
  TrainConfig config;
  config.epochs = epochs;
  config.batch_size = 4;
  config.learning_rate = 0.02;
  config.objective = objective;
  config.seed = 3;
  return config;
}

std::vector<double> flatten_params(const AttentionModel& model) {
  std::vector<double> out;
  for (const auto& t : model.parameters()) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return out;
}

}  // namespace

TEST_CASE("triplet_loss: identical embeddings across two identities give exactly the margin") {
  Tensor embeddings = Tensor::full({4, 3}, 0.5);
  Tensor loss = triplet_loss(embeddings, {0, 0, 1, 1}, 0.3);
  CHECK(loss.scalar_value() == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("triplet_loss: separated clusters with gap above the margin give zero") {
  Tensor embeddings({4, 2}, {0.0, 0.0, 0.1, 0.0, 5.0, 0.0, 5.1, 0.0});
  Tensor loss = triplet_loss(embeddings, {0, 0, 1, 1}, 0.3);
  CHECK(loss.scalar_value() == 0.0);
}

TEST_CASE("triplet_loss: degenerate batches contribute zero with a warning") {
  Tensor embeddings({3, 2}, {0.0, 0.0, 1.0, 0.0, 2.0, 0.0});
  Tensor loss = triplet_loss(embeddings, {0, 1, 2}, 0.3);  // no identity has two views
  CHECK(loss.scalar_value() == 0.0);
  CHECK_THROWS_AS(triplet_loss(embeddings, {0, 1}, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(triplet_loss(embeddings, {0, 1, 2}, -1.0), std::invalid_argument);
}

TEST_CASE("triplet_loss: matches the all-pairs brute-force oracle") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 6, d = 4;
    Tensor embeddings = random_tensor({n, d}, rng);
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(rng.uniform_int(3));
    const double margin = 0.4;

    auto ev = embeddings.values();
    auto dist = [&](std::size_t i, std::size_t j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < d; ++l) {
        const double diff = ev[i * d + l] - ev[j * d + l];
        acc += diff * diff;
      }
      return std::sqrt(acc);
    };
    double total = 0.0;
    int anchors = 0;
    for (std::size_t a = 0; a < n; ++a) {
      double hardest_pos = -1.0, hardest_neg = 1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == a) continue;
        if (ids[j] == ids[a]) {
          hardest_pos = std::max(hardest_pos, dist(a, j));
        } else {
          hardest_neg = std::min(hardest_neg, dist(a, j));
        }
      }
      if (hardest_pos < 0.0 || hardest_neg > 1e299) continue;
      ++anchors;
      total += std::max(0.0, hardest_pos - hardest_neg + margin);
    }
    if (anchors == 0) continue;
    CHECK(triplet_loss(embeddings, ids, margin).scalar_value() ==
          doctest::Approx(total / anchors).epsilon(1e-12));
  }
}

TEST_CASE("triplet_loss: gradients pass the finite-difference check") {
  Rng rng(7);
  Tensor embeddings = random_tensor({6, 3}, rng);
  const std::vector<int> ids = {0, 0, 1, 1, 2, 2};
  CHECK(check_gradients([&](const Tensor& t) { return triplet_loss(t, ids, 0.4); }, embeddings) <
        1e-4);
}

TEST_CASE("train: switch-off equivalence of cal with lambda_effect = 0 and baseline") {
  Dataset dataset = generate_dataset(tiny_data());

  AttentionModel baseline_model = tiny_model(2);
  TrainConfig baseline_config = tiny_train(Objective::Baseline);
  MetricsReport baseline = train_classification(baseline_model, dataset, baseline_config);

  AttentionModel cal_model = tiny_model(2);
  TrainConfig cal_config = tiny_train(Objective::Cal);
  cal_config.lambda_effect = 0.0;
  cal_config.strategy.kind = CounterfactualKind::Random;
  MetricsReport cal = train_classification(cal_model, dataset, cal_config);

  REQUIRE(baseline.step_losses.size() == cal.step_losses.size());
  for (std::size_t i = 0; i < baseline.step_losses.size(); ++i) {
    CHECK(baseline.step_losses[i] == cal.step_losses[i]);
  }
  CHECK(flatten_params(baseline_model) == flatten_params(cal_model));
}

TEST_CASE("train: one-sample memorization drives the loss below 1e-3") {
  Dataset base = generate_dataset(tiny_data(9));
  Dataset single;
  single.spec = base.spec;
  single.train = {base.train.front()};

  AttentionModel model = tiny_model(2, 11);
  TrainConfig config = tiny_train(Objective::Baseline, 600);
  config.batch_size = 1;
  config.learning_rate = 0.08;
  config.lr_decay_factor = 1.0;
  config.weight_decay = 0.0;
  MetricsReport report = train_classification(
      model, single, config, [](int, double loss) { return loss < 1e-3; });
  CHECK(report.epoch_losses.back() < 1e-3);
}

TEST_CASE("train: identical config and seed reproduce the final parameters") {
  Dataset dataset = generate_dataset(tiny_data(13));
  AttentionModel a = tiny_model(2, 17);
  AttentionModel b = tiny_model(2, 17);
  TrainConfig config = tiny_train(Objective::Cal);
  config.strategy.kind = CounterfactualKind::Shuffle;
  train_classification(a, dataset, config);
  train_classification(b, dataset, config);
  CHECK(flatten_params(a) == flatten_params(b));
}

TEST_CASE("train: every objective runs and reports") {
  Dataset dataset = generate_dataset(tiny_data(15));
  for (Objective objective : {Objective::Dropout, Objective::Entropy, Objective::L2Norm}) {
    AttentionModel model = tiny_model(2, 19);
    TrainConfig config = tiny_train(objective, 1);
    MetricsReport report = train_classification(model, dataset, config);
    CHECK(report.epoch_losses.size() == 1);
    CHECK(std::isfinite(report.epoch_losses[0]));
    CHECK(report.top1_accuracy >= 0.0);
    CHECK(report.top1_accuracy <= 1.0);
    CHECK(report.attention_miou >= 0.0);
    CHECK(report.attention_miou <= 1.0);
  }
}

TEST_CASE("train: diverging runs abort with the step index") {
  Dataset dataset = generate_dataset(tiny_data(21));
  AttentionModel model = tiny_model(2, 23);
  TrainConfig config = tiny_train(Objective::Baseline, 3);
  // large enough that the updated weights overflow the next forward pass
  config.learning_rate = 1e300;
  bool thrown = false;
  try {
    train_classification(model, dataset, config);
  } catch (const DivergenceError& e) {
    thrown = true;
    CHECK(e.step >= 1);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  CHECK(thrown);
}

TEST_CASE("train: upfront validation of labels and shuffle batches") {
  Dataset dataset = generate_dataset(tiny_data(25));
  AttentionModel narrow = tiny_model(2);
  Dataset bad = dataset;
  bad.train[0].class_label = 7;
  CHECK_THROWS_AS(train_classification(narrow, bad, tiny_train(Objective::Baseline)),
                  std::invalid_argument);

  TrainConfig shuffle_config = tiny_train(Objective::Cal);
  shuffle_config.strategy.kind = CounterfactualKind::Shuffle;
  shuffle_config.batch_size = 1;
  AttentionModel model = tiny_model(2);
  CHECK_THROWS_WITH_AS(train_classification(model, dataset, shuffle_config),
                       doctest::Contains("N >= 2"), std::invalid_argument);
}

TEST_CASE("train_retrieval: trains with triplet loss and reports CMC/mAP") {
  DatasetSpec spec;
  spec.num_identities = 8;
  spec.views_per_identity = 4;
  spec.image_size = 16;
  spec.seed = 27;
  RetrievalSplit split = make_retrieval_split(spec);

  AttentionModelConfig mc;
  mc.depth = 2;
  mc.num_heads = 2;
  mc.num_classes = split.num_train_identities;
  mc.init_seed = 29;
  AttentionModel model = AttentionModel::init(mc);

  TrainConfig config = tiny_train(Objective::Cal, 2);
  config.batch_size = 8;
  MetricsReport report = train_retrieval(model, split, config);
  CHECK(report.cmc.size() == split.gallery.size());
  CHECK(report.cmc.back() == doctest::Approx(1.0));
  CHECK(report.map_score >= 0.0);
  CHECK(report.map_score <= 1.0);
  for (double loss : report.step_losses) CHECK(std::isfinite(loss));
}

TEST_CASE("run_ablation: strategy axis emits one complete row per strategy") {
  ExperimentConfig base;
  base.data = tiny_data(31);
  base.num_heads = 2;
  base.depth = 2;
  base.train = tiny_train(Objective::Cal, 1);

  auto rows = run_ablation(base, "strategy", {"random", "uniform", "reversed", "shuffle"}, 1);
  REQUIRE(rows.size() == 4);
  for (const auto& row : rows) {
    CHECK(row.axis == "strategy");
    CHECK(row.num_seeds == 1);
    CHECK(std::isfinite(row.top1_mean));
    CHECK(std::isfinite(row.miou_mean));
    CHECK(std::isfinite(row.final_loss_mean));
    CHECK(row.wall_seconds_mean > 0.0);
  }

  const auto path = std::filesystem::temp_directory_path() / "cal_ablation_test.csv";
  write_ablation_csv(path.string(), rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "axis,value,seeds,top1_mean,top1_sd,miou_mean,miou_sd,final_loss_mean");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 4);
  std::filesystem::remove(path);
}

TEST_CASE("run_ablation: M axis trains one model per head count") {
  ExperimentConfig base;
  base.data = tiny_data(33);
  base.num_heads = 2;
  base.depth = 2;
  base.train = tiny_train(Objective::Baseline, 1);
  auto rows = run_ablation(base, "M", {"1", "2"}, 1);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].value == "1");
  CHECK(rows[1].value == "2");
}

TEST_CASE("run_ablation: objective axis with several seeds fills mean and sd") {
  ExperimentConfig base;
  base.data = tiny_data(35);
  base.data.samples_per_class = 4;
  base.num_heads = 2;
  base.depth = 2;
  base.train = tiny_train(Objective::Baseline, 1);
  auto rows = run_ablation(base, "objective", {"baseline", "cal"}, 2);
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) {
    CHECK(row.num_seeds == 2);
    CHECK(row.top1_sd >= 0.0);
    CHECK(row.miou_sd >= 0.0);
  }
  CHECK_THROWS_AS(run_ablation(base, "nonsense", {"x"}, 1), std::invalid_argument);
}

TEST_CASE("metrics CSV: per-epoch rows plus summary") {
  MetricsReport report;
  report.epoch_losses = {1.5, 0.75};
  report.top1_accuracy = 0.5;
  report.attention_miou = 0.25;
  const auto path = std::filesystem::temp_directory_path() / "cal_metrics_test.csv";
  write_metrics_csv(path.string(), report);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,mean_loss");
  std::getline(in, line);
  CHECK(line == "0,1.5");
  std::getline(in, line);
  CHECK(line == "1,0.75");
  std::filesystem::remove(path);

  const std::string summary = summary_line(report);
  CHECK(summary.find("top1=0.5") != std::string::npos);
  CHECK(summary.find("miou=0.25") != std::string::npos);
}
