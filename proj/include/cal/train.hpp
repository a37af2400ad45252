#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cal/attention_net.hpp"
#include "cal/counterfactual.hpp"
#include "cal/metrics.hpp"
#include "cal/synthdata.hpp"

namespace cal {

enum class Objective { Baseline, Cal, Dropout, Entropy, L2Norm };

Objective parse_objective(const std::string& name);
std::string to_string(Objective objective);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.01;
  double lr_decay_factor = 0.9;  // multiplied in every lr_decay_interval epochs
  int lr_decay_interval = 2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  Objective objective = Objective::Baseline;
  CounterfactualStrategy strategy;  // used when objective == Cal
  double lambda_effect = 1.0;
  double dropout_p = 0.5;       // Dropout objective
  double entropy_weight = 1.0;  // Entropy objective
  double triplet_margin = 0.3;  // retrieval mode
  double miou_threshold = 0.5;
  std::uint64_t seed = 0;
};

struct MetricsReport {
  double top1_accuracy = 0.0;
  double attention_miou = 0.0;
  std::vector<double> cmc;  // retrieval mode
  double map_score = 0.0;   // retrieval mode
  std::vector<double> epoch_losses;
  std::vector<double> step_losses;
  double wall_seconds = 0.0;
};

// Training aborted because the loss stopped being finite.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(std::size_t at_step)
      : std::runtime_error("training diverged (non-finite loss) at step " +
                           std::to_string(at_step)),
        step(at_step) {}
  std::size_t step;
};

// SGD with momentum, weight decay and stepped learning-rate decay.
// Per step: forward, the selected objective, backward, parameter update.
// Deterministic given config.seed. `stop_after_epoch`, when provided, is
// called after each epoch and may end training early.
MetricsReport train_classification(
    AttentionModel& model, const Dataset& dataset, const TrainConfig& config,
    const std::function<bool(int epoch, double mean_loss)>& stop_after_epoch = {});

// Retrieval mode: the objective above plus a batch-hard triplet loss on the
// global representation; evaluation fills CMC/mAP from the query/gallery.
MetricsReport train_retrieval(
    AttentionModel& model, const RetrievalSplit& split, const TrainConfig& config,
    const std::function<bool(int epoch, double mean_loss)>& stop_after_epoch = {});

// Batch-hard triplet loss: per anchor, hardest-positive distance minus
// hardest-negative distance plus margin, hinged at zero, averaged over
// anchors that have both a positive and a negative. Distances are Euclidean;
// embeddings are expected row-normalized (the pipeline's representation is).
// Batches with no usable anchor yield 0 and print a warning once.
Tensor triplet_loss(const Tensor& embeddings, const std::vector<int>& identity_labels,
                    double margin);

// One trained model per (axis value, seed); reports are averaged per value.
struct ExperimentConfig {
  DatasetSpec data;
  int num_heads = 32;
  int depth = 4;
  TrainConfig train;
};

struct AblationRow {
  std::string axis;
  std::string value;
  int num_seeds = 1;
  double top1_mean = 0.0, top1_sd = 0.0;
  double miou_mean = 0.0, miou_sd = 0.0;
  double final_loss_mean = 0.0;
  double wall_seconds_mean = 0.0;  // reported, never serialized
};

// axis is one of "strategy", "M", "objective".
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& axis,
                                      const std::vector<std::string>& values, int num_seeds);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

// Per-epoch losses, one row each; wall-clock time is intentionally omitted
// so reruns are byte-identical.
void write_metrics_csv(const std::string& path, const MetricsReport& report);
void write_summary_csv(const std::string& path, const MetricsReport& report);
std::string summary_line(const MetricsReport& report);

}  // namespace cal
