#include "cal/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>

#include "cal/binary_io.hpp"
#include "cal/ops.hpp"
#include "cal/rng.hpp"

namespace cal {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566666cULL;
constexpr std::uint64_t kCounterfactualStream = 0x6366ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct SgdOptimizer {
  std::vector<Tensor> params;
  std::vector<std::vector<double>> velocity;
  double momentum;
  double weight_decay;

  SgdOptimizer(std::vector<Tensor> p, double mom, double wd)
      : params(std::move(p)), momentum(mom), weight_decay(wd) {
    velocity.reserve(params.size());
    for (const auto& t : params) velocity.emplace_back(t.size(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto g = params[i].grad();
      auto v = params[i].mutable_values();
      auto& vel = velocity[i];
      for (std::size_t j = 0; j < vel.size(); ++j) {
        vel[j] = momentum * vel[j] + g[j] + weight_decay * v[j];
        v[j] -= lr * vel[j];
      }
    }
  }
};

void validate_config(const TrainConfig& config, std::size_t train_size, int batch_for_shuffle) {
  if (config.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (config.learning_rate <= 0.0) throw std::invalid_argument("train: learning_rate must be > 0");
  if (config.lr_decay_factor <= 0.0 || config.lr_decay_factor > 1.0) {
    throw std::invalid_argument("train: lr_decay_factor must be in (0,1]");
  }
  if (config.lr_decay_interval < 1) {
    throw std::invalid_argument("train: lr_decay_interval must be >= 1");
  }
  if (train_size == 0) throw std::invalid_argument("train: empty training set");
  if (config.objective == Objective::Cal &&
      config.strategy.kind == CounterfactualKind::Shuffle) {
    if (batch_for_shuffle < 2) {
      throw std::invalid_argument(
          "train: the shuffle strategy needs batches of N >= 2 samples, got batch size " +
          std::to_string(batch_for_shuffle));
    }
    if (train_size % static_cast<std::size_t>(config.batch_size) == 1) {
      throw std::invalid_argument(
          "train: the shuffle strategy cannot handle the final batch of size 1 (" +
          std::to_string(train_size) + " samples with batch size " +
          std::to_string(config.batch_size) + "); adjust the batch size");
    }
  }
}

struct BatchOutputs {
  Tensor logits;          // logits the objective's CE term uses
  Tensor representation;  // matching representation (triplet input)
  Tensor loss;
};

// Builds the training-step graph for one batch under the chosen objective.
BatchOutputs batch_loss(const AttentionModel& model, const Tensor& images,
                        const std::vector<int>& labels, const TrainConfig& config,
                        std::size_t step) {
  BatchOutputs out;
  ForwardResult r = forward(model, images);
  switch (config.objective) {
    case Objective::Baseline: {
      out.logits = r.logits;
      out.representation = r.representation;
      out.loss = softmax_cross_entropy(r.logits, labels);
      break;
    }
    case Objective::Cal: {
      CounterfactualStrategy strategy = config.strategy;
      strategy.seed = derive_seed(config.seed, kCounterfactualStream, step);
      Tensor a_bar = generate_counterfactual(r.attention, strategy);
      Tensor y_cf = counterfactual_predict(model, r.features, a_bar);
      Tensor effect = compute_effect(r.logits, y_cf);
      out.logits = r.logits;
      out.representation = r.representation;
      out.loss = cal_loss(effect, r.logits, labels, config.lambda_effect);
      break;
    }
    case Objective::Dropout: {
      Tensor dropped =
          attention_dropout(r.attention, config.dropout_p,
                            derive_seed(config.seed, kDropoutStream, step));
      Tensor rep = global_representation(attention_pool(r.features, dropped));
      out.logits = classify(model, rep);
      out.representation = rep;
      out.loss = softmax_cross_entropy(out.logits, labels);
      break;
    }
    case Objective::Entropy: {
      out.logits = r.logits;
      out.representation = r.representation;
      out.loss = add(softmax_cross_entropy(r.logits, labels),
                     scale(entropy_regularizer(r.attention), config.entropy_weight));
      break;
    }
    case Objective::L2Norm: {
      Tensor normalized = attention_l2_normalize(r.attention);
      Tensor rep = global_representation(attention_pool(r.features, normalized));
      out.logits = classify(model, rep);
      out.representation = rep;
      out.loss = softmax_cross_entropy(out.logits, labels);
      break;
    }
  }
  return out;
}

bool has_zero_row(const Tensor& representation) {
  const std::size_t n = representation.dim(0), d = representation.dim(1);
  auto v = representation.values();
  for (std::size_t i = 0; i < n; ++i) {
    bool all_zero = true;
    const double* row = v.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      if (row[j] != 0.0) {
        all_zero = false;
        break;
      }
    }
    if (all_zero) return true;
  }
  return false;
}

MetricsReport train_loop(AttentionModel& model, const std::vector<SyntheticSample>& train,
                         const TrainConfig& config, bool retrieval,
                         const std::function<bool(int, double)>& stop_after_epoch) {
  validate_config(config, train.size(),
                  std::min<std::size_t>(train.size(), config.batch_size));
  for (const auto& s : train) {
    const int label = s.class_label;
    if (label < 0 || label >= model.num_classes) {
      throw std::invalid_argument("train: sample label " + std::to_string(label) +
                                  " is outside the model's " +
                                  std::to_string(model.num_classes) + " classes");
    }
  }

  MetricsReport report;
  const auto t0 = std::chrono::steady_clock::now();
  SgdOptimizer optimizer(model.parameters(), config.momentum, config.weight_decay);
  bool warned_zero_row = false;
  std::size_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        config.learning_rate * std::pow(config.lr_decay_factor, epoch / config.lr_decay_interval);
    Rng shuffle_rng(derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> order = shuffle_rng.permutation(train.size());

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<SyntheticSample> batch_view;  // gather in shuffled order
      batch_view.reserve(end - begin);
      std::vector<int> labels;
      std::vector<int> identities;
      for (std::size_t i = begin; i < end; ++i) {
        batch_view.push_back(train[order[i]]);
        labels.push_back(train[order[i]].class_label);
        identities.push_back(train[order[i]].identity_label);
      }
      Tensor images = stack_images(batch_view, 0, batch_view.size());

      BatchOutputs outputs = batch_loss(model, images, labels, config, step);
      Tensor loss = outputs.loss;
      if (retrieval) {
        loss = add(loss, triplet_loss(outputs.representation, identities, config.triplet_margin));
      }

      const double loss_value = loss.scalar_value();
      if (!std::isfinite(loss_value)) throw DivergenceError(step);

      if (!warned_zero_row && has_zero_row(outputs.representation)) {
        std::cerr << "warning: all-zero global representation row at step " << step
                  << " (left as zeros)\n";
        warned_zero_row = true;
      }

      model.zero_grads();
      backward(loss);
      optimizer.step(lr);

      report.step_losses.push_back(loss_value);
      epoch_loss += loss_value;
      ++epoch_steps;
      ++step;
    }
    const double mean_loss = epoch_loss / static_cast<double>(epoch_steps);
    report.epoch_losses.push_back(mean_loss);
    if (stop_after_epoch && stop_after_epoch(epoch, mean_loss)) break;
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

Objective parse_objective(const std::string& name) {
  if (name == "baseline") return Objective::Baseline;
  if (name == "cal") return Objective::Cal;
  if (name == "dropout") return Objective::Dropout;
  if (name == "entropy") return Objective::Entropy;
  if (name == "l2norm") return Objective::L2Norm;
  throw std::invalid_argument("unknown objective \"" + name +
                              "\" (expected baseline|cal|dropout|entropy|l2norm)");
}

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::Baseline: return "baseline";
    case Objective::Cal: return "cal";
    case Objective::Dropout: return "dropout";
    case Objective::Entropy: return "entropy";
    case Objective::L2Norm: return "l2norm";
  }
  return "?";
}

MetricsReport train_classification(AttentionModel& model, const Dataset& dataset,
                                   const TrainConfig& config,
                                   const std::function<bool(int, double)>& stop_after_epoch) {
  MetricsReport report = train_loop(model, dataset.train, config, /*retrieval=*/false,
                                    stop_after_epoch);
  if (!dataset.test.empty()) {
    report.top1_accuracy = evaluate_classification(model, dataset.test);
    report.attention_miou = attention_miou(model, dataset.test, config.miou_threshold);
  }
  return report;
}

MetricsReport train_retrieval(AttentionModel& model, const RetrievalSplit& split,
                              const TrainConfig& config,
                              const std::function<bool(int, double)>& stop_after_epoch) {
  // Labels for the softmax head must be dense over the training identities.
  for (const auto& s : split.train) {
    if (s.class_label < 0 || s.class_label >= split.num_train_identities) {
      throw std::invalid_argument("train_retrieval: train identity labels must lie in [0," +
                                  std::to_string(split.num_train_identities) + ")");
    }
  }
  MetricsReport report =
      train_loop(model, split.train, config, /*retrieval=*/true, stop_after_epoch);
  const RetrievalMetrics metrics = evaluate_retrieval(model, split.query, split.gallery);
  report.cmc = metrics.cmc;
  report.map_score = metrics.map_score;
  report.attention_miou = attention_miou(model, split.query, config.miou_threshold);
  return report;
}

Tensor triplet_loss(const Tensor& embeddings, const std::vector<int>& identity_labels,
                    double margin) {
  if (embeddings.rank() != 2) {
    throw std::invalid_argument("triplet_loss: embeddings must be rank 2 [N,D], got " +
                                shape_to_string(embeddings.shape()));
  }
  if (margin < 0.0) throw std::invalid_argument("triplet_loss: margin must be >= 0");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (identity_labels.size() != n) {
    throw std::invalid_argument("triplet_loss: " + std::to_string(identity_labels.size()) +
                                " labels for " + std::to_string(n) + " embeddings");
  }

  auto ev = embeddings.values();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      const double* a = ev.data() + i * d;
      const double* b = ev.data() + j * d;
      for (std::size_t l = 0; l < d; ++l) {
        const double diff = a[l] - b[l];
        acc += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(acc);
    }
  }

  struct AnchorPick {
    std::size_t anchor, positive, negative;
    bool active;  // hinge engaged
  };
  std::vector<AnchorPick> picks;
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best_p = n, best_n = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (identity_labels[j] == identity_labels[a]) {
        if (best_p == n || dist[a * n + j] > dist[a * n + best_p]) best_p = j;
      } else {
        if (best_n == n || dist[a * n + j] < dist[a * n + best_n]) best_n = j;
      }
    }
    if (best_p == n || best_n == n) continue;
    const double hinge = dist[a * n + best_p] - dist[a * n + best_n] + margin;
    picks.push_back({a, best_p, best_n, hinge > 0.0});
    total += std::max(0.0, hinge);
  }

  if (picks.empty()) {
    std::cerr << "warning: triplet_loss batch has no anchor with both a positive and a "
                 "negative; contributing 0\n";
    return Tensor::scalar(0.0);
  }
  const double inv = 1.0 / static_cast<double>(picks.size());
  const double loss = total * inv;

  return make_op(
      "triplet_loss", Shape{1}, {loss}, {embeddings},
      [embeddings, picks = std::move(picks), dist = std::move(dist), n, d,
       inv]() -> detail::BackwardFn {
        return [embeddings, picks, dist, n, d, inv](const std::vector<double>& g) {
          auto ev = embeddings.values();
          std::vector<double> gx(n * d, 0.0);
          const double s = g[0] * inv;
          for (const auto& pick : picks) {
            if (!pick.active) continue;
            const double* ea = ev.data() + pick.anchor * d;
            const double dp = dist[pick.anchor * n + pick.positive];
            const double dn = dist[pick.anchor * n + pick.negative];
            if (dp > 0.0) {
              const double* ep = ev.data() + pick.positive * d;
              for (std::size_t l = 0; l < d; ++l) {
                const double u = s * (ea[l] - ep[l]) / dp;
                gx[pick.anchor * d + l] += u;
                gx[pick.positive * d + l] -= u;
              }
            }
            if (dn > 0.0) {
              const double* en = ev.data() + pick.negative * d;
              for (std::size_t l = 0; l < d; ++l) {
                const double u = s * (ea[l] - en[l]) / dn;
                gx[pick.anchor * d + l] -= u;
                gx[pick.negative * d + l] += u;
              }
            }
          }
          return std::vector<std::vector<double>>{std::move(gx)};
        };
      });
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& axis,
                                      const std::vector<std::string>& values, int num_seeds) {
  if (axis != "strategy" && axis != "M" && axis != "objective") {
    throw std::invalid_argument("run_ablation: unknown axis \"" + axis +
                                "\" (expected strategy|M|objective)");
  }
  if (values.empty()) throw std::invalid_argument("run_ablation: no axis values given");
  if (num_seeds < 1) throw std::invalid_argument("run_ablation: num_seeds must be >= 1");

  std::vector<AblationRow> rows;
  for (const std::string& value : values) {
    ExperimentConfig config = base;
    if (axis == "strategy") {
      config.train.objective = Objective::Cal;
      config.train.strategy.kind = parse_counterfactual_kind(value);
    } else if (axis == "M") {
      const int m = std::stoi(value);
      if (m < 1) throw std::invalid_argument("run_ablation: M must be >= 1, got " + value);
      config.num_heads = m;
    } else {
      config.train.objective = parse_objective(value);
    }

    std::vector<double> top1s, mious, losses, walls;
    for (int si = 0; si < num_seeds; ++si) {
      ExperimentConfig run = config;
      run.data.seed = derive_seed(base.data.seed, 0x61626cULL, static_cast<std::uint64_t>(si));
      run.train.seed = derive_seed(base.train.seed, 0x61626cULL, static_cast<std::uint64_t>(si));
      Dataset dataset = generate_dataset(run.data);
      AttentionModelConfig mc;
      mc.depth = run.depth;
      mc.num_heads = run.num_heads;
      mc.num_classes = run.data.num_classes;
      mc.init_seed = run.train.seed;
      AttentionModel model = AttentionModel::init(mc);
      MetricsReport report = train_classification(model, dataset, run.train);
      top1s.push_back(report.top1_accuracy);
      mious.push_back(report.attention_miou);
      losses.push_back(report.epoch_losses.back());
      walls.push_back(report.wall_seconds);
    }

    AblationRow row;
    row.axis = axis;
    row.value = value;
    row.num_seeds = num_seeds;
    row.top1_mean = mean_of(top1s);
    row.top1_sd = sd_of(top1s);
    row.miou_mean = mean_of(mious);
    row.miou_sd = sd_of(mious);
    row.final_loss_mean = mean_of(losses);
    row.wall_seconds_mean = mean_of(walls);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  auto out = open_output(path);
  out << "axis,value,seeds,top1_mean,top1_sd,miou_mean,miou_sd,final_loss_mean\n";
  for (const auto& r : rows) {
    out << r.axis << ',' << r.value << ',' << r.num_seeds << ',' << fmt_double(r.top1_mean) << ','
        << fmt_double(r.top1_sd) << ',' << fmt_double(r.miou_mean) << ',' << fmt_double(r.miou_sd)
        << ',' << fmt_double(r.final_loss_mean) << '\n';
  }
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  auto out = open_output(path);
  out << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < report.epoch_losses.size(); ++i) {
    out << i << ',' << fmt_double(report.epoch_losses[i]) << '\n';
  }
}

void write_summary_csv(const std::string& path, const MetricsReport& report) {
  auto out = open_output(path);
  out << "metric,value\n";
  out << "top1_accuracy," << fmt_double(report.top1_accuracy) << '\n';
  out << "attention_miou," << fmt_double(report.attention_miou) << '\n';
  if (!report.cmc.empty()) {
    for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{10}}) {
      if (k <= report.cmc.size()) {
        out << "cmc_rank" << k << ',' << fmt_double(report.cmc[k - 1]) << '\n';
      }
    }
    out << "map," << fmt_double(report.map_score) << '\n';
  }
  if (!report.epoch_losses.empty()) {
    out << "final_loss," << fmt_double(report.epoch_losses.back()) << '\n';
  }
}

std::string summary_line(const MetricsReport& report) {
  std::string line = "top1=" + fmt_double(report.top1_accuracy) +
                     " miou=" + fmt_double(report.attention_miou);
  if (!report.cmc.empty()) {
    line += " cmc1=" + fmt_double(report.cmc.front()) + " map=" + fmt_double(report.map_score);
  }
  if (!report.epoch_losses.empty()) {
    line += " final_loss=" + fmt_double(report.epoch_losses.back());
  }
  return line;
}

}  // namespace cal
