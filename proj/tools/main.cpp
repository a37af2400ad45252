// calattn: dataset generation, training, evaluation, ablations and
// attention-map visualization for the counterfactual attention experiments.
//
// Exit codes: 0 success, 2 usage or validation failure, 3 runtime failure
// (training divergence, I/O mid-run).

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cal/attention_net.hpp"
#include "cal/counterfactual.hpp"
#include "cal/metrics.hpp"
#include "cal/parallel.hpp"
#include "cal/synthdata.hpp"
#include "cal/train.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_output_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw UsageError("cannot create output directory: " + out);
  }
  // probe writability before any long computation starts
  const fs::path probe = fs::path(out) / ".calattn_probe";
  std::ofstream test(probe);
  if (!test) throw UsageError("output directory is not writable: " + out);
  test.close();
  fs::remove(probe);
}

std::string dataset_path(const std::string& data) {
  if (fs::is_directory(data)) return (fs::path(data) / "dataset.bin").string();
  return data;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

void write_resolved_config(CLI::App* cmd, const std::string& out, const std::string& name) {
  std::ofstream file(fs::path(out) / name);
  file << cmd->config_to_str(/*default_also=*/true, /*write_description=*/false);
}

std::vector<int> parse_index_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::vector<std::string> parse_string_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// hot color ramp: black -> red -> yellow -> white
void ramp_color(double v, unsigned char* rgb) {
  const double r = std::clamp(3.0 * v, 0.0, 1.0);
  const double g = std::clamp(3.0 * v - 1.0, 0.0, 1.0);
  const double b = std::clamp(3.0 * v - 2.0, 0.0, 1.0);
  rgb[0] = static_cast<unsigned char>(std::lround(r * 255.0));
  rgb[1] = static_cast<unsigned char>(std::lround(g * 255.0));
  rgb[2] = static_cast<unsigned char>(std::lround(b * 255.0));
}

cal::Tensor heatmap_image(std::span<const double> cells, std::size_t fh, std::size_t fw,
                          int image_size) {
  double vmax = 0.0;
  for (double v : cells) vmax = std::max(vmax, v);
  const std::size_t s = static_cast<std::size_t>(image_size);
  std::vector<double> data(3 * s * s, 0.0);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t cy = y * fh / s, cx = x * fw / s;
      const double v = vmax > 0.0 ? cells[cy * fw + cx] / vmax : 0.0;
      unsigned char rgb[3];
      ramp_color(v, rgb);
      data[0 * s * s + y * s + x] = rgb[0] / 255.0;
      data[1 * s * s + y * s + x] = rgb[1] / 255.0;
      data[2 * s * s + y * s + x] = rgb[2] / 255.0;
    }
  }
  return cal::Tensor({3, s, s}, std::move(data));
}

void draw_rect_outline(cal::Tensor& image, const std::array<int, 4>& rect, double r, double g,
                       double b) {
  const std::size_t s = image.dim(1);
  auto v = image.mutable_values();
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= static_cast<int>(s) || y >= static_cast<int>(s)) return;
    v[0 * s * s + y * s + x] = r;
    v[1 * s * s + y * s + x] = g;
    v[2 * s * s + y * s + x] = b;
  };
  for (int x = rect[0]; x < rect[2]; ++x) {
    put(x, rect[1]);
    put(x, rect[3] - 1);
  }
  for (int y = rect[1]; y < rect[3]; ++y) {
    put(rect[0], y);
    put(rect[2] - 1, y);
  }
}

struct GenOptions {
  cal::DatasetSpec spec;
  std::string out;
};

int run_gen(const GenOptions& opt, CLI::App* cmd) {
  ensure_output_dir(opt.out);
  const fs::path dir(opt.out);

  std::size_t train = 0, test = 0, query = 0, gallery = 0;
  if (opt.spec.num_identities > 0) {
    cal::RetrievalSplit split = cal::make_retrieval_split(opt.spec);
    cal::save_retrieval_split(split, (dir / "dataset.bin").string());
    train = split.train.size();
    query = split.query.size();
    gallery = split.gallery.size();
  } else {
    cal::Dataset dataset = cal::generate_dataset(opt.spec);
    cal::save_dataset(dataset, (dir / "dataset.bin").string());
    train = dataset.train.size();
    test = dataset.test.size();
  }

  std::ofstream manifest(dir / "manifest.txt");
  manifest << "classes=" << opt.spec.num_classes << "\n"
           << "samples_per_class=" << opt.spec.samples_per_class << "\n"
           << "test_samples_per_class=" << opt.spec.test_samples_per_class << "\n"
           << "image_size=" << opt.spec.image_size << "\n"
           << "rho=" << opt.spec.bias_strength << "\n"
           << "identities=" << opt.spec.num_identities << "\n"
           << "views_per_identity=" << opt.spec.views_per_identity << "\n"
           << "seed=" << opt.spec.seed << "\n"
           << "train=" << train << "\ntest=" << test << "\nquery=" << query
           << "\ngallery=" << gallery << "\n";
  write_resolved_config(cmd, opt.out, "gen_config.txt");

  std::cout << "wrote " << (dir / "dataset.bin").string() << " (train=" << train;
  if (opt.spec.num_identities > 0) {
    std::cout << " query=" << query << " gallery=" << gallery;
  } else {
    std::cout << " test=" << test;
  }
  std::cout << " rho=" << opt.spec.bias_strength << " seed=" << opt.spec.seed << ")\n";
  return 0;
}

struct TrainOptions {
  std::string data;
  std::string out;
  std::string objective = "baseline";
  std::string strategy = "random";
  cal::TrainConfig config;
  int heads = -1;  // default depends on the dataset kind
  int depth = 4;
};

int run_train(const TrainOptions& opt, CLI::App* cmd) {
  const std::string path = dataset_path(opt.data);
  require_file(path, "dataset");
  ensure_output_dir(opt.out);

  cal::TrainConfig config = opt.config;
  config.objective = cal::parse_objective(opt.objective);
  config.strategy.kind = cal::parse_counterfactual_kind(opt.strategy);

  const bool retrieval = cal::is_retrieval_file(path);
  const int heads = opt.heads > 0 ? opt.heads : (retrieval ? 8 : 32);

  cal::AttentionModelConfig mc;
  mc.depth = opt.depth;
  mc.num_heads = heads;
  mc.init_seed = config.seed;

  cal::MetricsReport report;
  if (retrieval) {
    cal::RetrievalSplit split = cal::load_retrieval_split(path);
    mc.num_classes = split.num_train_identities;
    cal::AttentionModel model = cal::AttentionModel::init(mc);
    report = cal::train_retrieval(model, split, config);
    cal::save_checkpoint(model, (fs::path(opt.out) / "checkpoint.bin").string());
  } else {
    cal::Dataset dataset = cal::load_dataset(path);
    mc.num_classes = dataset.spec.num_classes;
    cal::AttentionModel model = cal::AttentionModel::init(mc);
    report = cal::train_classification(model, dataset, config);
    cal::save_checkpoint(model, (fs::path(opt.out) / "checkpoint.bin").string());
  }

  cal::write_metrics_csv((fs::path(opt.out) / "metrics.csv").string(), report);
  cal::write_summary_csv((fs::path(opt.out) / "summary.csv").string(), report);
  write_resolved_config(cmd, opt.out, "train_config.txt");
  std::cout << cal::summary_line(report) << " wall_seconds=" << report.wall_seconds << "\n";
  return 0;
}

struct EvalOptions {
  std::string data;
  std::string checkpoint;
  std::string mode = "auto";
  std::string out;
  double miou_threshold = 0.5;
};

int run_eval(const EvalOptions& opt, CLI::App* cmd) {
  const std::string path = dataset_path(opt.data);
  require_file(path, "dataset");
  require_file(opt.checkpoint, "checkpoint");
  if (!opt.out.empty()) ensure_output_dir(opt.out);

  cal::AttentionModel model = cal::load_checkpoint(opt.checkpoint);
  const bool file_retrieval = cal::is_retrieval_file(path);
  bool retrieval = file_retrieval;
  if (opt.mode == "classification") retrieval = false;
  if (opt.mode == "retrieval") retrieval = true;
  if (retrieval && !file_retrieval) {
    throw UsageError("--mode retrieval needs a retrieval dataset (no identities in " + path + ")");
  }
  if (!retrieval && file_retrieval) {
    throw UsageError("--mode classification cannot read a retrieval dataset: " + path);
  }

  cal::MetricsReport report;
  if (retrieval) {
    cal::RetrievalSplit split = cal::load_retrieval_split(path);
    const cal::RetrievalMetrics metrics =
        cal::evaluate_retrieval(model, split.query, split.gallery);
    report.cmc = metrics.cmc;
    report.map_score = metrics.map_score;
    report.attention_miou = cal::attention_miou(model, split.query, opt.miou_threshold);
  } else {
    cal::Dataset dataset = cal::load_dataset(path);
    if (dataset.spec.num_classes != model.num_classes) {
      throw UsageError("checkpoint expects " + std::to_string(model.num_classes) +
                       " classes but the dataset has " +
                       std::to_string(dataset.spec.num_classes));
    }
    report.top1_accuracy = cal::evaluate_classification(model, dataset.test);
    report.attention_miou = cal::attention_miou(model, dataset.test, opt.miou_threshold);
  }

  if (!opt.out.empty()) {
    cal::write_summary_csv((fs::path(opt.out) / "summary.csv").string(), report);
    write_resolved_config(cmd, opt.out, "eval_config.txt");
  }
  std::cout << cal::summary_line(report) << "\n";
  return 0;
}

struct VisualizeOptions {
  std::string data;
  std::string checkpoint;
  std::string samples = "0";
  std::string split = "test";
  std::string out;
  double miou_threshold = 0.5;
};

int run_visualize(const VisualizeOptions& opt, CLI::App* cmd) {
  const std::string path = dataset_path(opt.data);
  require_file(path, "dataset");
  require_file(opt.checkpoint, "checkpoint");
  ensure_output_dir(opt.out);

  std::vector<cal::SyntheticSample> samples;
  if (cal::is_retrieval_file(path)) {
    cal::RetrievalSplit split = cal::load_retrieval_split(path);
    if (opt.split == "train") {
      samples = std::move(split.train);
    } else if (opt.split == "query") {
      samples = std::move(split.query);
    } else {
      samples = std::move(split.gallery);
    }
  } else {
    cal::Dataset dataset = cal::load_dataset(path);
    samples = opt.split == "train" ? std::move(dataset.train) : std::move(dataset.test);
  }

  cal::AttentionModel model = cal::load_checkpoint(opt.checkpoint);
  const std::vector<int> indices = parse_index_list(opt.samples);
  if (indices.empty()) throw UsageError("no sample indices given");
  for (int index : indices) {
    if (index < 0 || static_cast<std::size_t>(index) >= samples.size()) {
      throw UsageError("sample index " + std::to_string(index) + " out of range (split has " +
                       std::to_string(samples.size()) + " samples)");
    }
  }

  cal::NoGradGuard no_grad;
  for (int index : indices) {
    const cal::SyntheticSample& sample = samples[index];
    const int image_size = static_cast<int>(sample.image.dim(1));
    const fs::path dir(opt.out);
    const std::string stem = "sample_" + std::to_string(index);
    cal::write_ppm((dir / (stem + "_original.ppm")).string(), sample.image);

    cal::Tensor batch = cal::stack_images(samples, index, index + 1);
    cal::Tensor attention = cal::compute_attention(model, cal::extract_features(model, batch));
    const std::size_t heads = attention.dim(1);
    const std::size_t fh = attention.dim(2), fw = attention.dim(3);
    auto av = attention.values();
    for (std::size_t m = 0; m < heads; ++m) {
      std::span<const double> cells(av.data() + m * fh * fw, fh * fw);
      cal::write_ppm((dir / (stem + "_head" + std::to_string(m) + ".ppm")).string(),
                     heatmap_image(cells, fh, fw, image_size));
    }

    const std::vector<double> agg = cal::max_over_heads(attention, 0);
    const auto rect =
        cal::attention_high_score_rect(agg, fh, fw, image_size, opt.miou_threshold);
    cal::Tensor overlay = sample.image.detach();
    draw_rect_outline(overlay, sample.object_bbox, 0.0, 1.0, 0.0);
    if (rect != std::array<int, 4>{0, 0, 0, 0}) {
      draw_rect_outline(overlay, rect, 1.0, 0.0, 0.0);
    }
    cal::write_ppm((dir / (stem + "_overlay.ppm")).string(), overlay);
  }
  write_resolved_config(cmd, opt.out, "visualize_config.txt");
  std::cout << "wrote visualizations for " << indices.size() << " sample(s) to " << opt.out
            << "\n";
  return 0;
}

struct AblateOptions {
  cal::ExperimentConfig base;
  std::string axis = "strategy";
  std::string values;
  std::string objective = "baseline";
  std::string strategy = "random";
  int seeds = 1;
  std::string out;
};

int run_ablate(const AblateOptions& opt_in, CLI::App* cmd) {
  AblateOptions opt = opt_in;
  ensure_output_dir(opt.out);
  opt.base.train.objective = cal::parse_objective(opt.objective);
  opt.base.train.strategy.kind = cal::parse_counterfactual_kind(opt.strategy);

  std::vector<std::string> values = parse_string_list(opt.values);
  if (values.empty()) {
    if (opt.axis == "strategy") {
      values = {"random", "uniform", "reversed", "shuffle"};
    } else if (opt.axis == "M") {
      values = {"1", "8", "32"};
    } else if (opt.axis == "objective") {
      values = {"baseline", "cal", "dropout", "entropy", "l2norm"};
    }
  }

  const auto rows = cal::run_ablation(opt.base, opt.axis, values, opt.seeds);
  const std::string csv = (fs::path(opt.out) / ("ablation_" + opt.axis + ".csv")).string();
  cal::write_ablation_csv(csv, rows);
  write_resolved_config(cmd, opt.out, "ablate_config.txt");
  for (const auto& row : rows) {
    std::cout << row.axis << "=" << row.value << " top1=" << row.top1_mean
              << " miou=" << row.miou_mean << " (seeds=" << row.num_seeds << ")\n";
  }
  std::cout << "wrote " << csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual attention learning at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  // key=value config file; use a [gen]/[train]/... section or dotted keys
  // (train.epochs=30) per subcommand. Command-line flags override the file.
  app.set_config("--config");
  std::function<int()> action;
  int threads = 1;
  app.add_option("--threads", threads, "worker thread cap for data generation")
      ->check(CLI::PositiveNumber);

  GenOptions gen;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
  gen_cmd->add_option("--classes", gen.spec.num_classes, "number of classes")
      ->capture_default_str();
  gen_cmd->add_option("--per-class", gen.spec.samples_per_class, "training samples per class")
      ->capture_default_str();
  gen_cmd->add_option("--test-per-class", gen.spec.test_samples_per_class,
                      "test samples per class")
      ->capture_default_str();
  gen_cmd->add_option("--image-size", gen.spec.image_size, "square image size")
      ->capture_default_str();
  gen_cmd->add_option("--rho", gen.spec.bias_strength,
                      "train background bias strength in [0,1]")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--identities", gen.spec.num_identities,
                      "identity count (> 0 switches to retrieval data)")
      ->capture_default_str();
  gen_cmd->add_option("--views", gen.spec.views_per_identity, "views per identity")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "generation seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->callback([&] { action = [&] { return run_gen(gen, gen_cmd); }; });

  TrainOptions train;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a generated dataset");
  train_cmd->add_option("--data", train.data, "dataset file or directory")->required();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--objective", train.objective,
                        "baseline|cal|dropout|entropy|l2norm")
      ->capture_default_str();
  train_cmd->add_option("--strategy", train.strategy, "random|uniform|reversed|shuffle")
      ->capture_default_str();
  train_cmd->add_option("--lambda-effect", train.config.lambda_effect,
                        "weight of the effect cross-entropy term")
      ->capture_default_str();
  train_cmd->add_option("--epochs", train.config.epochs, "training epochs")
      ->capture_default_str();
  train_cmd->add_option("--batch", train.config.batch_size, "batch size")->capture_default_str();
  train_cmd->add_option("--lr", train.config.learning_rate, "initial learning rate")
      ->capture_default_str();
  train_cmd->add_option("--momentum", train.config.momentum, "SGD momentum")
      ->capture_default_str();
  train_cmd->add_option("--weight-decay", train.config.weight_decay, "L2 weight decay")
      ->capture_default_str();
  train_cmd->add_option("--lr-decay-factor", train.config.lr_decay_factor,
                        "learning-rate decay factor")
      ->capture_default_str();
  train_cmd->add_option("--lr-decay-interval", train.config.lr_decay_interval,
                        "epochs between decays")
      ->capture_default_str();
  train_cmd->add_option("--dropout-p", train.config.dropout_p, "attention dropout probability")
      ->capture_default_str();
  train_cmd->add_option("--entropy-weight", train.config.entropy_weight,
                        "entropy regularizer weight")
      ->capture_default_str();
  train_cmd->add_option("--triplet-margin", train.config.triplet_margin,
                        "triplet margin (retrieval)")
      ->capture_default_str();
  train_cmd->add_option("--miou-threshold", train.config.miou_threshold,
                        "attention mIoU threshold fraction")
      ->capture_default_str();
  train_cmd->add_option("--heads", train.heads,
                        "attention head count M (default 32, retrieval 8)");
  train_cmd->add_option("--depth", train.depth, "backbone depth")->capture_default_str();
  train_cmd->add_option("--seed", train.config.seed, "training seed")->capture_default_str();
  train_cmd->callback([&] { action = [&] { return run_train(train, train_cmd); }; });

  EvalOptions eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", eval.data, "dataset file or directory")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--mode", eval.mode, "auto|classification|retrieval")
      ->check(CLI::IsMember({"auto", "classification", "retrieval"}))
      ->capture_default_str();
  eval_cmd->add_option("--miou-threshold", eval.miou_threshold,
                       "attention mIoU threshold fraction")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "optional output directory for summary.csv");
  eval_cmd->callback([&] { action = [&] { return run_eval(eval, eval_cmd); }; });

  VisualizeOptions viz;
  CLI::App* viz_cmd = app.add_subcommand("visualize", "export attention heatmaps as PPM images");
  viz_cmd->add_option("--data", viz.data, "dataset file or directory")->required();
  viz_cmd->add_option("--checkpoint", viz.checkpoint, "model checkpoint")->required();
  viz_cmd->add_option("--samples", viz.samples, "comma-separated sample indices")
      ->capture_default_str();
  viz_cmd->add_option("--split", viz.split, "train|test|query|gallery")
      ->check(CLI::IsMember({"train", "test", "query", "gallery"}))
      ->capture_default_str();
  viz_cmd->add_option("--miou-threshold", viz.miou_threshold, "attention rectangle threshold")
      ->capture_default_str();
  viz_cmd->add_option("--out", viz.out, "output directory")->required();
  viz_cmd->callback([&] { action = [&] { return run_visualize(viz, viz_cmd); }; });

  AblateOptions ablate;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation axis end to end");
  ablate_cmd->add_option("--axis", ablate.axis, "strategy|M|objective")
      ->check(CLI::IsMember({"strategy", "M", "objective"}))
      ->capture_default_str();
  ablate_cmd->add_option("--values", ablate.values, "comma-separated axis values");
  ablate_cmd->add_option("--seeds", ablate.seeds, "seeds per value")->capture_default_str();
  ablate_cmd->add_option("--classes", ablate.base.data.num_classes, "dataset classes")
      ->capture_default_str();
  ablate_cmd->add_option("--per-class", ablate.base.data.samples_per_class,
                         "training samples per class")
      ->capture_default_str();
  ablate_cmd->add_option("--test-per-class", ablate.base.data.test_samples_per_class,
                         "test samples per class")
      ->capture_default_str();
  ablate_cmd->add_option("--image-size", ablate.base.data.image_size, "square image size")
      ->capture_default_str();
  ablate_cmd->add_option("--rho", ablate.base.data.bias_strength, "train background bias")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  ablate_cmd->add_option("--data-seed", ablate.base.data.seed, "dataset seed")
      ->capture_default_str();
  ablate_cmd->add_option("--objective", ablate.objective, "base objective")
      ->capture_default_str();
  ablate_cmd->add_option("--strategy", ablate.strategy, "base counterfactual strategy")
      ->capture_default_str();
  ablate_cmd->add_option("--lambda-effect", ablate.base.train.lambda_effect,
                         "effect term weight")
      ->capture_default_str();
  ablate_cmd->add_option("--epochs", ablate.base.train.epochs, "epochs per run")
      ->capture_default_str();
  ablate_cmd->add_option("--batch", ablate.base.train.batch_size, "batch size")
      ->capture_default_str();
  ablate_cmd->add_option("--lr", ablate.base.train.learning_rate, "learning rate")
      ->capture_default_str();
  ablate_cmd->add_option("--heads", ablate.base.num_heads, "attention head count")
      ->capture_default_str();
  ablate_cmd->add_option("--depth", ablate.base.depth, "backbone depth")->capture_default_str();
  ablate_cmd->add_option("--seed", ablate.base.train.seed, "training seed")
      ->capture_default_str();
  ablate_cmd->add_option("--out", ablate.out, "output directory")->required();
  ablate_cmd->callback([&] { action = [&] { return run_ablate(ablate, ablate_cmd); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    cal::set_worker_threads(threads);
    return action ? action() : 0;
  } catch (const cal::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
