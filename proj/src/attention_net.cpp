#include "cal/attention_net.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "cal/binary_io.hpp"
#include "cal/ops.hpp"
#include "cal/rng.hpp"
#include "cal/tensor_io.hpp"

namespace cal {

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'A', 'L', 'M'};
constexpr std::uint8_t kCheckpointVersion = 1;

Tensor init_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-s, s);
  return Tensor(std::move(shape), std::move(values), /*requires_grad=*/true);
}

}  // namespace

int backbone_channels(int index) {
  switch (index) {
    case 0: return 16;
    case 1: return 32;
    default: return 64;
  }
}

AttentionModel AttentionModel::init(const AttentionModelConfig& config) {
  if (config.depth < 1) throw std::invalid_argument("AttentionModel: depth must be >= 1");
  if (config.num_heads < 1) throw std::invalid_argument("AttentionModel: num_heads must be >= 1");
  if (config.num_classes < 2) {
    throw std::invalid_argument("AttentionModel: num_classes must be >= 2");
  }

  AttentionModel m;
  m.in_channels = config.in_channels;
  m.depth = config.depth;
  m.num_heads = config.num_heads;
  m.num_classes = config.num_classes;
  m.feature_channels = backbone_channels(config.depth - 1);

  Rng rng(derive_seed(config.init_seed, 0x6d6f64656cULL));  // "model"
  int c_in = config.in_channels;
  for (int i = 0; i < config.depth; ++i) {
    const int c_out = backbone_channels(i);
    const std::size_t fan_in = static_cast<std::size_t>(c_in) * 9;
    m.conv_weights.push_back(init_param(
        {static_cast<std::size_t>(c_out), static_cast<std::size_t>(c_in), 3, 3}, fan_in, rng));
    m.conv_biases.push_back(init_param({static_cast<std::size_t>(c_out)}, fan_in, rng));
    c_in = c_out;
  }
  const std::size_t c = static_cast<std::size_t>(m.feature_channels);
  const std::size_t heads = static_cast<std::size_t>(m.num_heads);
  m.attn_weight = init_param({heads, c, 1, 1}, c, rng);
  m.attn_bias = init_param({heads}, c, rng);
  const std::size_t width = heads * c;
  m.cls_weight = init_param({width, static_cast<std::size_t>(m.num_classes)}, width, rng);
  m.cls_bias = init_param({static_cast<std::size_t>(m.num_classes)}, width, rng);
  return m;
}

std::vector<std::pair<std::string, Tensor>> AttentionModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> params;
  for (std::size_t i = 0; i < conv_weights.size(); ++i) {
    params.emplace_back("backbone." + std::to_string(i) + ".weight", conv_weights[i]);
    params.emplace_back("backbone." + std::to_string(i) + ".bias", conv_biases[i]);
  }
  params.emplace_back("attention.weight", attn_weight);
  params.emplace_back("attention.bias", attn_bias);
  params.emplace_back("classifier.weight", cls_weight);
  params.emplace_back("classifier.bias", cls_bias);
  return params;
}

std::vector<Tensor> AttentionModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void AttentionModel::zero_grads() {
  for (auto& t : parameters()) t.zero_grad();
}

Tensor extract_features(const AttentionModel& model, const Tensor& images) {
  if (images.rank() != 4) {
    throw std::invalid_argument("extract_features: images must be rank 4 [N,C,H,W], got " +
                                shape_to_string(images.shape()));
  }
  if (images.dim(1) != static_cast<std::size_t>(model.in_channels)) {
    throw std::invalid_argument("extract_features: image channels (" +
                                std::to_string(images.dim(1)) + ") do not match the model (" +
                                std::to_string(model.in_channels) + ")");
  }
  const std::size_t divisor = static_cast<std::size_t>(1) << model.depth;
  if (images.dim(2) % divisor != 0 || images.dim(3) % divisor != 0) {
    throw std::invalid_argument("extract_features: spatial size " + std::to_string(images.dim(2)) +
                                "x" + std::to_string(images.dim(3)) + " must be divisible by " +
                                std::to_string(divisor) + " (2^depth)");
  }
  Tensor x = images;
  for (int i = 0; i < model.depth; ++i) {
    x = relu(conv2d(x, model.conv_weights[i], model.conv_biases[i], /*stride=*/2, /*padding=*/1));
  }
  return x;
}

Tensor compute_attention(const AttentionModel& model, const Tensor& features) {
  if (features.rank() != 4 || features.dim(1) != static_cast<std::size_t>(model.feature_channels)) {
    throw std::invalid_argument("compute_attention: feature channels (" +
                                (features.rank() == 4 ? std::to_string(features.dim(1)) : "?") +
                                ") do not match the attention head (" +
                                std::to_string(model.feature_channels) + ")");
  }
  return relu(conv2d(features, model.attn_weight, model.attn_bias));
}

Tensor global_representation(const Tensor& parts) {
  if (parts.rank() != 3) {
    throw std::invalid_argument("global_representation: parts must be rank 3 [N,M,C], got " +
                                shape_to_string(parts.shape()));
  }
  // Row-major [N,M,C] flattens to the per-sample concatenation [h_1 .. h_M].
  Tensor flat = reshape(parts, {parts.dim(0), parts.dim(1) * parts.dim(2)});
  return l2_normalize_rows(flat);
}

Tensor classify(const AttentionModel& model, const Tensor& representation) {
  const std::size_t width =
      static_cast<std::size_t>(model.num_heads) * static_cast<std::size_t>(model.feature_channels);
  if (representation.rank() != 2 || representation.dim(1) != width) {
    throw std::invalid_argument("classify: representation width (" +
                                (representation.rank() == 2 ? std::to_string(representation.dim(1))
                                                            : "?") +
                                ") does not match the classifier (" + std::to_string(width) + ")");
  }
  return linear(representation, model.cls_weight, model.cls_bias);
}

ForwardResult forward(const AttentionModel& model, const Tensor& images) {
  ForwardResult r;
  r.features = extract_features(model, images);
  r.attention = compute_attention(model, r.features);
  r.parts = attention_pool(r.features, r.attention);
  r.representation = global_representation(r.parts);
  r.logits = classify(model, r.representation);
  return r;
}

void save_checkpoint(const AttentionModel& model, const std::string& path) {
  auto out = open_output(path);
  BinaryWriter w(out);
  w.magic(kCheckpointMagic);
  w.u8(kCheckpointVersion);
  w.u64(static_cast<std::uint64_t>(model.in_channels));
  w.u64(static_cast<std::uint64_t>(model.depth));
  w.u64(static_cast<std::uint64_t>(model.num_heads));
  w.u64(static_cast<std::uint64_t>(model.num_classes));
  w.u64(static_cast<std::uint64_t>(model.feature_channels));
  auto params = model.named_parameters();
  w.u64(params.size());
  for (auto& [name, tensor] : params) {
    w.str(name);
    save_tensor(w, tensor);
  }
}

AttentionModel load_checkpoint(const std::string& path) {
  auto in = open_input(path);
  BinaryReader r(in);
  r.expect_magic(kCheckpointMagic, "checkpoint");
  const std::uint8_t version = r.u8("checkpoint version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  AttentionModelConfig config;
  config.in_channels = static_cast<int>(r.u64("in_channels"));
  config.depth = static_cast<int>(r.u64("depth"));
  config.num_heads = static_cast<int>(r.u64("num_heads"));
  config.num_classes = static_cast<int>(r.u64("num_classes"));
  const std::uint64_t feature_channels = r.u64("feature_channels");
  AttentionModel model = AttentionModel::init(config);
  if (static_cast<std::uint64_t>(model.feature_channels) != feature_channels) {
    throw std::runtime_error("checkpoint: feature channel count " +
                             std::to_string(feature_channels) + " does not match depth " +
                             std::to_string(config.depth));
  }

  std::map<std::string, Tensor> slots;
  for (auto& [name, tensor] : model.named_parameters()) slots.emplace(name, tensor);

  const std::uint64_t count = r.u64("parameter count");
  if (count != slots.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(slots.size()) +
                             " parameters, found " + std::to_string(count));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str("parameter name");
    auto it = slots.find(name);
    if (it == slots.end()) {
      throw std::runtime_error("checkpoint: unknown parameter \"" + name + "\" at byte " +
                               std::to_string(r.offset()));
    }
    Tensor stored = load_tensor(r);
    if (stored.shape() != it->second.shape()) {
      throw std::runtime_error("checkpoint: parameter \"" + name + "\" has shape " +
                               shape_to_string(stored.shape()) + ", expected " +
                               shape_to_string(it->second.shape()));
    }
    auto dst = it->second.mutable_values();
    auto src = stored.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

}  // namespace cal
