#include "cal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cal {

namespace {

constexpr std::size_t kEvalBatch = 64;

void check_labels(const AttentionModel& model, const std::vector<SyntheticSample>& samples) {
  for (const auto& s : samples) {
    if (s.class_label < 0 || s.class_label >= model.num_classes) {
      throw std::invalid_argument("evaluate: sample label " + std::to_string(s.class_label) +
                                  " is outside the model's " +
                                  std::to_string(model.num_classes) + " classes");
    }
  }
}

}  // namespace

Tensor stack_images(const std::vector<SyntheticSample>& samples, std::size_t begin,
                    std::size_t end) {
  if (begin >= end || end > samples.size()) {
    throw std::invalid_argument("stack_images: empty or out-of-range slice");
  }
  const Shape& single = samples[begin].image.shape();
  const std::size_t per = shape_numel(single);
  std::vector<double> data((end - begin) * per);
  for (std::size_t i = begin; i < end; ++i) {
    if (samples[i].image.shape() != single) {
      throw std::invalid_argument("stack_images: inconsistent image shapes");
    }
    auto v = samples[i].image.values();
    std::copy(v.begin(), v.end(), data.begin() + (i - begin) * per);
  }
  Shape shape{end - begin};
  shape.insert(shape.end(), single.begin(), single.end());
  return Tensor(std::move(shape), std::move(data));
}

double evaluate_classification(const AttentionModel& model,
                               const std::vector<SyntheticSample>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate_classification: empty test set");
  check_labels(model, test);

  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(test.size(), begin + kEvalBatch);
    Tensor logits = forward(model, stack_images(test, begin, end)).logits;
    auto lv = logits.values();
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < end - begin; ++i) {
      const double* row = lv.data() + i * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (static_cast<int>(best) == test[begin + i].class_label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::vector<double> max_over_heads(const Tensor& attention, std::size_t sample) {
  const std::size_t m = attention.dim(1), hw = attention.dim(2) * attention.dim(3);
  auto av = attention.values();
  std::vector<double> agg(hw, 0.0);
  const double* base = av.data() + sample * m * hw;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < hw; ++j) agg[j] = std::max(agg[j], base[i * hw + j]);
  }
  return agg;
}

std::array<int, 4> attention_high_score_rect(std::span<const double> cells, std::size_t fh,
                                             std::size_t fw, int image_size,
                                             double threshold_fraction) {
  if (threshold_fraction <= 0.0 || threshold_fraction >= 1.0) {
    throw std::invalid_argument("attention_high_score_rect: threshold_fraction must be in (0,1)");
  }
  if (cells.size() != fh * fw) {
    throw std::invalid_argument("attention_high_score_rect: cell count does not match grid");
  }
  const std::size_t s = static_cast<std::size_t>(image_size);
  if (s % fh != 0 || s % fw != 0) {
    throw std::invalid_argument("attention_high_score_rect: image size " +
                                std::to_string(image_size) + " is not a multiple of the " +
                                std::to_string(fh) + "x" + std::to_string(fw) + " attention grid");
  }
  double vmax = 0.0;
  for (double v : cells) vmax = std::max(vmax, v);
  if (vmax <= 0.0) return {0, 0, 0, 0};

  const double cut = threshold_fraction * vmax;
  std::size_t min_x = fw, max_x = 0, min_y = fh, max_y = 0;
  bool any = false;
  for (std::size_t y = 0; y < fh; ++y) {
    for (std::size_t x = 0; x < fw; ++x) {
      if (cells[y * fw + x] >= cut) {
        any = true;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
  }
  if (!any) return {0, 0, 0, 0};  // unreachable: the max cell passes its own cut
  const int sx = image_size / static_cast<int>(fw);
  const int sy = image_size / static_cast<int>(fh);
  return {static_cast<int>(min_x) * sx, static_cast<int>(min_y) * sy,
          static_cast<int>(max_x + 1) * sx, static_cast<int>(max_y + 1) * sy};
}

namespace {

double rect_iou(const std::array<int, 4>& a, const std::array<int, 4>& b) {
  const double area_a = static_cast<double>(a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = static_cast<double>(b[2] - b[0]) * (b[3] - b[1]);
  const double ix = std::max(0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace

double attention_miou(const Tensor& attention, const std::vector<std::array<int, 4>>& bboxes,
                      int image_size, double threshold_fraction) {
  if (attention.rank() != 4) {
    throw std::invalid_argument("attention_miou: attention must be rank 4 [N,M,H,W], got " +
                                shape_to_string(attention.shape()));
  }
  if (bboxes.size() != attention.dim(0)) {
    throw std::invalid_argument("attention_miou: " + std::to_string(bboxes.size()) +
                                " boxes for " + std::to_string(attention.dim(0)) + " samples");
  }
  const std::size_t n = attention.dim(0);
  const std::size_t fh = attention.dim(2), fw = attention.dim(3);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> agg = max_over_heads(attention, i);
    const auto rect = attention_high_score_rect(agg, fh, fw, image_size, threshold_fraction);
    if (rect == std::array<int, 4>{0, 0, 0, 0}) continue;  // all-zero attention: IoU 0
    total += rect_iou(rect, bboxes[i]);
  }
  return total / static_cast<double>(n);
}

double attention_miou(const AttentionModel& model, const std::vector<SyntheticSample>& samples,
                      double threshold_fraction) {
  if (samples.empty()) throw std::invalid_argument("attention_miou: empty sample set");
  NoGradGuard no_grad;
  const int image_size = static_cast<int>(samples.front().image.dim(1));
  double total = 0.0;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(samples.size(), begin + kEvalBatch);
    Tensor images = stack_images(samples, begin, end);
    Tensor attention = compute_attention(model, extract_features(model, images));
    std::vector<std::array<int, 4>> boxes;
    for (std::size_t i = begin; i < end; ++i) boxes.push_back(samples[i].object_bbox);
    total += attention_miou(attention, boxes, image_size, threshold_fraction) *
             static_cast<double>(end - begin);
  }
  return total / static_cast<double>(samples.size());
}

Tensor compute_embeddings(const AttentionModel& model,
                          const std::vector<SyntheticSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("compute_embeddings: empty sample set");
  NoGradGuard no_grad;
  std::vector<double> data;
  std::size_t width = 0;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(samples.size(), begin + kEvalBatch);
    Tensor rep = forward(model, stack_images(samples, begin, end)).representation;
    width = rep.dim(1);
    auto rv = rep.values();
    data.insert(data.end(), rv.begin(), rv.end());
  }
  return Tensor({samples.size(), width}, std::move(data));
}

RetrievalMetrics evaluate_retrieval(const Tensor& query_embeddings,
                                    const std::vector<int>& query_ids,
                                    const Tensor& gallery_embeddings,
                                    const std::vector<int>& gallery_ids) {
  if (query_embeddings.rank() != 2 || gallery_embeddings.rank() != 2 ||
      query_embeddings.dim(1) != gallery_embeddings.dim(1)) {
    throw std::invalid_argument("evaluate_retrieval: embeddings must be [N,D] with equal D");
  }
  const std::size_t q = query_embeddings.dim(0), g = gallery_embeddings.dim(0);
  const std::size_t d = query_embeddings.dim(1);
  if (query_ids.size() != q || gallery_ids.size() != g) {
    throw std::invalid_argument("evaluate_retrieval: id counts do not match embeddings");
  }
  for (int id : query_ids) {
    if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end()) {
      throw std::invalid_argument("evaluate_retrieval: query identity " + std::to_string(id) +
                                  " does not appear in the gallery");
    }
  }

  auto qv = query_embeddings.values();
  auto gv = gallery_embeddings.values();
  RetrievalMetrics metrics;
  metrics.cmc.assign(g, 0.0);
  double ap_total = 0.0;

  std::vector<std::size_t> order(g);
  std::vector<double> dist(g);
  for (std::size_t i = 0; i < q; ++i) {
    const double* qe = qv.data() + i * d;
    for (std::size_t j = 0; j < g; ++j) {
      const double* ge = gv.data() + j * d;
      double acc = 0.0;
      for (std::size_t l = 0; l < d; ++l) {
        const double diff = qe[l] - ge[l];
        acc += diff * diff;
      }
      dist[j] = acc;  // squared distance ranks identically to Euclidean
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
    });

    std::size_t matches = 0;
    std::size_t total_matches = 0;
    for (std::size_t j = 0; j < g; ++j) {
      if (gallery_ids[j] == query_ids[i]) ++total_matches;
    }
    double ap = 0.0;
    bool found = false;
    for (std::size_t rank = 0; rank < g; ++rank) {
      if (gallery_ids[order[rank]] == query_ids[i]) {
        ++matches;
        ap += static_cast<double>(matches) / static_cast<double>(rank + 1);
        if (!found) {
          for (std::size_t k = rank; k < g; ++k) metrics.cmc[k] += 1.0;
          found = true;
        }
      }
    }
    ap_total += ap / static_cast<double>(total_matches);
  }

  for (double& v : metrics.cmc) v /= static_cast<double>(q);
  metrics.map_score = ap_total / static_cast<double>(q);
  return metrics;
}

RetrievalMetrics evaluate_retrieval(const AttentionModel& model,
                                    const std::vector<SyntheticSample>& query,
                                    const std::vector<SyntheticSample>& gallery) {
  if (query.empty() || gallery.empty()) {
    throw std::invalid_argument("evaluate_retrieval: query and gallery must be nonempty");
  }
  std::vector<int> query_ids, gallery_ids;
  for (const auto& s : query) query_ids.push_back(s.identity_label);
  for (const auto& s : gallery) gallery_ids.push_back(s.identity_label);
  return evaluate_retrieval(compute_embeddings(model, query), query_ids,
                            compute_embeddings(model, gallery), gallery_ids);
}

}  // namespace cal
