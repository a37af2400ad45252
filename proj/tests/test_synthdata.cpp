#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cal/parallel.hpp"
#include "cal/rng.hpp"
#include "cal/synthdata.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cal;
using namespace testutil;

namespace {

// Regularized upper incomplete gamma Q(a,x) via series / continued fraction
// (independent oracle for chi-square p-values).
double gamma_q(double a, double x) {
  auto gser = [](double a_, double x_) {
    double ap = a_, sum = 1.0 / a_, del = sum;
    for (int n = 0; n < 500; ++n) {
      ap += 1.0;
      del *= x_ / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-14) break;
    }
    return sum * std::exp(-x_ + a_ * std::log(x_) - std::lgamma(a_));
  };
  auto gcf = [](double a_, double x_) {
    double b = x_ + 1.0 - a_, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
      const double an = -i * (i - a_);
      b += 2.0;
      d = an * d + b;
      if (std::abs(d) < 1e-300) d = 1e-300;
      c = b + an / c;
      if (std::abs(c) < 1e-300) c = 1e-300;
      d = 1.0 / d;
      const double del = d * c;
      h *= del;
      if (std::abs(del - 1.0) < 1e-14) break;
    }
    return std::exp(-x_ + a_ * std::log(x_) - std::lgamma(a_)) * h;
  };
  if (x < 0.0 || a <= 0.0) return 1.0;
  if (x == 0.0) return 1.0;
  return x < a + 1.0 ? 1.0 - gser(a, x) : gcf(a, x);
}

// Two-sample chi-square homogeneity test over background ids.
double background_homogeneity_p(const std::vector<SyntheticSample>& a,
                                const std::vector<SyntheticSample>& b, int num_ids) {
  std::vector<double> ca(num_ids, 0.0), cb(num_ids, 0.0);
  for (const auto& s : a) ca[s.background_id] += 1.0;
  for (const auto& s : b) cb[s.background_id] += 1.0;
  const double na = a.size(), nb = b.size(), total = na + nb;
  double chi2 = 0.0;
  int df = -1;
  for (int i = 0; i < num_ids; ++i) {
    const double row = ca[i] + cb[i];
    if (row == 0.0) continue;
    ++df;
    const double ea = row * na / total;
    const double eb = row * nb / total;
    chi2 += (ca[i] - ea) * (ca[i] - ea) / ea + (cb[i] - eb) * (cb[i] - eb) / eb;
  }
  return gamma_q(df / 2.0, chi2 / 2.0);
}

DatasetSpec small_spec(double rho, std::uint64_t seed = 5) {
  DatasetSpec spec;
  spec.num_classes = 10;
  spec.samples_per_class = 20;
  spec.test_samples_per_class = 10;
  spec.image_size = 32;
  spec.bias_strength = rho;
  spec.seed = seed;
  return spec;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.train.size() != b.train.size() || a.test.size() != b.test.size()) return false;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    if (!(a.train[i] == b.train[i])) return false;
  }
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    if (!(a.test[i] == b.test[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generate_dataset: rho = 0 leaves train and test backgrounds homogeneous") {
  DatasetSpec spec = small_spec(0.0);
  spec.samples_per_class = 60;
  spec.test_samples_per_class = 40;
  Dataset d = generate_dataset(spec);
  const double p = background_homogeneity_p(d.train, d.test, spec.num_classes);
  CHECK(p > 0.01);
}

TEST_CASE("generate_dataset: rho = 1 locks every training background to the class") {
  Dataset d = generate_dataset(small_spec(1.0));
  for (const auto& s : d.train) CHECK(s.background_id == s.class_label);

  // test background stays decorrelated: predicting the label from the
  // background id should sit near chance level
  std::size_t hits = 0;
  for (const auto& s : d.test) hits += (s.background_id == s.class_label) ? 1 : 0;
  const double chance = 1.0 / 10.0;
  const double n = static_cast<double>(d.test.size());
  const double sigma = std::sqrt(chance * (1 - chance) / n);
  CHECK(hits / n < chance + 4 * sigma);
}

TEST_CASE("generate_dataset: identical seeds give byte-identical datasets") {
  Dataset a = generate_dataset(small_spec(0.5, 11));
  Dataset b = generate_dataset(small_spec(0.5, 11));
  CHECK(datasets_equal(a, b));
  Dataset c = generate_dataset(small_spec(0.5, 12));
  CHECK(!datasets_equal(a, c));
}

TEST_CASE("generate_dataset: parallel and serial generation are bit-identical") {
  DatasetSpec spec = small_spec(0.5, 19);
  set_worker_threads(1);
  Dataset serial = generate_dataset(spec);
  set_worker_threads(3);
  Dataset parallel = generate_dataset(spec);
  set_worker_threads(1);
  CHECK(datasets_equal(serial, parallel));
}

TEST_CASE("generate_dataset: invalid specs are rejected") {
  DatasetSpec spec = small_spec(0.0);
  spec.bias_strength = 1.5;
  CHECK_THROWS_AS(generate_dataset(spec), std::invalid_argument);
  spec = small_spec(0.0);
  spec.image_size = 13;
  CHECK_THROWS_AS(generate_dataset(spec), std::invalid_argument);
  spec = small_spec(0.0);
  spec.num_classes = 1;
  CHECK_THROWS_AS(generate_dataset(spec), std::invalid_argument);
  spec = small_spec(0.0);
  spec.samples_per_class = 0;
  CHECK_THROWS_AS(generate_dataset(spec), std::invalid_argument);
}

TEST_CASE("generate_dataset: object boxes are in bounds with parts inside them") {
  Dataset d = generate_dataset(small_spec(0.3));
  const int s = d.spec.image_size;
  for (const auto* split : {&d.train, &d.test}) {
    for (const auto& sample : *split) {
      const auto [x0, y0, x1, y1] = sample.object_bbox;
      CHECK(x0 >= 0);
      CHECK(y0 >= 0);
      CHECK(x0 < x1);
      CHECK(y0 < y1);
      CHECK(x1 <= s);
      CHECK(y1 <= s);
      CHECK(sample.part_centers.size() == 3);
      for (auto [px, py] : sample.part_centers) {
        CHECK(px >= x0);
        CHECK(px < x1);
        CHECK(py >= y0);
        CHECK(py < y1);
      }
      CHECK(sample.image.shape() == Shape{3, static_cast<std::size_t>(s),
                                          static_cast<std::size_t>(s)});
      for (double v : sample.image.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
}

TEST_CASE("discriminative sufficiency: nearest centroid on object crops is perfect at rho = 0") {
  Dataset d = generate_dataset(small_spec(0.0, 21));
  const int side = d.spec.image_size / 2;
  const std::size_t dim = 3u * side * side;

  auto crop = [&](const SyntheticSample& s) {
    std::vector<double> out(dim);
    auto v = s.image.values();
    const std::size_t hw =
        static_cast<std::size_t>(d.spec.image_size) * static_cast<std::size_t>(d.spec.image_size);
    std::size_t at = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      for (int y = s.object_bbox[1]; y < s.object_bbox[3]; ++y) {
        for (int x = s.object_bbox[0]; x < s.object_bbox[2]; ++x) {
          out[at++] = v[c * hw + static_cast<std::size_t>(y) * d.spec.image_size + x];
        }
      }
    }
    return out;
  };

  std::vector<std::vector<double>> centroids(d.spec.num_classes, std::vector<double>(dim, 0.0));
  std::vector<int> counts(d.spec.num_classes, 0);
  for (const auto& s : d.train) {
    auto c = crop(s);
    for (std::size_t i = 0; i < dim; ++i) centroids[s.class_label][i] += c[i];
    counts[s.class_label]++;
  }
  for (int k = 0; k < d.spec.num_classes; ++k) {
    for (double& v : centroids[k]) v /= counts[k];
  }

  std::size_t correct = 0;
  for (const auto& s : d.test) {
    auto c = crop(s);
    int best = -1;
    double best_dist = 1e300;
    for (int k = 0; k < d.spec.num_classes; ++k) {
      double dist = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double diff = c[i] - centroids[k][i];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    if (best == s.class_label) ++correct;
  }
  CHECK(correct == d.test.size());
}

TEST_CASE("make_retrieval_split: minimal 4x2 split") {
  DatasetSpec spec;
  spec.num_identities = 4;
  spec.views_per_identity = 2;
  spec.image_size = 32;
  spec.seed = 3;
  RetrievalSplit split = make_retrieval_split(spec);
  CHECK(split.num_train_identities == 2);
  CHECK(split.train.size() == 4);
  CHECK(split.query.size() == 2);
  CHECK(split.gallery.size() == 2);
}

TEST_CASE("make_retrieval_split: identity sets are disjoint and queries are answerable") {
  DatasetSpec spec;
  spec.num_identities = 9;
  spec.views_per_identity = 4;
  spec.image_size = 32;
  spec.bias_strength = 0.5;
  spec.seed = 7;
  RetrievalSplit split = make_retrieval_split(spec);

  std::set<int> train_ids, test_ids, gallery_ids;
  for (const auto& s : split.train) train_ids.insert(s.identity_label);
  for (const auto& s : split.query) test_ids.insert(s.identity_label);
  for (const auto& s : split.gallery) {
    test_ids.insert(s.identity_label);
    gallery_ids.insert(s.identity_label);
  }
  for (int id : test_ids) CHECK(!train_ids.count(id));
  for (const auto& s : split.query) CHECK(gallery_ids.count(s.identity_label));

  // dense training labels for the softmax head
  for (const auto& s : split.train) {
    CHECK(s.class_label >= 0);
    CHECK(s.class_label < split.num_train_identities);
  }
}

TEST_CASE("make_retrieval_split: degenerate specs are rejected") {
  DatasetSpec spec;
  spec.image_size = 32;
  spec.num_identities = 3;
  spec.views_per_identity = 2;
  CHECK_THROWS_AS(make_retrieval_split(spec), std::invalid_argument);
  spec.num_identities = 4;
  spec.views_per_identity = 1;
  CHECK_THROWS_AS(make_retrieval_split(spec), std::invalid_argument);
}

TEST_CASE("save/load: sample list round-trip is exact") {
  Dataset d = generate_dataset(small_spec(0.4, 31));
  std::vector<SyntheticSample> ten(d.train.begin(), d.train.begin() + 10);
  const auto path = std::filesystem::temp_directory_path() / "cal_samples_test.bin";
  save_samples(ten, path.string());
  auto back = load_samples(path.string());
  REQUIRE(back.size() == ten.size());
  for (std::size_t i = 0; i < ten.size(); ++i) CHECK(back[i] == ten[i]);
  std::filesystem::remove(path);
}

TEST_CASE("save/load: empty list is a valid file") {
  const auto path = std::filesystem::temp_directory_path() / "cal_samples_empty.bin";
  save_samples({}, path.string());
  CHECK(load_samples(path.string()).empty());
  std::filesystem::remove(path);
}

TEST_CASE("save/load: truncation and corruption carry the byte position") {
  Dataset d = generate_dataset(small_spec(0.0, 41));
  const auto path = std::filesystem::temp_directory_path() / "cal_dataset_test.bin";
  save_dataset(d, path.string());

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  const auto bad_path = std::filesystem::temp_directory_path() / "cal_dataset_bad.bin";
  {
    std::ofstream out(bad_path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_WITH_AS(load_dataset(bad_path.string()), doctest::Contains("at byte"),
                       std::runtime_error);
  {
    std::string corrupt = bytes;
    corrupt[1] = 'X';
    std::ofstream out(bad_path, std::ios::binary);
    out.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
  }
  CHECK_THROWS_WITH_AS(load_dataset(bad_path.string()), doctest::Contains("bad magic"),
                       std::runtime_error);

  Dataset loaded = load_dataset(path.string());
  CHECK(datasets_equal(loaded, d));
  CHECK(!is_retrieval_file(path.string()));
  std::filesystem::remove(path);
  std::filesystem::remove(bad_path);
}

TEST_CASE("save/load: retrieval split round-trip") {
  DatasetSpec spec;
  spec.num_identities = 6;
  spec.views_per_identity = 3;
  spec.image_size = 32;
  spec.seed = 17;
  RetrievalSplit split = make_retrieval_split(spec);
  const auto path = std::filesystem::temp_directory_path() / "cal_retrieval_test.bin";
  save_retrieval_split(split, path.string());
  CHECK(is_retrieval_file(path.string()));
  RetrievalSplit back = load_retrieval_split(path.string());
  CHECK(back.num_train_identities == split.num_train_identities);
  REQUIRE(back.query.size() == split.query.size());
  for (std::size_t i = 0; i < split.query.size(); ++i) CHECK(back.query[i] == split.query[i]);
  std::filesystem::remove(path);
}

TEST_CASE("ppm: files round-trip through the reference reader") {
  Dataset d = generate_dataset(small_spec(0.0, 51));
  const auto path1 = std::filesystem::temp_directory_path() / "cal_ppm_1.ppm";
  const auto path2 = std::filesystem::temp_directory_path() / "cal_ppm_2.ppm";
  write_ppm(path1.string(), d.train[0].image);
  Tensor decoded = read_ppm(path1.string());
  write_ppm(path2.string(), decoded);

  std::ifstream a(path1, std::ios::binary), b(path2, std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);
  CHECK(!ba.empty());
  std::filesystem::remove(path1);
  std::filesystem::remove(path2);
}
