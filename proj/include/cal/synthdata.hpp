#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cal/tensor.hpp"

namespace cal {

// Deterministic synthetic fine-grained data. Each class is a fixed
// composition of small part glyphs drawn inside a square object box; the
// rest of the image is a procedural background texture. Training
// backgrounds can be correlated with the class label (bias_strength) while
// test backgrounds are always drawn uniformly, so the background is a
// shortcut that stops working at test time.
struct DatasetSpec {
  int num_classes = 20;
  int samples_per_class = 100;       // training samples
  int test_samples_per_class = 25;
  int image_size = 32;               // square images
  double bias_strength = 0.0;        // rho: P(train background == class texture)
  int num_identities = 0;            // retrieval mode when > 0
  int views_per_identity = 0;
  std::uint64_t seed = 0;
};

struct SyntheticSample {
  Tensor image;  // [3,S,S], values in [0,1]
  int class_label = 0;
  int identity_label = -1;               // -1 outside retrieval mode
  std::array<int, 4> object_bbox{};      // x0,y0,x1,y1; half-open pixel box
  std::vector<std::pair<int, int>> part_centers;
  int background_id = 0;
};

bool operator==(const SyntheticSample& a, const SyntheticSample& b);

struct Dataset {
  DatasetSpec spec;
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> test;
};

// Identity-disjoint retrieval data: every test identity contributes its
// first view as the query and the remaining views as gallery entries.
struct RetrievalSplit {
  DatasetSpec spec;
  int num_train_identities = 0;
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> query;
  std::vector<SyntheticSample> gallery;
};

Dataset generate_dataset(const DatasetSpec& spec);
RetrievalSplit make_retrieval_split(const DatasetSpec& spec);

// Single list of samples in the dataset container format; load(save(x)) is
// bit-exact. Corrupt or truncated files are rejected with the byte offset.
void save_samples(const std::vector<SyntheticSample>& samples, const std::string& path);
std::vector<SyntheticSample> load_samples(const std::string& path);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

void save_retrieval_split(const RetrievalSplit& split, const std::string& path);
RetrievalSplit load_retrieval_split(const std::string& path);

// Peek at a dataset file without loading the samples.
bool is_retrieval_file(const std::string& path);

// Binary PPM (P6), one byte per channel; values are clamped to [0,1].
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

}  // namespace cal
