#include "cal/synthdata.hpp"

#include <cmath>
#include <stdexcept>

#include "cal/binary_io.hpp"
#include "cal/rng.hpp"
#include "cal/parallel.hpp"
#include "cal/tensor_io.hpp"

namespace cal {

namespace {

constexpr char kDatasetMagic[4] = {'C', 'A', 'L', 'D'};
constexpr std::uint8_t kDatasetVersion = 1;
constexpr std::uint8_t kKindClassification = 0;
constexpr std::uint8_t kKindRetrieval = 1;
constexpr std::uint8_t kKindSampleList = 2;

constexpr std::uint64_t kTrainStream = 0x545241494eULL;   // "TRAIN"
constexpr std::uint64_t kTestStream = 0x54455354ULL;      // "TEST"
constexpr std::uint64_t kViewStream = 0x56494557ULL;      // "VIEW"

constexpr int kNumShapes = 5;  // square, disk, diamond, hbar, vbar
constexpr int kNumPartSlots = 3;

struct Rgb {
  double r, g, b;
};

// Saturated, well-separated part colors.
constexpr Rgb kPalette[6] = {
    {0.95, 0.15, 0.15}, {0.15, 0.80, 0.15}, {0.15, 0.25, 0.95},
    {0.95, 0.85, 0.10}, {0.90, 0.15, 0.90}, {0.10, 0.85, 0.90},
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Striped background; id selects hue, stripe angle, frequency and phase.
Rgb texture_pixel(int background_id, int x, int y, int image_size) {
  const double hue = background_id * 0.6180339887;
  const double theta = background_id * 2.39996;
  const double freq = 2.0 + background_id % 4;
  const double phase = 1.7 * background_id;
  const double u = (x * std::cos(theta) + y * std::sin(theta)) / image_size;
  const double t = 0.5 + 0.5 * std::sin(6.2831853071795864769 * freq * u + phase);
  return hsv_to_rgb(hue, 0.65, 0.30 + 0.55 * t);
}

bool inside_shape(int shape, int dx, int dy, int r) {
  switch (shape) {
    case 0: return std::abs(dx) <= r && std::abs(dy) <= r;           // square
    case 1: return dx * dx + dy * dy <= r * r;                       // disk
    case 2: return std::abs(dx) + std::abs(dy) <= r;                 // diamond
    case 3: return std::abs(dy) <= r / 2 && std::abs(dx) <= r;       // hbar
    default: return std::abs(dx) <= r / 2 && std::abs(dy) <= r;      // vbar
  }
}

struct PixelCanvas {
  int size;
  std::vector<double> data;  // [3,S,S]

  explicit PixelCanvas(int s) : size(s), data(3u * s * s, 0.0) {}

  void set(int x, int y, const Rgb& c) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    const std::size_t at = static_cast<std::size_t>(y) * size + x;
    data[at] = c.r;
    data[hw + at] = c.g;
    data[2 * hw + at] = c.b;
  }
};

// The glyph composition of class (or identity) `index`: three part slots in
// the corners of the object box, shapes chosen by the base-5 digits of the
// index so any two indices below 125 differ in at least one part.
struct PartDescriptor {
  int shape;
  Rgb color;
  int slot_x, slot_y;  // slot origin in object-box units (0 or 1)
};

std::array<PartDescriptor, kNumPartSlots> glyph_parts(int index, double hue_jitter) {
  std::array<PartDescriptor, kNumPartSlots> parts{};
  int digits = index;
  const int slots[kNumPartSlots][2] = {{0, 0}, {1, 0}, {0, 1}};
  for (int p = 0; p < kNumPartSlots; ++p) {
    parts[p].shape = digits % kNumShapes;
    digits /= kNumShapes;
    Rgb base = kPalette[(index + 2 * p) % 6];
    if (hue_jitter != 0.0) {
      base.r = std::clamp(base.r + hue_jitter, 0.0, 1.0);
      base.g = std::clamp(base.g - hue_jitter, 0.0, 1.0);
      base.b = std::clamp(base.b + 0.5 * hue_jitter, 0.0, 1.0);
    }
    parts[p].color = base;
    parts[p].slot_x = slots[p][0];
    parts[p].slot_y = slots[p][1];
  }
  return parts;
}

struct RenderRequest {
  int image_size;
  int glyph_index;
  int background_id;
  double hue_jitter = 0.0;   // per-view color jitter (retrieval)
  int center_jitter = 0;     // per-view part offset jitter in pixels
};

SyntheticSample render_sample(const RenderRequest& req, Rng& rng) {
  const int s = req.image_size;
  const int side = s / 2;
  SyntheticSample sample;
  sample.background_id = req.background_id;

  const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - side + 1)));
  const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - side + 1)));
  sample.object_bbox = {x0, y0, x0 + side, y0 + side};

  const double brightness = rng.uniform(-0.05, 0.05);

  PixelCanvas canvas(s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      canvas.set(x, y, texture_pixel(req.background_id, x, y, s));
    }
  }
  // Object base: a flat desaturated patch occluding the texture.
  const double base = 0.5 + brightness;
  for (int y = y0; y < y0 + side; ++y) {
    for (int x = x0; x < x0 + side; ++x) {
      canvas.set(x, y, {base, base, base});
    }
  }

  const auto parts = glyph_parts(req.glyph_index, req.hue_jitter);
  const int slot = side / 2;
  const int radius = slot / 2 - 1;
  for (const auto& part : parts) {
    int cx = x0 + part.slot_x * slot + slot / 2;
    int cy = y0 + part.slot_y * slot + slot / 2;
    if (req.center_jitter > 0) {
      cx += static_cast<int>(rng.uniform_int(2 * req.center_jitter + 1)) - req.center_jitter;
      cy += static_cast<int>(rng.uniform_int(2 * req.center_jitter + 1)) - req.center_jitter;
    }
    sample.part_centers.emplace_back(cx, cy);
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const int px = cx + dx, py = cy + dy;
        if (px < x0 || px >= x0 + side || py < y0 || py >= y0 + side) continue;
        if (inside_shape(part.shape, dx, dy, radius)) canvas.set(px, py, part.color);
      }
    }
  }

  // Mild pixel noise over the whole frame.
  for (double& v : canvas.data) {
    v = std::clamp(v + rng.uniform(-0.02, 0.02), 0.0, 1.0);
  }

  sample.image = Tensor({3, static_cast<std::size_t>(s), static_cast<std::size_t>(s)},
                        std::move(canvas.data));
  return sample;
}

void validate_common(const DatasetSpec& spec) {
  if (spec.image_size < 16 || spec.image_size % 4 != 0) {
    throw std::invalid_argument("DatasetSpec: image_size must be >= 16 and divisible by 4, got " +
                                std::to_string(spec.image_size));
  }
  if (spec.bias_strength < 0.0 || spec.bias_strength > 1.0) {
    throw std::invalid_argument("DatasetSpec: bias_strength must be in [0,1], got " +
                                std::to_string(spec.bias_strength));
  }
}

int draw_background(Rng& rng, double rho, int correlated_id, int num_backgrounds) {
  const bool biased = rng.bernoulli(rho);
  const int uniform_id = static_cast<int>(rng.uniform_int(num_backgrounds));
  return biased ? correlated_id : uniform_id;
}

void write_spec(BinaryWriter& w, const DatasetSpec& spec) {
  w.u64(static_cast<std::uint64_t>(spec.num_classes));
  w.u64(static_cast<std::uint64_t>(spec.samples_per_class));
  w.u64(static_cast<std::uint64_t>(spec.test_samples_per_class));
  w.u64(static_cast<std::uint64_t>(spec.image_size));
  w.f64(spec.bias_strength);
  w.u64(static_cast<std::uint64_t>(spec.num_identities));
  w.u64(static_cast<std::uint64_t>(spec.views_per_identity));
  w.u64(spec.seed);
}

DatasetSpec read_spec(BinaryReader& r) {
  DatasetSpec spec;
  spec.num_classes = static_cast<int>(r.u64("spec num_classes"));
  spec.samples_per_class = static_cast<int>(r.u64("spec samples_per_class"));
  spec.test_samples_per_class = static_cast<int>(r.u64("spec test_samples_per_class"));
  spec.image_size = static_cast<int>(r.u64("spec image_size"));
  spec.bias_strength = r.f64("spec bias_strength");
  spec.num_identities = static_cast<int>(r.u64("spec num_identities"));
  spec.views_per_identity = static_cast<int>(r.u64("spec views_per_identity"));
  spec.seed = r.u64("spec seed");
  return spec;
}

void write_sample(BinaryWriter& w, const SyntheticSample& s) {
  w.i64(s.class_label);
  w.i64(s.identity_label);
  for (int v : s.object_bbox) w.i64(v);
  w.u64(s.part_centers.size());
  for (auto& [x, y] : s.part_centers) {
    w.i64(x);
    w.i64(y);
  }
  w.i64(s.background_id);
  save_tensor(w, s.image);
}

SyntheticSample read_sample(BinaryReader& r) {
  SyntheticSample s;
  s.class_label = static_cast<int>(r.i64("sample class_label"));
  s.identity_label = static_cast<int>(r.i64("sample identity_label"));
  for (int i = 0; i < 4; ++i) s.object_bbox[i] = static_cast<int>(r.i64("sample bbox"));
  const std::uint64_t parts = r.u64("sample part count");
  if (parts > 64) {
    throw std::runtime_error("dataset: implausible part count " + std::to_string(parts) +
                             " at byte " + std::to_string(r.offset() - 8));
  }
  for (std::uint64_t i = 0; i < parts; ++i) {
    const int x = static_cast<int>(r.i64("part x"));
    const int y = static_cast<int>(r.i64("part y"));
    s.part_centers.emplace_back(x, y);
  }
  s.background_id = static_cast<int>(r.i64("sample background_id"));
  s.image = load_tensor(r);
  return s;
}

void write_section(BinaryWriter& w, const std::vector<SyntheticSample>& samples) {
  w.u64(samples.size());
  for (const auto& s : samples) write_sample(w, s);
}

std::vector<SyntheticSample> read_section(BinaryReader& r) {
  const std::uint64_t count = r.u64("section count");
  std::vector<SyntheticSample> samples;
  samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) samples.push_back(read_sample(r));
  return samples;
}

std::uint8_t read_header(BinaryReader& r) {
  r.expect_magic(kDatasetMagic, "dataset");
  const std::uint8_t version = r.u8("dataset version");
  if (version != kDatasetVersion) {
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
  }
  return r.u8("dataset kind");
}

}  // namespace

bool operator==(const SyntheticSample& a, const SyntheticSample& b) {
  if (a.class_label != b.class_label || a.identity_label != b.identity_label ||
      a.object_bbox != b.object_bbox || a.part_centers != b.part_centers ||
      a.background_id != b.background_id) {
    return false;
  }
  if (a.image.shape() != b.image.shape()) return false;
  auto av = a.image.values();
  auto bv = b.image.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] != bv[i]) return false;
  }
  return true;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  validate_common(spec);
  if (spec.num_classes < 2 || spec.num_classes > 125) {
    throw std::invalid_argument("DatasetSpec: num_classes must be in [2,125], got " +
                                std::to_string(spec.num_classes));
  }
  if (spec.samples_per_class < 1 || spec.test_samples_per_class < 1) {
    throw std::invalid_argument("DatasetSpec: per-class sample counts must be positive");
  }

  Dataset dataset;
  dataset.spec = spec;
  dataset.train.resize(static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class);
  dataset.test.resize(static_cast<std::size_t>(spec.num_classes) * spec.test_samples_per_class);
  parallel_for(dataset.train.size(), [&](std::size_t index) {
    const int k = static_cast<int>(index / spec.samples_per_class);
    Rng rng(derive_seed(spec.seed, kTrainStream, index));
    RenderRequest req;
    req.image_size = spec.image_size;
    req.glyph_index = k;
    req.background_id = draw_background(rng, spec.bias_strength, k, spec.num_classes);
    SyntheticSample s = render_sample(req, rng);
    s.class_label = k;
    dataset.train[index] = std::move(s);
  });
  parallel_for(dataset.test.size(), [&](std::size_t index) {
    const int k = static_cast<int>(index / spec.test_samples_per_class);
    Rng rng(derive_seed(spec.seed, kTestStream, index));
    RenderRequest req;
    req.image_size = spec.image_size;
    req.glyph_index = k;
    req.background_id = static_cast<int>(rng.uniform_int(spec.num_classes));
    SyntheticSample s = render_sample(req, rng);
    s.class_label = k;
    dataset.test[index] = std::move(s);
  });
  return dataset;
}

RetrievalSplit make_retrieval_split(const DatasetSpec& spec) {
  validate_common(spec);
  if (spec.num_identities < 4) {
    throw std::invalid_argument("DatasetSpec: retrieval mode needs num_identities >= 4, got " +
                                std::to_string(spec.num_identities));
  }
  if (spec.views_per_identity < 2) {
    throw std::invalid_argument("DatasetSpec: retrieval mode needs views_per_identity >= 2, got " +
                                std::to_string(spec.views_per_identity));
  }
  if (spec.num_identities > 125) {
    throw std::invalid_argument("DatasetSpec: num_identities must be <= 125, got " +
                                std::to_string(spec.num_identities));
  }

  RetrievalSplit split;
  split.spec = spec;
  const int num_test = spec.num_identities / 2;
  split.num_train_identities = spec.num_identities - num_test;

  std::vector<SyntheticSample> all(static_cast<std::size_t>(spec.num_identities) *
                                   spec.views_per_identity);
  parallel_for(all.size(), [&](std::size_t index) {
    const int id = static_cast<int>(index / spec.views_per_identity);
    const bool in_train = id < split.num_train_identities;
    Rng rng(derive_seed(spec.seed, kViewStream, index));
    RenderRequest req;
    req.image_size = spec.image_size;
    req.glyph_index = id;
    req.hue_jitter = rng.uniform(-0.05, 0.05);
    req.center_jitter = 1;
    req.background_id = in_train
                            ? draw_background(rng, spec.bias_strength, id, spec.num_identities)
                            : static_cast<int>(rng.uniform_int(spec.num_identities));
    SyntheticSample s = render_sample(req, rng);
    s.identity_label = id;
    s.class_label = id;  // dense within the train identity range
    all[index] = std::move(s);
  });
  for (std::size_t index = 0; index < all.size(); ++index) {
    const int id = static_cast<int>(index / spec.views_per_identity);
    const int v = static_cast<int>(index % spec.views_per_identity);
    if (id < split.num_train_identities) {
      split.train.push_back(std::move(all[index]));
    } else if (v == 0) {
      split.query.push_back(std::move(all[index]));
    } else {
      split.gallery.push_back(std::move(all[index]));
    }
  }
  return split;
}

void save_samples(const std::vector<SyntheticSample>& samples, const std::string& path) {
  auto out = open_output(path);
  BinaryWriter w(out);
  w.magic(kDatasetMagic);
  w.u8(kDatasetVersion);
  w.u8(kKindSampleList);
  write_section(w, samples);
}

std::vector<SyntheticSample> load_samples(const std::string& path) {
  auto in = open_input(path);
  BinaryReader r(in);
  if (read_header(r) != kKindSampleList) {
    throw std::runtime_error("dataset: " + path + " is not a sample list");
  }
  return read_section(r);
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  auto out = open_output(path);
  BinaryWriter w(out);
  w.magic(kDatasetMagic);
  w.u8(kDatasetVersion);
  w.u8(kKindClassification);
  write_spec(w, dataset.spec);
  write_section(w, dataset.train);
  write_section(w, dataset.test);
}

Dataset load_dataset(const std::string& path) {
  auto in = open_input(path);
  BinaryReader r(in);
  if (read_header(r) != kKindClassification) {
    throw std::runtime_error("dataset: " + path + " is not a classification dataset");
  }
  Dataset d;
  d.spec = read_spec(r);
  d.train = read_section(r);
  d.test = read_section(r);
  return d;
}

void save_retrieval_split(const RetrievalSplit& split, const std::string& path) {
  auto out = open_output(path);
  BinaryWriter w(out);
  w.magic(kDatasetMagic);
  w.u8(kDatasetVersion);
  w.u8(kKindRetrieval);
  write_spec(w, split.spec);
  w.u64(static_cast<std::uint64_t>(split.num_train_identities));
  write_section(w, split.train);
  write_section(w, split.query);
  write_section(w, split.gallery);
}

RetrievalSplit load_retrieval_split(const std::string& path) {
  auto in = open_input(path);
  BinaryReader r(in);
  if (read_header(r) != kKindRetrieval) {
    throw std::runtime_error("dataset: " + path + " is not a retrieval split");
  }
  RetrievalSplit s;
  s.spec = read_spec(r);
  s.num_train_identities = static_cast<int>(r.u64("num_train_identities"));
  s.train = read_section(r);
  s.query = read_section(r);
  s.gallery = read_section(r);
  return s;
}

bool is_retrieval_file(const std::string& path) {
  auto in = open_input(path);
  BinaryReader r(in);
  return read_header(r) == kKindRetrieval;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("write_ppm: image must be [3,H,W], got " +
                                shape_to_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  auto v = image.values();
  auto out = open_output(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(3 * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double val = std::clamp(v[c * hw + y * w + x], 0.0, 1.0);
        row[3 * x + c] = static_cast<unsigned char>(std::lround(val * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write_ppm: write failed: " + path);
}

Tensor read_ppm(const std::string& path) {
  auto in = open_input(path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w == 0 || h == 0 || maxval != 255) {
    throw std::runtime_error("read_ppm: bad header: " + path);
  }
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(3 * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw std::runtime_error("read_ppm: truncated pixel data: " + path);
  }
  std::vector<double> values(3 * w * h);
  const std::size_t hw = w * h;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        values[c * hw + y * w + x] = bytes[3 * (y * w + x) + c] / 255.0;
      }
    }
  }
  return Tensor({3, h, w}, std::move(values));
}

}  // namespace cal
