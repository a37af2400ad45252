#include "cal/tensor_io.hpp"

namespace cal {

namespace {
constexpr std::size_t kMaxRank = 16;
}

void save_tensor(BinaryWriter& w, const Tensor& t) {
  w.magic(kTensorMagic);
  w.u8(kTensorVersion);
  w.u64(t.rank());
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

Tensor load_tensor(BinaryReader& r) {
  r.expect_magic(kTensorMagic, "tensor");
  const std::uint8_t version = r.u8("tensor version");
  if (version != kTensorVersion) {
    throw std::runtime_error("tensor: unsupported version " + std::to_string(version) +
                             " at byte " + std::to_string(r.offset() - 1));
  }
  const std::uint64_t rank = r.u64("tensor rank");
  if (rank == 0 || rank > kMaxRank) {
    throw std::runtime_error("tensor: implausible rank " + std::to_string(rank) + " at byte " +
                             std::to_string(r.offset() - 8));
  }
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    shape[i] = r.u64("tensor dim " + std::to_string(i));
    if (shape[i] == 0) {
      throw std::runtime_error("tensor: zero dimension at byte " + std::to_string(r.offset() - 8));
    }
    numel *= shape[i];
  }
  std::vector<double> data(numel);
  for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64("tensor data");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(std::ostream& out, const Tensor& t) {
  BinaryWriter w(out);
  save_tensor(w, t);
}

Tensor load_tensor(std::istream& in) {
  BinaryReader r(in);
  return load_tensor(r);
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  auto out = open_output(path);
  save_tensor(out, t);
}

Tensor load_tensor_file(const std::string& path) {
  auto in = open_input(path);
  return load_tensor(in);
}

}  // namespace cal
