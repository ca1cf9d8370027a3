#include "structdgp/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sdgp {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'D', 'G', 'P', 'C', 'K', 'P', 'T'};

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <class T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("checkpoint: unexpected end of file");
  return to_little(v);
}

// The reals of a model in checkpoint order, or writes them back.
template <class Visit>
void visit_reals(DGPModel& m, Visit&& visit) {
  const Index mm = m.arch.inducing;
  visit(m.jitter);
  visit(m.log_noise);
  for (LayerParams& p : m.layers) {
    for (Index i = 0; i < p.kernel.log_lengthscales.size(); ++i) visit(p.kernel.log_lengthscales(i));
    visit(p.kernel.log_variance);
    for (Index i = 0; i < p.inducing.size(); ++i) visit(p.inducing.data()[i]);
  }
  for (Index i = 0; i < m.factor.mu().size(); ++i) visit(m.factor.mu()(i));
  for (const BlockId& b : m.factor.pattern()) {
    auto blk = m.factor.block(b.row, b.col);
    for (Index j = 0; j < mm; ++j) {
      for (Index i = (b.row == b.col ? j : 0); i < mm; ++i) visit(blk(i, j));
    }
  }
  for (int l = 0; l + 1 < m.arch.layers(); ++l) {
    Matrix& w = m.layer(l).mean_map;
    for (Index i = 0; i < w.size(); ++i) visit(w.data()[i]);
  }
}

}  // namespace

void save_checkpoint(const DGPModel& model, std::ostream& out) {
  model.validate();
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.structure()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.arch.input_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.arch.inducing));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.arch.layers()));
  for (int w : model.arch.widths) put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  DGPModel copy = model;
  std::uint64_t count = 0;
  visit_reals(copy, [&](double&) { ++count; });
  put<std::uint64_t>(out, count);
  visit_reals(copy, [&](double& v) { put<double>(out, v); });
  if (!out) throw Error("checkpoint: write failed");
}

DGPModel load_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw Error("checkpoint: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto structure = get<std::uint32_t>(in);
  if (structure > 2) throw Error("checkpoint: unknown structure");
  DGPModel m;
  m.arch.input_dim = static_cast<int>(get<std::uint32_t>(in));
  m.arch.inducing = static_cast<int>(get<std::uint32_t>(in));
  const auto layers = get<std::uint32_t>(in);
  if (layers == 0 || layers > 1000) throw Error("checkpoint: bad layer count");
  for (std::uint32_t l = 0; l < layers; ++l) {
    m.arch.widths.push_back(static_cast<int>(get<std::uint32_t>(in)));
  }
  m.arch.validate();
  m.factor = VariationalFactor(m.arch, static_cast<Structure>(structure));
  for (int l = 0; l < m.arch.layers(); ++l) {
    LayerParams p;
    const int d = m.arch.layer_input_dim(l);
    p.kernel = KernelParams::with_dim(d);
    p.inducing = Matrix::Zero(m.arch.inducing, d);
    if (l + 1 < m.arch.layers()) p.mean_map = Matrix::Zero(d, m.arch.width(l));
    m.layers.push_back(std::move(p));
  }
  std::uint64_t expected = 0;
  visit_reals(m, [&](double&) { ++expected; });
  const auto count = get<std::uint64_t>(in);
  if (count != expected) {
    throw Error("checkpoint: expected " + std::to_string(expected) +
                " values, header says " + std::to_string(count));
  }
  visit_reals(m, [&](double& v) { v = get<double>(in); });
  m.validate();
  m.factor.validate();
  return m;
}

void save_checkpoint(const DGPModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open " + path);
  save_checkpoint(model, out);
}

DGPModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace sdgp
