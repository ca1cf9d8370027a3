#include "structdgp/variational.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace sdgp {

std::string_view to_string(Structure s) {
  switch (s) {
    case Structure::MeanField:
      return "mf";
    case Structure::StripesAndArrow:
      return "star";
    case Structure::FullyCoupled:
      return "fc";
  }
  return "unknown";
}

Structure parse_structure(std::string_view name) {
  if (name == "mf" || name == "mean-field" || name == "meanfield") {
    return Structure::MeanField;
  }
  if (name == "star" || name == "stripes-and-arrow") {
    return Structure::StripesAndArrow;
  }
  if (name == "fc" || name == "fully-coupled") {
    return Structure::FullyCoupled;
  }
  throw Error("unknown structure '" + std::string(name) + "'");
}

int Architecture::total_gps() const {
  int t = 0;
  for (int w : widths) t += w;
  return t;
}

int Architecture::gp_offset(int l) const {
  if (l < 0 || l > layers()) throw IndexOutOfRange("layer index out of range");
  int off = 0;
  for (int i = 0; i < l; ++i) off += widths[static_cast<size_t>(i)];
  return off;
}

int Architecture::layer_of(int g) const {
  int off = 0;
  for (int l = 0; l < layers(); ++l) {
    off += widths[static_cast<size_t>(l)];
    if (g < off) return l;
  }
  throw IndexOutOfRange("GP index out of range");
}

int Architecture::hidden_width() const {
  if (layers() < 2) return width(0);
  const int tau = width(0);
  for (int l = 1; l + 1 < layers(); ++l) {
    if (width(l) != tau) return 0;
  }
  return tau;
}

void Architecture::validate() const {
  if (layers() < 1) throw Error("architecture needs at least one layer");
  if (input_dim < 1) throw Error("architecture input dimension must be >= 1");
  if (inducing < 1) throw Error("architecture needs at least one inducing point");
  for (int w : widths) {
    if (w < 1) throw Error("layer widths must be >= 1");
  }
}

Architecture Architecture::uniform(int input_dim, int layers, int tau,
                                   int inducing) {
  Architecture a;
  a.input_dim = input_dim;
  a.inducing = inducing;
  a.widths.assign(static_cast<size_t>(std::max(layers, 1)), tau);
  a.widths.back() = 1;
  a.validate();
  return a;
}

VariationalFactor::VariationalFactor(const Architecture& arch,
                                     Structure structure)
    : arch_(arch), structure_(structure) {
  arch_.validate();
  const int t_total = arch_.total_gps();
  const Index m = arch_.inducing;
  const int L = arch_.layers();
  mu_ = Vector::Zero(static_cast<Index>(t_total) * m);

  switch (structure_) {
    case Structure::MeanField:
      diag_.assign(static_cast<size_t>(t_total), Matrix::Identity(m, m));
      break;
    case Structure::StripesAndArrow: {
      if (arch_.widths.back() != 1) {
        throw Error("stripes-and-arrow requires a single output GP");
      }
      const int tau = arch_.hidden_width();
      if (tau == 0) {
        throw Error("stripes-and-arrow requires equal hidden layer widths");
      }
      diag_.assign(static_cast<size_t>(t_total), Matrix::Identity(m, m));
      if (L >= 2) {
        stripes_.assign(static_cast<size_t>(tau * (L - 2) * (L - 1) / 2),
                        Matrix::Zero(m, m));
        arrow_.assign(static_cast<size_t>(tau * (L - 1)), Matrix::Zero(m, m));
      }
      break;
    }
    case Structure::FullyCoupled:
      dense_ = Matrix::Identity(dim(), dim());
      break;
  }
  build_pattern();
}

int VariationalFactor::stripe_index(int l, int lp, int t) const {
  return (l * (l - 1) / 2 + lp) * hidden_tau() + t;
}

bool VariationalFactor::has_block(int g, int gp) const {
  const int t_total = arch_.total_gps();
  if (g < 0 || gp < 0 || g >= t_total || gp >= t_total) return false;
  if (gp > g) return false;
  if (g == gp) return true;
  switch (structure_) {
    case Structure::MeanField:
      return false;
    case Structure::FullyCoupled:
      return true;
    case Structure::StripesAndArrow: {
      const int l = arch_.layer_of(g);
      const int lp = arch_.layer_of(gp);
      if (l == arch_.layers() - 1) return lp < l;
      return lp < l && arch_.position_of(g) == arch_.position_of(gp);
    }
  }
  return false;
}

Matrix* VariationalFactor::storage(int g, int gp) {
  if (!has_block(g, gp)) return nullptr;
  if (g == gp) return &diag_[static_cast<size_t>(g)];
  const int l = arch_.layer_of(g);
  const int lp = arch_.layer_of(gp);
  if (l == arch_.layers() - 1) {
    return &arrow_[static_cast<size_t>(arrow_index(lp, arch_.position_of(gp)))];
  }
  return &stripes_[static_cast<size_t>(stripe_index(l, lp, arch_.position_of(g)))];
}

Eigen::Ref<const Matrix> VariationalFactor::block(int g, int gp) const {
  return const_cast<VariationalFactor*>(this)->block(g, gp);
}

Eigen::Ref<Matrix> VariationalFactor::block(int g, int gp) {
  if (!has_block(g, gp)) {
    throw IndexOutOfRange("factor block (" + std::to_string(g) + "," +
                          std::to_string(gp) + ") is structurally zero");
  }
  const Index m = arch_.inducing;
  if (structure_ == Structure::FullyCoupled) {
    return dense_.block(g * m, gp * m, m, m);
  }
  return *storage(g, gp);
}

void VariationalFactor::build_pattern() {
  const int t_total = arch_.total_gps();
  pattern_.clear();
  row_pattern_.assign(static_cast<size_t>(t_total), {});
  for (int g = 0; g < t_total; ++g) {
    for (int gp = 0; gp <= g; ++gp) {
      if (has_block(g, gp)) {
        pattern_.push_back({g, gp});
        row_pattern_[static_cast<size_t>(g)].push_back(gp);
      }
    }
  }
}

void VariationalFactor::validate() const {
  if (!mu_.allFinite()) throw NumericalFailure("variational mean is not finite");
  for (const BlockId& b : pattern_) {
    const auto blk = block(b.row, b.col);
    if (!blk.allFinite()) throw NumericalFailure("factor block is not finite");
    if (b.row == b.col && (blk.diagonal().array() <= 0.0).any()) {
      throw NotPositiveDefinite("factor diagonal block has non-positive pivot");
    }
  }
}

bool covariance_block_nonzero(const VariationalFactor& factor, int g, int gp) {
  const auto& rg = factor.row_pattern(g);
  const auto& rgp = factor.row_pattern(gp);
  const int limit = std::min(g, gp);
  size_t i = 0, j = 0;
  while (i < rg.size() && j < rgp.size()) {
    if (rg[i] > limit || rgp[j] > limit) break;
    if (rg[i] == rgp[j]) return true;
    if (rg[i] < rgp[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return false;
}

Matrix reconstruct_gp_block(const VariationalFactor& factor, int g, int gp) {
  const int t_total = factor.total_gps();
  if (g < 0 || gp < 0 || g >= t_total || gp >= t_total) {
    throw IndexOutOfRange("reconstruct_gp_block: GP index out of range");
  }
  const Index m = factor.block_size();
  Matrix out = Matrix::Zero(m, m);
  const int limit = std::min(g, gp);
  const auto& rg = factor.row_pattern(g);
  const auto& rgp = factor.row_pattern(gp);
  size_t i = 0, j = 0;
  // S_{g,gp} = sum_k L_{g,k} L_{gp,k}^T over shared non-zero columns k.
  while (i < rg.size() && j < rgp.size()) {
    const int ki = rg[i], kj = rgp[j];
    if (ki > limit || kj > limit) break;
    if (ki == kj) {
      if (ki == g || ki == gp) {
        // One side is a diagonal block; exploit its triangular shape.
        const auto a = factor.block(g, ki);
        const auto b = factor.block(gp, ki);
        if (ki == gp) {
          out.noalias() += a * b.triangularView<Eigen::Lower>().transpose();
        } else {
          out.noalias() += a.triangularView<Eigen::Lower>() * b.transpose();
        }
      } else {
        out.noalias() += factor.block(g, ki) * factor.block(gp, ki).transpose();
      }
      ++i;
      ++j;
    } else if (ki < kj) {
      ++i;
    } else {
      ++j;
    }
  }
  return out;
}

Matrix reconstruct_block(const VariationalFactor& factor, int l, int lp, int t,
                         int tp) {
  const Architecture& a = factor.arch();
  if (l < 0 || lp < 0 || l >= a.layers() || lp >= a.layers() || t < 0 ||
      tp < 0 || t >= a.width(l) || tp >= a.width(lp)) {
    throw IndexOutOfRange("reconstruct_block: index out of range");
  }
  return reconstruct_gp_block(factor, a.gp_index(l, t), a.gp_index(lp, tp));
}

DenseFactor densify(const VariationalFactor& factor) {
  const Index n = factor.dim();
  if (n > kMaxDenseDim) {
    throw TooLarge("densify: T*M = " + std::to_string(n) + " exceeds " +
                   std::to_string(kMaxDenseDim));
  }
  const Index m = factor.block_size();
  DenseFactor out;
  out.factor = Matrix::Zero(n, n);
  for (const BlockId& b : factor.pattern()) {
    Matrix blk = factor.block(b.row, b.col);
    if (b.row == b.col) blk.triangularView<Eigen::StrictlyUpper>().setZero();
    out.factor.block(b.row * m, b.col * m, m, m) = blk;
  }
  out.covariance = out.factor * out.factor.transpose();
  return out;
}

double logdet(const VariationalFactor& factor) {
  double acc = 0.0;
  for (int g = 0; g < factor.total_gps(); ++g) {
    acc += factor.block(g, g).diagonal().array().log().sum();
  }
  return 2.0 * acc;
}

long long nonzero_count(Structure structure, int tau, int layers,
                        int inducing) {
  if (tau < 1 || layers < 1 || inducing < 1) {
    throw Error("nonzero_count: tau, layers and inducing must be >= 1");
  }
  const long long m2 = static_cast<long long>(inducing) * inducing;
  const long long t_total = static_cast<long long>(tau) * (layers - 1) + 1;
  long long blocks = 0;
  switch (structure) {
    case Structure::MeanField:
      blocks = t_total;
      break;
    case Structure::FullyCoupled:
      blocks = t_total * t_total;
      break;
    case Structure::StripesAndArrow: {
      const long long stripes =
          static_cast<long long>(tau) * (layers - 2) * (layers - 1) / 2;
      const long long arrow = static_cast<long long>(tau) * (layers - 1);
      blocks = t_total + 2 * stripes + 2 * arrow;
      break;
    }
  }
  return blocks * m2;
}

VariationalFactor init_factor(const Architecture& arch, Structure structure,
                              const std::vector<KernelParams>& kernels,
                              const std::vector<Matrix>& inducing,
                              double jitter) {
  if (static_cast<int>(kernels.size()) != arch.layers() ||
      static_cast<int>(inducing.size()) != arch.layers()) {
    throw DimensionMismatch("init_factor: need one kernel and Z per layer");
  }
  VariationalFactor factor(arch, structure);
  for (int l = 0; l < arch.layers(); ++l) {
    Matrix kmm = kmat(kernels[static_cast<size_t>(l)],
                      inducing[static_cast<size_t>(l)],
                      inducing[static_cast<size_t>(l)]);
    kmm.diagonal().array() += jitter;
    const bool output = l == arch.layers() - 1;
    const Matrix scaled = output ? kmm : Matrix(1e-5 * kmm);
    const Matrix chol = cholesky_escalating(scaled, 0.0).first.matrix();
    for (int t = 0; t < arch.width(l); ++t) {
      const int g = arch.gp_index(l, t);
      factor.block(g, g) = chol;
    }
  }
  return factor;
}

VariationalFactor to_fully_coupled(const VariationalFactor& factor) {
  return restructure(factor, Structure::FullyCoupled);
}

VariationalFactor restructure(const VariationalFactor& source,
                              Structure target_structure) {
  VariationalFactor out(source.arch(), target_structure);
  out.mu() = source.mu();
  for (const BlockId& b : out.pattern()) {
    if (source.has_block(b.row, b.col)) {
      out.block(b.row, b.col) = source.block(b.row, b.col);
    } else {
      out.block(b.row, b.col).setZero();
    }
  }
  return out;
}

void export_log_abs_covariance(const VariationalFactor& factor,
                               std::ostream& out) {
  const Matrix s = densify(factor).covariance;
  out << std::setprecision(17);
  for (Index i = 0; i < s.rows(); ++i) {
    for (Index j = 0; j < s.cols(); ++j) {
      const double a = std::abs(s(i, j));
      const double v = a > 0.0 ? std::max(std::log(a), kLogAbsClamp) : kLogAbsClamp;
      if (j) out << ',';
      out << v;
    }
    out << '\n';
  }
}

}  // namespace sdgp
