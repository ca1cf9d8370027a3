#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "structdgp/kernel.hpp"
#include "structdgp/linalg.hpp"

namespace sdgp {

enum class Structure : std::uint32_t {
  MeanField = 0,
  StripesAndArrow = 1,
  FullyCoupled = 2,
};

std::string_view to_string(Structure s);
/// Accepts "mf", "star", "fc" and the long names.
Structure parse_structure(std::string_view name);

/// Layer widths and inducing-set size of a deep GP. Layers and GPs are
/// indexed from zero; GP `g` enumerates all GPs layer by layer.
struct Architecture {
  int input_dim = 1;
  int inducing = 1;
  std::vector<int> widths;

  int layers() const { return static_cast<int>(widths.size()); }
  int width(int l) const { return widths.at(static_cast<size_t>(l)); }
  int total_gps() const;
  int gp_offset(int l) const;
  int gp_index(int l, int t) const { return gp_offset(l) + t; }
  int layer_of(int g) const;
  int position_of(int g) const { return g - gp_offset(layer_of(g)); }
  /// Dimension of the input fed into layer l.
  int layer_input_dim(int l) const { return l == 0 ? input_dim : width(l - 1); }
  /// Common width of the hidden layers, or 0 when they differ.
  int hidden_width() const;

  /// Throws Error unless L >= 1, all widths/dims positive.
  void validate() const;

  static Architecture uniform(int input_dim, int layers, int tau, int inducing);
};

struct BlockId {
  int row = 0;
  int col = 0;
  bool operator==(const BlockId&) const = default;
};

/// Sparse lower-triangular Cholesky factor L_S of the covariance S_M over all
/// inducing outputs, plus the mean mu_M. Only structurally non-zero M x M
/// blocks are stored:
///   MeanField       T diagonal blocks;
///   StripesAndArrow diagonal blocks, stripes L_S^{l,l',t} (L-1 > l > l'),
///                   and the arrow L_S^{L-1,l} (output row, l < L-1);
///   FullyCoupled    one dense lower-triangular factor of dimension T*M.
/// Diagonal blocks are lower triangular with a positive diagonal.
class VariationalFactor {
 public:
  VariationalFactor() = default;

  /// Zero mean, identity diagonal blocks, zero off-diagonal blocks.
  VariationalFactor(const Architecture& arch, Structure structure);

  Structure structure() const { return structure_; }
  const Architecture& arch() const { return arch_; }
  int block_size() const { return arch_.inducing; }
  int total_gps() const { return arch_.total_gps(); }
  Index dim() const {
    return static_cast<Index>(arch_.total_gps()) * arch_.inducing;
  }

  Vector& mu() { return mu_; }
  const Vector& mu() const { return mu_; }
  auto mu_block(int g) const { return mu_.segment(static_cast<Index>(g) * block_size(), block_size()); }
  auto mu_block(int g) { return mu_.segment(static_cast<Index>(g) * block_size(), block_size()); }

  /// Whether L_S block (g, gp) can be non-zero under this structure.
  bool has_block(int g, int gp) const;
  /// L_S block (g, gp); throws IndexOutOfRange for structural zeros.
  Eigen::Ref<const Matrix> block(int g, int gp) const;
  Eigen::Ref<Matrix> block(int g, int gp);

  /// Structurally non-zero L_S blocks, row by row, columns ascending.
  const std::vector<BlockId>& pattern() const { return pattern_; }
  /// Non-zero columns of L_S block-row g, ascending.
  const std::vector<int>& row_pattern(int g) const {
    return row_pattern_.at(static_cast<size_t>(g));
  }

  /// Stripes-and-arrow storage arrays.
  const std::vector<Matrix>& diag_blocks() const { return diag_; }
  const std::vector<Matrix>& stripe_blocks() const { return stripes_; }
  const std::vector<Matrix>& arrow_blocks() const { return arrow_; }
  /// Index of stripes block L_S^{l,l',t} within stripe_blocks().
  int stripe_index(int l, int lp, int t) const;
  int arrow_index(int l, int t) const { return l * hidden_tau() + t; }

  /// Checks diagonal-block positivity and finiteness.
  void validate() const;

 private:
  int hidden_tau() const { return arch_.width(0); }
  void build_pattern();
  Matrix* storage(int g, int gp);

  Architecture arch_;
  Structure structure_ = Structure::MeanField;
  Vector mu_;
  std::vector<Matrix> diag_;
  std::vector<Matrix> stripes_;
  std::vector<Matrix> arrow_;
  Matrix dense_;
  std::vector<BlockId> pattern_;
  std::vector<std::vector<int>> row_pattern_;
};

/// Whether block (g, gp) of S_M = L_S L_S^T can be non-zero.
bool covariance_block_nonzero(const VariationalFactor& factor, int g, int gp);

/// (S_M)_{g,gp} for GP indices, computed from the stored blocks only.
Matrix reconstruct_gp_block(const VariationalFactor& factor, int g, int gp);

/// (S_M^{l,lp})_{t,tp}.
Matrix reconstruct_block(const VariationalFactor& factor, int l, int lp, int t,
                         int tp);

inline constexpr Index kMaxDenseDim = 4096;

struct DenseFactor {
  Matrix factor;      // dense L_S
  Matrix covariance;  // S_M
};

/// Dense L_S and S_M. Throws TooLarge when T*M exceeds kMaxDenseDim.
DenseFactor densify(const VariationalFactor& factor);

/// log det S_M from the diagonal-block diagonals.
double logdet(const VariationalFactor& factor);

/// Structurally non-zero entries of S_M for hidden width tau, L layers and a
/// single output GP. Every non-zero M x M block is counted once per matrix
/// position, so symmetric off-diagonal blocks count twice.
long long nonzero_count(Structure structure, int tau, int layers, int inducing);

/// Initial factor: mu = 0, hidden diagonal blocks chol(1e-5 K_MM), output
/// diagonal block chol(K_MM), all other blocks zero. `kernels`/`inducing`
/// hold one entry per layer.
VariationalFactor init_factor(const Architecture& arch, Structure structure,
                              const std::vector<KernelParams>& kernels,
                              const std::vector<Matrix>& inducing,
                              double jitter = kDefaultJitter);

/// Copies any factor into fully-coupled storage (same L_S, same S_M).
VariationalFactor to_fully_coupled(const VariationalFactor& factor);

/// Copies the blocks of `source` that exist in `target_structure`, leaving the
/// remaining blocks zero. Used for warm starts.
VariationalFactor restructure(const VariationalFactor& source,
                              Structure target_structure);

inline constexpr double kLogAbsClamp = -40.0;

/// CSV of ln|S_M| entries (T*M rows), clamped below at kLogAbsClamp.
void export_log_abs_covariance(const VariationalFactor& factor,
                               std::ostream& out);

}  // namespace sdgp
