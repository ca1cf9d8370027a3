#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "structdgp/model.hpp"
#include "structdgp/training.hpp"

namespace sdgp {

struct Dataset {
  Matrix x;
  Vector y;

  Index size() const { return x.rows(); }
  Dataset subset(const std::vector<Index>& rows) const;
};

/// Headerless delimited text; `target_column` < 0 counts from the end.
Dataset load_csv(const std::string& path, char delimiter = ',',
                 int target_column = -1);
Dataset parse_csv(std::istream& in, char delimiter = ',', int target_column = -1);

/// 1-D toy regression data: x ~ U(-3, 3), y = sin(2x) + 0.1 noise.
Dataset toy_sinusoid(Index n, std::uint64_t seed);

/// Per-column standardisation fitted on a training set.
struct Normalization {
  RowVector x_mean, x_std;
  double y_mean = 0.0, y_std = 1.0;

  static Normalization fit(const Dataset& train);
  Dataset apply(const Dataset& d) const;
};

enum class SplitMode { Interpolation, Extrapolation };
SplitMode parse_split_mode(std::string_view name);

struct SplitSpec {
  SplitMode mode = SplitMode::Interpolation;
  double fraction = -1.0;  // training share; negative selects 0.9 / 0.5
  std::uint64_t seed = 0;

  double train_fraction() const;
};

struct Split {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// Interpolation: uniform shuffle then floor(f N) training rows.
/// Extrapolation: project on w ~ N(0, I_D), sort ascending, first share trains.
Split make_split(const Matrix& x, const SplitSpec& spec);

/// Lloyd's algorithm from k distinct random rows; empty clusters keep their
/// previous centre. With fewer rows than k the rows are reused with a small
/// seeded perturbation.
Matrix kmeans(const Matrix& x, Index k, int iterations = 20, std::uint64_t seed = 0);

struct ModelSpec {
  Structure structure = Structure::StripesAndArrow;
  int layers = 3;
  int width = 5;
  int inducing = 128;
  double noise = 0.01;
  double lengthscale = 1.0;
  double variance = 1.0;
  double jitter = kDefaultJitter;
  int kmeans_iterations = 20;
  std::uint64_t seed = 0;
};

/// Builds a model for (normalised) training inputs: k-means inducing inputs,
/// PCA mean maps, unit kernels and the standard factor initialisation.
DGPModel build_model(const Matrix& x_train, const ModelSpec& spec);

struct Metrics {
  double tll = 0.0;   // mean log predictive density, original units
  double rmse = 0.0;  // original units
  Vector mean, var, lpd;  // per test point, original units
};

/// Predictive metrics for a normalised test set, reported in original units.
Metrics test_metrics(const DGPModel& model, const Dataset& test_normalized,
                     const Normalization& norm, int r_test, std::uint64_t seed,
                     int threads = 0);

struct BenchConfig {
  std::vector<Structure> structures = {Structure::MeanField,
                                       Structure::StripesAndArrow,
                                       Structure::FullyCoupled};
  std::vector<int> inducing = {32, 64, 128, 256};
  std::vector<int> layers = {3};
  std::vector<int> widths = {5};
  int reps = 20;
  int batch = 128;
  int samples = 4;
  int input_dim = 4;
  std::uint64_t seed = 0;
};

struct BenchRow {
  Structure structure;
  int inducing, layers, width;
  double median_s, cv;
};

/// Median wall time of elbo_and_gradient per configuration.
std::vector<BenchRow> bench_runtime(const BenchConfig& config,
                                    std::ostream* progress = nullptr);
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);
/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

void export_covariance(const DGPModel& model, const std::string& path);

struct CompareResult {
  std::vector<double> per_split;  // share of points where A beats B
  double mean = 0.0;
  double se = 0.0;
};

/// Per-split win frequency of A over B on per-point log densities; ties
/// count one half.
CompareResult compare_lpd(const std::vector<Vector>& a, const std::vector<Vector>& b);

/// Reads the "lpd" column of a per-point prediction CSV written by evaluate.
Vector read_lpd_column(const std::string& path);
void write_predictions_csv(std::ostream& out, const Dataset& test, const Metrics& m);

}  // namespace sdgp
