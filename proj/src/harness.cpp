#include "structdgp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "structdgp/parallel.hpp"

namespace sdgp {

namespace {

std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delimiter)) out.push_back(field);
  if (!line.empty() && line.back() == delimiter) out.emplace_back();
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset d;
  d.x.resize(static_cast<Index>(rows.size()), x.cols());
  d.y.resize(static_cast<Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    d.x.row(static_cast<Index>(i)) = x.row(rows[i]);
    d.y(static_cast<Index>(i)) = y(rows[i]);
  }
  return d;
}

Dataset parse_csv(std::istream& in, char delimiter, int target_column) {
  std::vector<std::vector<double>> rows;
  std::string line;
  size_t width = 0;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto fields = split_fields(line, delimiter);
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw DimensionMismatch("csv line " + std::to_string(line_no) + ": expected " +
                              std::to_string(width) + " fields, got " +
                              std::to_string(fields.size()));
    }
    std::vector<double> vals;
    for (const std::string& f : fields) {
      try {
        size_t used = 0;
        vals.push_back(std::stod(f, &used));
      } catch (const std::exception&) {
        throw Error("csv line " + std::to_string(line_no) + ": cannot parse '" + f + "'");
      }
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty() || width < 2) throw Error("csv: need at least one row with two columns");
  const int cols = static_cast<int>(width);
  const int target = target_column < 0 ? cols + target_column : target_column;
  if (target < 0 || target >= cols) throw IndexOutOfRange("csv: target column");
  Dataset d;
  d.x.resize(static_cast<Index>(rows.size()), cols - 1);
  d.y.resize(static_cast<Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    int c = 0;
    for (int j = 0; j < cols; ++j) {
      if (j == target) {
        d.y(static_cast<Index>(i)) = rows[i][static_cast<size_t>(j)];
      } else {
        d.x(static_cast<Index>(i), c++) = rows[i][static_cast<size_t>(j)];
      }
    }
  }
  return d;
}

Dataset load_csv(const std::string& path, char delimiter, int target_column) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_csv(in, delimiter, target_column);
}

Dataset toy_sinusoid(Index n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.x.resize(n, 1);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    d.x(i, 0) = -3.0 + 6.0 * rng.uniform();
    d.y(i) = std::sin(2.0 * d.x(i, 0)) + 0.1 * rng.normal();
  }
  return d;
}

Normalization Normalization::fit(const Dataset& train) {
  if (train.size() < 1) throw Error("normalization: empty training set");
  Normalization n;
  const double count = static_cast<double>(train.size());
  n.x_mean = train.x.colwise().mean();
  n.x_std = ((train.x.rowwise() - n.x_mean).array().square().colwise().sum() / count)
                .sqrt()
                .matrix();
  for (Index j = 0; j < n.x_std.size(); ++j) {
    if (!(n.x_std(j) > 0.0)) n.x_std(j) = 1.0;
  }
  n.y_mean = train.y.mean();
  n.y_std = std::sqrt((train.y.array() - n.y_mean).square().sum() / count);
  if (!(n.y_std > 0.0)) n.y_std = 1.0;
  return n;
}

Dataset Normalization::apply(const Dataset& d) const {
  Dataset out;
  out.x = ((d.x.rowwise() - x_mean).array().rowwise() / x_std.array()).matrix();
  out.y = ((d.y.array() - y_mean) / y_std).matrix();
  return out;
}

SplitMode parse_split_mode(std::string_view name) {
  if (name == "interp" || name == "interpolation") return SplitMode::Interpolation;
  if (name == "extrap" || name == "extrapolation") return SplitMode::Extrapolation;
  throw Error("unknown split mode '" + std::string(name) + "'");
}

double SplitSpec::train_fraction() const {
  if (fraction > 0.0) return fraction;
  return mode == SplitMode::Interpolation ? 0.9 : 0.5;
}

Split make_split(const Matrix& x, const SplitSpec& spec) {
  const Index n = x.rows();
  if (n < 10) throw Error("make_split: need at least 10 rows");
  const double frac = spec.train_fraction();
  if (!(frac > 0.0 && frac < 1.0)) throw Error("make_split: fraction must lie in (0, 1)");
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(spec.seed);
  if (spec.mode == SplitMode::Interpolation) {
    std::shuffle(order.begin(), order.end(), rng.engine());
  } else {
    const Vector w = rng.normal_vector(x.cols());
    const Vector z = x * w;
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return z(a) < z(b); });
  }
  const auto n_train = static_cast<size_t>(std::floor(frac * static_cast<double>(n)));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  s.test.assign(order.begin() + static_cast<long>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Matrix kmeans(const Matrix& x, Index k, int iterations, std::uint64_t seed) {
  const Index n = x.rows();
  if (n < 1 || k < 1) throw Error("kmeans: need rows and k >= 1");
  Rng rng(seed);
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  Matrix centres(k, x.cols());
  for (Index c = 0; c < k; ++c) {
    centres.row(c) = x.row(order[static_cast<size_t>(c % n)]);
    if (c >= n) {
      for (Index j = 0; j < x.cols(); ++j) centres(c, j) += 1e-2 * rng.normal();
    }
  }
  if (k >= n) return centres;
  std::vector<Index> assign(static_cast<size_t>(n), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      (centres.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (assign[static_cast<size_t>(i)] != best) {
        assign[static_cast<size_t>(i)] = best;
        changed = true;
      }
    }
    Matrix sums = Matrix::Zero(k, x.cols());
    Vector counts = Vector::Zero(k);
    for (Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += x.row(i);
      counts(assign[static_cast<size_t>(i)]) += 1.0;
    }
    for (Index c = 0; c < k; ++c) {
      if (counts(c) > 0.0) centres.row(c) = sums.row(c) / counts(c);
    }
    if (!changed) break;
  }
  return centres;
}

DGPModel build_model(const Matrix& x_train, const ModelSpec& spec) {
  if (spec.layers < 1 || spec.width < 1 || spec.inducing < 1) {
    throw Error("build_model: layers, width and inducing must be >= 1");
  }
  if (!(spec.noise > 0.0)) throw Error("build_model: noise must be positive");
  DGPModel m;
  m.arch = Architecture::uniform(static_cast<int>(x_train.cols()), spec.layers,
                                 spec.width, spec.inducing);
  m.jitter = spec.jitter;
  m.log_noise = std::log(spec.noise);
  Matrix h = x_train;
  Matrix z = kmeans(x_train, spec.inducing, spec.kmeans_iterations, spec.seed);
  std::vector<KernelParams> kernels;
  std::vector<Matrix> inducing;
  for (int l = 0; l < m.arch.layers(); ++l) {
    const int d = m.arch.layer_input_dim(l);
    LayerParams p;
    p.kernel = KernelParams::with_dim(d, spec.lengthscale, spec.variance);
    p.inducing = z;
    if (l + 1 < m.arch.layers()) {
      const int t = m.arch.width(l);
      p.mean_map = (l > 0 && d == t) ? Matrix(Matrix::Identity(d, t)) : pca_map(h, t);
      h = h * p.mean_map;
      z = z * p.mean_map;
    }
    kernels.push_back(p.kernel);
    inducing.push_back(p.inducing);
    m.layers.push_back(std::move(p));
  }
  m.factor = init_factor(m.arch, spec.structure, kernels, inducing, spec.jitter);
  m.validate();
  return m;
}

Metrics test_metrics(const DGPModel& model, const Dataset& test,
                     const Normalization& norm, int r_test, std::uint64_t seed,
                     int threads) {
  if (test.size() < 1) throw Error("test_metrics: empty test set");
  const PreparedModel prep(model);
  const Index n = test.size();
  const double noise = model.noise();
  Metrics out;
  out.mean.resize(n);
  out.var.resize(n);
  out.lpd.resize(n);
  const double log_std = std::log(norm.y_std);
  parallel_for(n, worker_count(threads), [&](Index i) {
    const auto paths = predict(prep, test.x.row(i), r_test, seed,
                               static_cast<std::uint64_t>(i));
    double m1 = 0.0, m2 = 0.0;
    for (const GaussianMoments& p : paths) {
      m1 += p.mean(0);
      m2 += p.cov(0, 0) + noise + p.mean(0) * p.mean(0);
    }
    m1 /= static_cast<double>(paths.size());
    m2 /= static_cast<double>(paths.size());
    out.lpd(i) = log_predictive_density(paths, test.y(i), noise) - log_std;
    out.mean(i) = norm.y_mean + norm.y_std * m1;
    out.var(i) = norm.y_std * norm.y_std * (m2 - m1 * m1);
  });
  out.tll = out.lpd.mean();
  const Vector y = (test.y.array() * norm.y_std + norm.y_mean).matrix();
  out.rmse = std::sqrt((y - out.mean).squaredNorm() / static_cast<double>(n));
  return out;
}

std::vector<BenchRow> bench_runtime(const BenchConfig& config, std::ostream* progress) {
  if (config.reps < 1) throw Error("bench: reps must be >= 1");
  std::vector<BenchRow> rows;
  Rng data_rng(config.seed);
  Matrix x(config.batch, config.input_dim);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = data_rng.normal();
  Vector y(config.batch);
  for (Index i = 0; i < y.size(); ++i) y(i) = std::sin(x.row(i).sum());
  const Batch batch = Batch::full(x, y);
  for (Structure s : config.structures) {
    for (int layers : config.layers) {
      for (int width : config.widths) {
        for (int m : config.inducing) {
          ModelSpec spec;
          spec.structure = s;
          spec.layers = layers;
          spec.width = width;
          spec.inducing = m;
          spec.kmeans_iterations = 2;
          spec.seed = config.seed;
          const DGPModel model = build_model(x, spec);
          ElboOptions opt;
          opt.samples = config.samples;
          opt.seed = config.seed;
          elbo_and_gradient(model, batch, opt);
          std::vector<double> times;
          for (int r = 0; r < config.reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            const ElboGradient eg = elbo_and_gradient(model, batch, opt);
            times.push_back(std::chrono::duration<double>(
                                std::chrono::steady_clock::now() - t0)
                                .count());
            if (!std::isfinite(eg.terms.value)) throw NumericalFailure("bench: non-finite ELBO");
          }
          const double mean = std::accumulate(times.begin(), times.end(), 0.0) /
                              static_cast<double>(times.size());
          double var = 0.0;
          for (double t : times) var += (t - mean) * (t - mean);
          var /= std::max<double>(1.0, static_cast<double>(times.size()) - 1.0);
          rows.push_back({s, m, layers, width, median(times), std::sqrt(var) / mean});
          if (progress) {
            *progress << to_string(s) << " M=" << m << " L=" << layers << " tau=" << width
                      << " median " << rows.back().median_s << " s\n";
          }
        }
      }
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "structure,inducing,layers,width,median_s,cv\n";
  out << std::setprecision(9);
  for (const BenchRow& r : rows) {
    out << to_string(r.structure) << ',' << r.inducing << ',' << r.layers << ','
        << r.width << ',' << r.median_s << ',' << r.cv << '\n';
  }
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("loglog_slope: need >= 2 points");
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void export_covariance(const DGPModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path);
  export_log_abs_covariance(model.factor, out);
}

CompareResult compare_lpd(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw DimensionMismatch("compare: need the same positive number of splits");
  }
  CompareResult out;
  for (size_t s = 0; s < a.size(); ++s) {
    if (a[s].size() != b[s].size() || a[s].size() == 0) {
      throw DimensionMismatch("compare: split " + std::to_string(s) +
                              " has mismatched point counts");
    }
    double wins = 0.0;
    for (Index i = 0; i < a[s].size(); ++i) {
      if (a[s](i) > b[s](i)) {
        wins += 1.0;
      } else if (a[s](i) == b[s](i)) {
        wins += 0.5;
      }
    }
    out.per_split.push_back(wins / static_cast<double>(a[s].size()));
  }
  const auto k = static_cast<double>(out.per_split.size());
  out.mean = std::accumulate(out.per_split.begin(), out.per_split.end(), 0.0) / k;
  if (out.per_split.size() > 1) {
    double var = 0.0;
    for (double v : out.per_split) var += (v - out.mean) * (v - out.mean);
    out.se = std::sqrt(var / (k - 1.0) / k);
  }
  return out;
}

Vector read_lpd_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": empty file");
  const auto header = split_fields(line, ',');
  const auto it = std::find(header.begin(), header.end(), "lpd");
  if (it == header.end()) throw Error(path + ": no lpd column");
  const auto col = static_cast<size_t>(it - header.begin());
  std::vector<double> vals;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_fields(line, ',');
    if (fields.size() != header.size()) throw DimensionMismatch(path + ": ragged row");
    vals.push_back(std::stod(fields[col]));
  }
  return Eigen::Map<Vector>(vals.data(), static_cast<Index>(vals.size()));
}

void write_predictions_csv(std::ostream& out, const Dataset& test, const Metrics& m) {
  out << "y,mean,var,lpd\n" << std::setprecision(17);
  for (Index i = 0; i < test.size(); ++i) {
    out << test.y(i) << ',' << m.mean(i) << ',' << m.var(i) << ',' << m.lpd(i) << '\n';
  }
}

}  // namespace sdgp
