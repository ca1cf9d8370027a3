#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "structdgp/checkpoint.hpp"
#include "structdgp/harness.hpp"
#include "structdgp/parallel.hpp"

using namespace sdgp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct DataOptions {
  std::string path;
  std::string delimiter = ",";
  int target = -1;
  std::string split = "interp";
  double fraction = -1.0;
  std::uint64_t split_seed = 0;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.path, "Headerless delimited file, one row per point")->required();
  cmd->add_option("--delimiter", d.delimiter, "Field separator (use \\t for tab)");
  cmd->add_option("--target", d.target, "Target column; negative counts from the end");
  cmd->add_option("--split", d.split, "interp or extrap")->check(CLI::IsMember({"interp", "extrap"}));
  cmd->add_option("--fraction", d.fraction, "Training share (default 0.9 interp, 0.5 extrap)");
  cmd->add_option("--split-seed", d.split_seed, "Seed of the train/test split");
}

char delimiter_char(const std::string& s) {
  if (s == "\\t" || s == "tab") return '\t';
  if (s.size() != 1) throw CLI::ValidationError("--delimiter", "must be a single character");
  return s[0];
}

struct Prepared {
  Dataset train, test;  // normalised
  Dataset test_raw;
  Normalization norm;
};

Prepared load_split(const DataOptions& d) {
  const Dataset all = load_csv(d.path, delimiter_char(d.delimiter), d.target);
  SplitSpec spec;
  spec.mode = parse_split_mode(d.split);
  spec.fraction = d.fraction;
  spec.seed = d.split_seed;
  const Split s = make_split(all.x, spec);
  Prepared p;
  const Dataset train_raw = all.subset(s.train);
  p.test_raw = all.subset(s.test);
  p.norm = Normalization::fit(train_raw);
  p.train = p.norm.apply(train_raw);
  p.test = p.norm.apply(p.test_raw);
  return p;
}

json data_json(const DataOptions& d) {
  return {{"data", d.path},        {"delimiter", d.delimiter}, {"target", d.target},
          {"split", d.split},      {"fraction", d.fraction},   {"split_seed", d.split_seed}};
}

json metrics_json(const Metrics& m, Index n_test) {
  return {{"tll", m.tll}, {"rmse", m.rmse}, {"n_test", n_test}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << j.dump(2) << '\n';
}

Metrics evaluate_and_write(const DGPModel& model, const Prepared& p, int r_test,
                           std::uint64_t seed, const fs::path& dir, const json& extra) {
  const Metrics m = test_metrics(model, p.test, p.norm, r_test, seed);
  {
    std::ofstream out(dir / "predictions.csv");
    write_predictions_csv(out, p.test_raw, m);
  }
  json j = metrics_json(m, p.test.size());
  j.update(extra);
  write_json(dir / "metrics.json", j);
  std::cout << j.dump() << '\n';
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured deep Gaussian processes"};
  app.require_subcommand(1);

  // train ------------------------------------------------------------------
  DataOptions train_data;
  ModelSpec spec;
  TrainConfig cfg;
  std::string structure = "star", out_dir = "run";
  int r_test = 100;
  std::uint64_t seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model and report test metrics");
  add_data_options(train_cmd, train_data);
  train_cmd->add_option("--structure", structure, "mf, star or fc")
      ->check(CLI::IsMember({"mf", "star", "fc"}));
  train_cmd->add_option("--layers", spec.layers, "Number of GP layers");
  train_cmd->add_option("--width", spec.width, "GPs per hidden layer");
  train_cmd->add_option("--inducing", spec.inducing, "Inducing points per GP");
  train_cmd->add_option("--iters", cfg.iterations, "Optimiser iterations");
  train_cmd->add_option("--mbs", cfg.minibatch, "Minibatch size");
  train_cmd->add_option("--samples", cfg.samples, "Monte Carlo paths per datapoint");
  train_cmd->add_option("--lr", cfg.learning_rate, "Initial Adam learning rate");
  train_cmd->add_option("--validation", cfg.validation_fraction,
                        "Validation share for early stopping, 0 disables");
  train_cmd->add_option("--test-samples", r_test, "Paths per test point");
  train_cmd->add_option("--seed", seed, "Seed for initialisation and training");
  train_cmd->add_option("--out", out_dir, "Output directory");
  train_cmd->add_flag("--sampled-inducing",
                      [&](std::int64_t) { cfg.estimator = Estimator::SampledInducing; },
                      "Sample the inducing outputs instead of marginalising them");

  // evaluate ---------------------------------------------------------------
  DataOptions eval_data;
  std::string run_dir;
  int eval_r = 100;
  std::uint64_t eval_seed = 0;
  std::string eval_out;
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a trained run on its test split");
  eval_cmd->add_option("--run", run_dir, "Directory written by train")->required();
  eval_cmd->add_option("--samples", eval_r, "Paths per test point");
  eval_cmd->add_option("--seed", eval_seed, "Prediction seed");
  eval_cmd->add_option("--out", eval_out, "Output directory (default: the run directory)");

  // bench ------------------------------------------------------------------
  BenchConfig bench;
  std::vector<std::string> bench_structures = {"mf", "star", "fc"};
  std::string bench_out = "bench.csv";
  auto* bench_cmd = app.add_subcommand("bench", "Time one ELBO gradient step per configuration");
  bench_cmd->add_option("--structure", bench_structures, "Structures to time")
      ->check(CLI::IsMember({"mf", "star", "fc"}));
  bench_cmd->add_option("--inducing", bench.inducing, "Inducing point counts");
  bench_cmd->add_option("--layers", bench.layers, "Layer counts");
  bench_cmd->add_option("--width", bench.widths, "Hidden widths");
  bench_cmd->add_option("--reps", bench.reps, "Timed repetitions")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--mbs", bench.batch, "Batch size");
  bench_cmd->add_option("--samples", bench.samples, "Paths per datapoint");
  bench_cmd->add_option("--seed", bench.seed, "Seed");
  bench_cmd->add_option("--out", bench_out, "CSV output path");

  // export-cov -------------------------------------------------------------
  std::string model_path, cov_out = "covariance.csv";
  auto* export_cmd = app.add_subcommand("export-cov", "Write ln|S_M| of a checkpoint as CSV");
  export_cmd->add_option("--model", model_path, "Checkpoint file or run directory")->required();
  export_cmd->add_option("--out", cov_out, "CSV output path");

  // compare ----------------------------------------------------------------
  std::vector<std::string> files_a, files_b;
  std::string compare_out;
  auto* compare_cmd = app.add_subcommand(
      "compare", "Per-split share of test points where A has the higher log density");
  compare_cmd->add_option("--a", files_a, "predictions.csv of method A, one per split")->required();
  compare_cmd->add_option("--b", files_b, "predictions.csv of method B, same split order")->required();
  compare_cmd->add_option("--out", compare_out, "JSON output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const Prepared p = load_split(train_data);
      spec.structure = parse_structure(structure);
      spec.seed = seed;
      cfg.seed = seed;
      const fs::path dir(out_dir);
      fs::create_directories(dir);
      DGPModel model = build_model(p.train.x, spec);
      std::ofstream history(dir / "history.jsonl");
      const TrainResult r = train(model, p.train.x, p.train.y, cfg, &history);
      save_checkpoint(model, (dir / "model.ckpt").string());
      json run = data_json(train_data);
      run["structure"] = structure;
      run["layers"] = spec.layers;
      run["width"] = spec.width;
      run["inducing"] = spec.inducing;
      run["iters"] = cfg.iterations;
      run["mbs"] = cfg.minibatch;
      run["samples"] = cfg.samples;
      run["lr"] = cfg.learning_rate;
      run["seed"] = seed;
      run["iterations_run"] = r.iterations_run;
      run["stopped_early"] = r.stopped_early;
      run["wall_ms"] = r.wall_ms;
      write_json(dir / "run.json", run);
      evaluate_and_write(model, p, r_test, seed, dir,
                         {{"structure", structure}, {"iterations_run", r.iterations_run}});
    } else if (*eval_cmd) {
      const fs::path dir(run_dir);
      std::ifstream in(dir / "run.json");
      if (!in) throw Error("cannot open " + (dir / "run.json").string());
      const json run = json::parse(in);
      DataOptions d;
      d.path = run.at("data");
      d.delimiter = run.at("delimiter");
      d.target = run.at("target");
      d.split = run.at("split");
      d.fraction = run.at("fraction");
      d.split_seed = run.at("split_seed");
      const Prepared p = load_split(d);
      const DGPModel model = load_checkpoint((dir / "model.ckpt").string());
      const fs::path out = eval_out.empty() ? dir : fs::path(eval_out);
      fs::create_directories(out);
      evaluate_and_write(model, p, eval_r, eval_seed, out, {{"structure", run.at("structure")}});
    } else if (*bench_cmd) {
      bench.structures.clear();
      for (const std::string& s : bench_structures) bench.structures.push_back(parse_structure(s));
      const std::vector<BenchRow> rows = bench_runtime(bench, &std::cerr);
      std::ofstream out(bench_out);
      if (!out) throw Error("cannot open " + bench_out);
      write_bench_csv(out, rows);
      json slopes = json::object();
      for (Structure s : bench.structures) {
        std::vector<double> m, t;
        for (const BenchRow& r : rows) {
          if (r.structure == s && r.layers == bench.layers.front() && r.width == bench.widths.front()) {
            m.push_back(r.inducing);
            t.push_back(r.median_s);
          }
        }
        if (m.size() >= 2) slopes[std::string(to_string(s))] = loglog_slope(m, t);
      }
      std::cout << json{{"loglog_slope", slopes}}.dump() << '\n';
    } else if (*export_cmd) {
      fs::path path(model_path);
      if (fs::is_directory(path)) path /= "model.ckpt";
      export_covariance(load_checkpoint(path.string()), cov_out);
    } else if (*compare_cmd) {
      if (files_a.size() != files_b.size()) {
        throw Error("compare: --a and --b need the same number of files");
      }
      std::vector<Vector> a, b;
      for (const auto& f : files_a) a.push_back(read_lpd_column(f));
      for (const auto& f : files_b) b.push_back(read_lpd_column(f));
      const CompareResult r = compare_lpd(a, b);
      const json j = {{"per_split", r.per_split}, {"mean", r.mean}, {"se", r.se}, {"ties", 0.5}};
      if (!compare_out.empty()) write_json(compare_out, j);
      std::cout << j.dump() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
