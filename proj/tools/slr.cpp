// Command-line driver for the sparse + low-rank layer compressor.

#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "slr/admm.hpp"
#include "slr/compressed.hpp"
#include "slr/errors.hpp"
#include "slr/inference.hpp"
#include "slr/npy.hpp"
#include "slr/pipeline.hpp"
#include "slr/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kIo = 4 };

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  std::optional<std::size_t> max_iter;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<std::string> mode;

  slr::Overrides overrides() const {
    slr::Overrides o;
    o.seed = seed;
    o.tol = tol;
    o.max_iter = max_iter;
    o.lambda1 = lambda1;
    o.lambda2 = lambda2;
    if (mode) o.mode = slr::parse_mode(*mode);
    return o;
  }
};

void add_override_flags(CLI::App* app, CommonFlags& f) {
  app->add_option("--seed", f.seed, "Pipeline seed");
  app->add_option("--tol", f.tol, "Convergence tolerance");
  app->add_option("--max-iter", f.max_iter, "ADMM iteration budget");
  app->add_option("--lambda1", f.lambda1, "Weight of the column-sparsity term");
  app->add_option("--lambda2", f.lambda2, "Weight of the nuclear-norm term");
  app->add_option("--mode", f.mode, "both | sparse-only | lowrank-only");
}

fs::path output_dir(const CommonFlags& f) {
  if (!f.out.empty()) return f.out;
  if (auto dir = slr::config_output_dir(f.config)) return *dir;
  return "slr_out";
}

const slr::PipelineLayer& pick_layer(const slr::PipelineSpec& spec, const std::string& name) {
  if (spec.layers.empty()) throw slr::ConfigError("config has no layers");
  if (name.empty()) return spec.layers.front();
  for (const auto& l : spec.layers)
    if (l.name == name) return l;
  throw slr::ConfigError("no layer named '" + name + "'");
}

json layer_report(const slr::CompressedLayer& layer) {
  const slr::CompressionRate cr = slr::compression_rate(layer);
  return {{"name", layer.metadata.name},
          {"rows", layer.rows},
          {"cols", layer.cols},
          {"nz_cols", layer.sparse.nnz_cols()},
          {"rank", layer.rank()},
          {"lowrank_dense", layer.dense_lowrank.has_value()},
          {"cr_a", cr.cr_a},
          {"cr_b", cr.cr_b},
          {"cr_total", cr.cr_total},
          {"reduction", slr::describe_reduction(cr.cr_total)},
          {"residual", layer.metadata.residual},
          {"iterations", layer.metadata.iterations},
          {"converged", layer.metadata.converged},
          {"hyperparams", layer.metadata.hyperparams},
          {"provenance", layer.metadata.provenance}};
}

// --- decompose -------------------------------------------------------------

int cmd_decompose(const CommonFlags& f, const std::string& layer_name, const std::string& dump) {
  const slr::PipelineSpec spec = slr::load_config(f.config, f.overrides());
  const slr::PipelineLayer& layer = pick_layer(spec, layer_name);
  slr::LayerProblem problem{layer.w, layer.samples, layer.activation};
  slr::Decomposition d;
  try {
    d = slr::decompose(problem, layer.hp);
  } catch (const slr::BlowupError& e) {
    if (!dump.empty()) slr::write_state_dump(e.state(), dump);
    throw;
  }
  if (!dump.empty()) slr::write_state_dump(d.state, dump);
  slr::LayerMetadata md;
  md.name = layer.name;
  md.hyperparams = slr::to_json(layer.hp);
  md.provenance = {{"version", slr::version_string()},
                   {"seed", spec.seed},
                   {"weights", layer.weights_source},
                   {"samples", layer.samples.size()}};
  const slr::CompressedLayer compressed = slr::to_compressed_layer(d, std::move(md));
  const fs::path out = output_dir(f);
  fs::create_directories(out);
  slr::save(compressed, out / (layer.name + ".slrl"));
  std::cout << layer_report(compressed).dump() << '\n';
  return kOk;
}

// --- pipeline --------------------------------------------------------------

int cmd_pipeline(const CommonFlags& f, const std::string& strategy, bool keep_going) {
  slr::PipelineSpec spec = slr::load_config(f.config, f.overrides());
  if (keep_going) spec.continue_on_error = true;
  const slr::PipelineResult result = slr::run_pipeline(spec, slr::parse_strategy(strategy));
  const fs::path out = output_dir(f);
  slr::write_artifacts(result, out);
  for (const auto& l : result.summary.at("layers")) {
    std::cout << l.at("name").get<std::string>() << ": cr " << l.at("cr_total").get<double>()
              << "%, " << l.at("iterations").get<std::uint64_t>() << " iterations"
              << (l.at("skipped").get<bool>() ? " (skipped)" : "")
              << (l.contains("error") ? " (failed: " + l.at("error").get<std::string>() + ")" : "")
              << '\n';
  }
  if (result.summary.at("total").contains("description"))
    std::cout << "total: " << result.summary.at("total").at("description").get<std::string>()
              << '\n';
  std::cout << "artifacts in " << out.string() << '\n';
  return kOk;
}

// --- bench -----------------------------------------------------------------

slr::CompressedLayer synthetic_layer(std::size_t n, std::size_t m, double cr_target,
                                     std::uint64_t seed) {
  slr::synth::Rng rng(seed);
  // Split the budget evenly between the two parts.
  const double budget = cr_target / 100.0 * static_cast<double>(n * m);
  const auto nz = static_cast<std::size_t>(std::min<double>(m, budget / 2 / (n + 1)));
  const auto r = static_cast<std::size_t>(std::min<double>(std::min(n, m), budget / 2 / (n + m)));
  std::vector<std::size_t> cols(m);
  std::iota(cols.begin(), cols.end(), 0);
  std::shuffle(cols.begin(), cols.end(), rng);
  cols.resize(nz);
  std::sort(cols.begin(), cols.end());
  slr::Matrix a(n, m);
  const slr::Matrix g = slr::synth::gaussian(rng, n, nz);
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t i = 0; i < n; ++i) a(i, cols[k]) = g(i, k);
  slr::LowRankFactors f{slr::synth::gaussian(rng, n, r), slr::synth::gaussian(rng, r, m)};
  slr::LayerMetadata md;
  md.name = "synthetic_" + std::to_string(n) + "x" + std::to_string(m);
  return slr::make_compressed_layer(slr::pack_sparse(a), std::move(f), std::move(md));
}

void emit(const slr::BenchReport& rep, std::ostream* report) {
  const std::string line = rep.to_json().dump();
  std::cout << line << '\n';
  if (report) *report << line << '\n';
}

int cmd_bench(const CommonFlags& f, bool synthetic, std::size_t rows, std::size_t cols,
              std::size_t x_cols, double cr, std::size_t reps, unsigned threads,
              const std::string& report_path) {
  std::ofstream report_file;
  std::ostream* report = nullptr;
  if (!report_path.empty()) {
    report_file.open(report_path, std::ios::trunc);
    if (!report_file) throw slr::IoError("cannot write " + report_path);
    report = &report_file;
  }
  slr::BenchOptions opts;
  opts.repetitions = reps;
  opts.threads = threads;

  if (synthetic) {
    const slr::CompressedLayer layer = synthetic_layer(rows, cols, cr, f.seed.value_or(0));
    slr::synth::Rng rng(f.seed.value_or(0) + 1);
    const slr::Matrix x = slr::synth::gaussian(rng, cols, x_cols);
    emit(slr::benchmark(layer, x, opts), report);
    return kOk;
  }

  if (f.config.empty()) throw slr::ConfigError("bench needs --config or --synthetic");
  const slr::PipelineSpec spec = slr::load_config(f.config);
  const fs::path dir = output_dir(f);
  for (const auto& l : spec.layers) {
    if (l.samples.empty()) continue;
    const slr::CompressedLayer layer = slr::load(dir / (l.name + ".slrl"));
    opts.activation = l.activation;
    emit(slr::benchmark(layer, l.w, l.samples.front().x, opts), report);
  }
  return kOk;
}

// --- compare-nl ------------------------------------------------------------

int cmd_compare(const CommonFlags& f, const std::string& layer_name, std::vector<double> grid,
                double ratio, bool match_cr, const std::string& csv_path) {
  const slr::PipelineSpec spec = slr::load_config(f.config, f.overrides());
  const slr::PipelineLayer& layer = pick_layer(spec, layer_name);
  std::vector<slr::HyperParams> hps;
  if (grid.empty()) grid.push_back(layer.hp.lambda1);
  for (double l1 : grid) {
    slr::HyperParams hp = layer.hp;
    hp.lambda1 = l1;
    hp.lambda2 = ratio * l1;
    hps.push_back(hp);
  }
  slr::CompareOptions opts;
  opts.seed = spec.seed;
  opts.match_cr = match_cr;
  const auto rows = slr::compare_nonlinear_linear(
      slr::LayerProblem{layer.w, layer.samples, layer.activation}, hps, opts);
  if (csv_path.empty()) {
    slr::write_compare_csv(rows, std::cout);
  } else {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw slr::IoError("cannot write " + csv_path);
    slr::write_compare_csv(rows, out);
    std::cout << "wrote " << rows.size() << " rows to " << csv_path << '\n';
  }
  return kOk;
}

// --- export-csr / inspect --------------------------------------------------

int cmd_export_csr(const std::string& file, const std::string& out) {
  const slr::CompressedLayer layer = slr::load(file);
  slr::export_csr(layer.sparse, out);
  const slr::Csr csr = slr::to_csr(layer.sparse);
  std::cout << "nnz " << csr.data.size() << " in " << layer.rows << " rows -> " << out << '\n';
  return kOk;
}

int cmd_inspect(const std::string& path) {
  if (fs::is_directory(path)) {
    const json summary = slr::verify_artifacts(path);
    std::cout << summary.at("total").dump() << '\n';
    std::cout << "artifacts consistent with summary.json\n";
    return kOk;
  }
  std::cout << layer_report(slr::load(path)).dump(2) << '\n';
  return kOk;
}

// --- synth -----------------------------------------------------------------

void write_fc_stack(const fs::path& out, std::uint64_t seed) {
  const std::vector<std::size_t> dims{32, 32, 32, 16};
  const slr::synth::Stack s = slr::synth::planted_stack(seed, dims);
  const auto responses = slr::synth::forward_stack(s.weights, s.train_inputs);
  const std::vector<double> lambdas{80.0, 20.0, 20.0};
  json layers = json::array();
  for (std::size_t k = 0; k < s.weights.size(); ++k) {
    const std::string name = "fc" + std::to_string(k + 1);
    slr::npy::write(out / (name + "_w.npy"), s.weights[k]);
    json samples = json::array();
    for (std::size_t i = 0; i < s.train_inputs.size(); ++i) {
      const std::string xs = name + "_x" + std::to_string(i) + ".npy";
      const std::string ys = name + "_y" + std::to_string(i) + ".npy";
      slr::npy::write(out / xs, responses[k][i]);
      slr::npy::write(out / ys, responses[k + 1][i]);
      samples.push_back({{"x", xs}, {"y", ys}});
    }
    layers.push_back({{"name", name},
                      {"weights", name + "_w.npy"},
                      {"activation", "relu"},
                      {"samples", samples},
                      {"hyperparams", {{"lambda1", lambdas[k]}, {"lambda2", 2.75 * lambdas[k]}}}});
  }
  const json config = {{"model", "synthetic-fc-stack"},
                       {"seed", seed},
                       {"sample_count", s.train_inputs.size()},
                       {"output_dir", "out"},
                       {"defaults", {{"t", 100.0}, {"tol", 1e-4}, {"max_iter", 500}}},
                       {"layers", layers}};
  std::ofstream(out / "config.json") << config.dump(2) << '\n';
}

void write_conv_pair(const fs::path& out, std::uint64_t seed) {
  slr::synth::Rng rng(seed);
  const slr::ConvGeometry g1{8, 8, 3, 3, 1, 1};
  const slr::ConvGeometry g2{8, 8, 8, 3, 2, 1};
  // Filters planted as sparse + low-rank + noise in their lowered form.
  auto planted = [&](std::size_t rows, std::size_t cols, double scale) {
    slr::synth::PlantedSpec spec;
    spec.rows = rows;
    spec.cols = cols;
    spec.sparse_cols = cols / 4;
    spec.noise = 0.1;
    spec.scale = scale;
    return slr::synth::planted_layer(rng, spec).w;
  };
  const slr::Matrix w1 = planted(8, 27, 1.0 / 3.0), w2 = planted(6, 72, 1.0 / 6.0);
  const slr::Tensor4 f1 = slr::unlower_filter(w1, 3, 3, 3), f2 = slr::unlower_filter(w2, 8, 3, 3);
  std::normal_distribution<double> nd(0.0, 1.0);
  slr::npy::write(out / "conv1_w.npy", f1);
  slr::npy::write(out / "conv2_w.npy", f2);
  json s1 = json::array(), s2 = json::array();
  for (int i = 0; i < 4; ++i) {
    slr::Tensor3 img(3, 8, 8);
    for (double& v : img.data) v = nd(rng);
    const slr::Matrix x1 = slr::im2col(img, g1);
    const slr::Matrix y1 = slr::relu(slr::matmul(w1, x1));
    const slr::Matrix x2 = slr::im2col(slr::as_feature_map(y1, 8, 8), g2);
    const slr::Matrix y2 = slr::relu(slr::matmul(w2, x2));
    const std::string k = std::to_string(i);
    slr::npy::write(out / ("conv1_x" + k + ".npy"), x1);
    slr::npy::write(out / ("conv1_y" + k + ".npy"), y1);
    slr::npy::write(out / ("conv2_x" + k + ".npy"), x2);
    slr::npy::write(out / ("conv2_y" + k + ".npy"), y2);
    s1.push_back({{"x", "conv1_x" + k + ".npy"}, {"y", "conv1_y" + k + ".npy"}});
    s2.push_back({{"x", "conv2_x" + k + ".npy"}, {"y", "conv2_y" + k + ".npy"}});
  }
  auto geom = [](const slr::ConvGeometry& g) {
    return json{{"in_h", g.in_h},     {"in_w", g.in_w},     {"channels", g.channels},
                {"kernel", g.kernel}, {"stride", g.stride}, {"pad", g.pad}};
  };
  const json config = {
      {"model", "synthetic-conv-pair"},
      {"seed", seed},
      {"sample_count", 4},
      {"output_dir", "out"},
      {"defaults", {{"lambda1", 80.0}, {"lambda2", 220.0}, {"t", 100.0}, {"max_iter", 200}}},
      {"layers",
       {{{"name", "conv1"},
         {"weights", "conv1_w.npy"},
         {"geometry", geom(g1)},
         {"samples", s1},
         {"hyperparams", {{"lambda1", 160.0}, {"lambda2", 440.0}}}},
        {{"name", "conv2"}, {"weights", "conv2_w.npy"}, {"geometry", geom(g2)}, {"samples", s2}}}}};
  std::ofstream(out / "config.json") << config.dump(2) << '\n';
}

int cmd_synth(const std::string& out, const std::string& kind, std::uint64_t seed) {
  fs::create_directories(out);
  if (kind == "fc") {
    write_fc_stack(out, seed);
  } else if (kind == "conv") {
    write_conv_pair(out, seed);
  } else {
    throw slr::ConfigError("unknown synthetic kind '" + kind + "' (fc | conv)");
  }
  std::cout << "wrote " << (fs::path(out) / "config.json").string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse plus low-rank layer compression"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* dec = app.add_subcommand("decompose", "Decompose a single layer");
  std::string layer_name, dump_dir;
  dec->add_option("--config", flags.config, "Pipeline config or exporter manifest")->required();
  dec->add_option("--out", flags.out, "Output directory");
  dec->add_option("--layer", layer_name, "Layer to decompose (default: first)");
  dec->add_option("--dump-state", dump_dir, "Write the final (or failing) ADMM state as NPY");
  add_override_flags(dec, flags);

  auto* pipe = app.add_subcommand("pipeline", "Compress every layer of a config");
  std::string strategy = "symmetric";
  bool keep_going = false;
  pipe->add_option("--config", flags.config, "Pipeline config or exporter manifest")->required();
  pipe->add_option("--out", flags.out, "Output directory");
  pipe->add_option("--strategy", strategy, "symmetric | asymmetric")
      ->check(CLI::IsMember({"symmetric", "asymmetric"}));
  pipe->add_flag("--continue-on-error", keep_going, "Keep failing layers untouched and go on");
  add_override_flags(pipe, flags);

  auto* bench = app.add_subcommand("bench", "Time compressed against dense forward passes");
  bool synthetic = false;
  std::size_t rows = 512, cols = 4608, x_cols = 4096, reps = 5;
  double cr = 10.0;
  unsigned threads = 1;
  std::string report_path;
  bench->add_option("--config", flags.config, "Config whose artifacts to benchmark");
  bench->add_option("--out", flags.out, "Artifact directory");
  bench->add_flag("--synthetic", synthetic, "Benchmark a random layer instead");
  bench->add_option("--rows", rows, "Synthetic layer rows");
  bench->add_option("--cols", cols, "Synthetic layer columns");
  bench->add_option("--x-cols", x_cols, "Synthetic input columns");
  bench->add_option("--cr", cr, "Synthetic compression rate in percent");
  bench->add_option("--seed", flags.seed, "Synthetic seed");
  bench->add_option("--reps", reps, "Timed repetitions (>= 5)");
  bench->add_option("--threads", threads, "Kernel threads");
  bench->add_option("--report", report_path, "Also append JSON lines here");

  auto* cmp = app.add_subcommand("compare-nl", "Nonlinear vs linear reconstruction objective");
  std::vector<double> grid;
  double ratio = 2.75;
  bool no_match = false;
  std::string csv_path;
  cmp->add_option("--config", flags.config, "Pipeline config")->required();
  cmp->add_option("--layer", layer_name, "Layer (default: first)");
  cmp->add_option("--grid", grid, "lambda1 values");
  cmp->add_option("--ratio", ratio, "lambda2 / lambda1");
  cmp->add_flag("--no-match-cr", no_match, "Use the same lambdas for the linear run");
  cmp->add_option("--csv", csv_path, "Write rows here instead of stdout");
  add_override_flags(cmp, flags);

  auto* csr = app.add_subcommand("export-csr", "Write the sparse part as CSR NPY arrays");
  std::string layer_file;
  csr->add_option("layer", layer_file, "Compressed layer file")->required();
  csr->add_option("--out", flags.out, "Output directory")->required();

  auto* inspect = app.add_subcommand("inspect", "Describe a layer file or verify an output dir");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "Layer file or artifact directory")->required();

  auto* synth = app.add_subcommand("synth", "Write a synthetic config with NPY inputs");
  std::string kind = "fc";
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", flags.out, "Output directory")->required();
  synth->add_option("--kind", kind, "fc | conv");
  synth->add_option("--seed", synth_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*dec) return cmd_decompose(flags, layer_name, dump_dir);
    if (*pipe) return cmd_pipeline(flags, strategy, keep_going);
    if (*bench) return cmd_bench(flags, synthetic, rows, cols, x_cols, cr, reps, threads, report_path);
    if (*cmp) return cmd_compare(flags, layer_name, grid, ratio, !no_match, csv_path);
    if (*csr) return cmd_export_csr(layer_file, flags.out);
    if (*inspect) return cmd_inspect(inspect_path);
    if (*synth) return cmd_synth(flags.out, kind, synth_seed);
  } catch (const slr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const slr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const slr::CorrectnessError& e) {
    std::cerr << "correctness gate: " << e.what() << '\n';
    return kNumerical;
  } catch (const slr::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const slr::FormatError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
  return kOk;
}
