#include "slr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "slr/errors.hpp"
#include "slr/inference.hpp"
#include "slr/npy.hpp"

#ifndef SLR_GIT_DESCRIBE
#define SLR_GIT_DESCRIBE "unknown"
#endif

namespace slr {

using nlohmann::json;

std::string version_string() { return SLR_GIT_DESCRIBE; }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + (index + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t layer_seed(std::uint64_t base, std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : name) h = (h ^ c) * 0x100000001B3ULL;
  return derive_seed(base, h);
}

json to_json(const HyperParams& hp) {
  return {{"lambda1", hp.lambda1},
          {"lambda2", hp.lambda2},
          {"t", hp.t},
          {"tau", hp.tau},
          {"alpha", hp.alpha},
          {"tol", hp.tol},
          {"max_iter", hp.max_iter},
          {"mode", std::string(to_string(hp.mode))},
          {"sgd",
           {{"learning_rate", hp.sgd.learning_rate},
            {"momentum", hp.sgd.momentum},
            {"epochs", hp.sgd.epochs},
            {"batch_size", hp.sgd.batch_size},
            {"seed", hp.sgd.seed}}}};
}

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? get<T>(j, key, where) : fallback;
}

}  // namespace

HyperParams hyperparams_from_json(const json& j, HyperParams base) {
  const std::string where = "hyperparams";
  check_keys(j, {"lambda1", "lambda2", "t", "tau", "alpha", "tol", "max_iter", "mode", "sgd"},
             where);
  base.lambda1 = get_or(j, "lambda1", base.lambda1, where);
  base.lambda2 = get_or(j, "lambda2", base.lambda2, where);
  base.t = get_or(j, "t", base.t, where);
  base.tau = get_or(j, "tau", base.tau, where);
  base.alpha = get_or(j, "alpha", base.alpha, where);
  base.tol = get_or(j, "tol", base.tol, where);
  base.max_iter = get_or(j, "max_iter", base.max_iter, where);
  if (j.contains("mode")) base.mode = parse_mode(get<std::string>(j, "mode", where));
  if (j.contains("sgd")) {
    const json& s = j.at("sgd");
    check_keys(s, {"learning_rate", "momentum", "epochs", "batch_size", "seed"}, "sgd");
    base.sgd.learning_rate = get_or(s, "learning_rate", base.sgd.learning_rate, "sgd");
    base.sgd.momentum = get_or(s, "momentum", base.sgd.momentum, "sgd");
    base.sgd.epochs = get_or(s, "epochs", base.sgd.epochs, "sgd");
    base.sgd.batch_size = get_or(s, "batch_size", base.sgd.batch_size, "sgd");
    base.sgd.seed = get_or(s, "seed", base.sgd.seed, "sgd");
  }
  return base;
}

CompressedLayer to_compressed_layer(const Decomposition& d, LayerMetadata metadata) {
  std::optional<LowRankFactors> lr;
  if (d.b_factors.rank() > 0) lr = factorize_lowrank(d.b_factors, d.b.rows(), d.b.cols());
  metadata.iterations = d.state.iter;
  metadata.converged = d.converged;
  metadata.residual = d.state.history.empty() ? 0.0 : d.state.history.back().residual;
  return make_compressed_layer(pack_sparse(d.a), std::move(lr), std::move(metadata));
}

std::string_view to_string(Strategy s) {
  return s == Strategy::symmetric ? "symmetric" : "asymmetric";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "symmetric") return Strategy::symmetric;
  if (name == "asymmetric") return Strategy::asymmetric;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Config loading

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

ConvGeometry geometry_from_json(const json& g, const std::string& where) {
  check_keys(g, {"in_h", "in_w", "channels", "kernel", "stride", "pad"}, where);
  ConvGeometry geom;
  geom.in_h = get<std::size_t>(g, "in_h", where);
  geom.in_w = get<std::size_t>(g, "in_w", where);
  geom.channels = get<std::size_t>(g, "channels", where);
  geom.kernel = get_or<std::size_t>(g, "kernel", 1, where);
  geom.stride = get_or<std::size_t>(g, "stride", 1, where);
  geom.pad = get_or<std::size_t>(g, "pad", 0, where);
  geom.validate();
  return geom;
}

void apply_overrides(HyperParams& hp, const Overrides& o) {
  if (o.tol) hp.tol = *o.tol;
  if (o.max_iter) hp.max_iter = *o.max_iter;
  if (o.lambda1) hp.lambda1 = *o.lambda1;
  if (o.lambda2) hp.lambda2 = *o.lambda2;
  if (o.mode) hp.mode = *o.mode;
}

json overrides_json(const Overrides& o) {
  json j = json::object();
  if (o.seed) j["seed"] = *o.seed;
  if (o.tol) j["tol"] = *o.tol;
  if (o.max_iter) j["max_iter"] = *o.max_iter;
  if (o.lambda1) j["lambda1"] = *o.lambda1;
  if (o.lambda2) j["lambda2"] = *o.lambda2;
  if (o.mode) j["mode"] = std::string(to_string(*o.mode));
  return j;
}

const std::regex& layer_name_pattern() {
  static const std::regex re("[A-Za-z0-9_.-]+");
  return re;
}

}  // namespace

PipelineSpec parse_config(const json& config, const std::filesystem::path& base_dir,
                          const Overrides& overrides) {
  check_keys(config,
             {"model", "seed", "sample_count", "output_dir", "continue_on_error", "defaults",
              "layers"},
             "config");
  PipelineSpec spec;
  spec.config = config;
  if (!overrides.empty()) spec.config["overrides"] = overrides_json(overrides);
  spec.model = get_or<std::string>(config, "model", "", "config");
  spec.seed = overrides.seed ? *overrides.seed : get_or<std::uint64_t>(config, "seed", 0, "config");
  spec.continue_on_error = get_or(config, "continue_on_error", false, "config");
  if (config.contains("sample_count")) get<std::size_t>(config, "sample_count", "config");
  if (config.contains("output_dir")) get<std::string>(config, "output_dir", "config");

  HyperParams defaults;
  if (config.contains("defaults")) defaults = hyperparams_from_json(config.at("defaults"), defaults);
  if (!config.contains("layers") || !config.at("layers").is_array())
    throw ConfigError("config: 'layers' must be an array");

  std::set<std::string> names;
  std::size_t index = 0;
  for (const json& lj : config.at("layers")) {
    const std::string where = "layers[" + std::to_string(index) + "]";
    check_keys(lj,
               {"name", "weights", "activation", "samples", "geometry", "mode", "hyperparams",
                "skip", "sample_free"},
               where);
    PipelineLayer layer;
    layer.name = get<std::string>(lj, "name", where);
    if (!std::regex_match(layer.name, layer_name_pattern()))
      throw ConfigError(where + ": layer name '" + layer.name +
                        "' must use only letters, digits, '_', '.', '-'");
    if (!names.insert(layer.name).second)
      throw ConfigError(where + ": duplicate layer name '" + layer.name + "'");
    layer.activation =
        parse_activation(get_or<std::string>(lj, "activation", "relu", where));
    layer.skip = get_or(lj, "skip", false, where);
    if (lj.contains("geometry")) layer.geometry = geometry_from_json(lj.at("geometry"), where);

    layer.hp = defaults;
    if (lj.contains("hyperparams")) layer.hp = hyperparams_from_json(lj.at("hyperparams"), layer.hp);
    if (lj.contains("mode")) layer.hp.mode = parse_mode(get<std::string>(lj, "mode", where));
    apply_overrides(layer.hp, overrides);
    layer.hp.sgd.seed = layer_seed(spec.seed, layer.name);
    layer.hp.validate();

    layer.weights_source = get<std::string>(lj, "weights", where);
    const npy::WeightArray weights = npy::read_weights(resolve(base_dir, layer.weights_source));
    if (const auto* t4 = std::get_if<Tensor4>(&weights)) {
      layer.w = lower_filter(*t4);
    } else {
      layer.w = std::get<Matrix>(weights);
    }
    if (layer.geometry && layer.geometry->patch_size() != layer.w.cols())
      throw GeometryError(where + ": geometry patch size " +
                          std::to_string(layer.geometry->patch_size()) +
                          " does not match weight columns " + std::to_string(layer.w.cols()));

    const bool sample_free = get_or(lj, "sample_free", false, where);
    if (lj.contains("samples")) {
      const json& sj = lj.at("samples");
      if (!sj.is_array()) throw ConfigError(where + ".samples: expected an array");
      std::size_t si = 0;
      for (const json& s : sj) {
        const std::string sw = where + ".samples[" + std::to_string(si++) + "]";
        check_keys(s, {"x", "y"}, sw);
        layer.samples.push_back({npy::read_matrix(resolve(base_dir, get<std::string>(s, "x", sw))),
                                 npy::read_matrix(resolve(base_dir, get<std::string>(s, "y", sw)))});
      }
    }
    if (sample_free && !layer.samples.empty())
      throw ConfigError(where + ": sample_free layer lists samples");
    LayerProblem{layer.w, layer.samples, layer.activation}.validate();
    spec.layers.push_back(std::move(layer));
    ++index;
  }
  return spec;
}

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace

PipelineSpec load_config(const std::filesystem::path& path, const Overrides& overrides) {
  return parse_config(read_json_file(path), path.parent_path(), overrides);
}

std::optional<std::filesystem::path> config_output_dir(const std::filesystem::path& config_path) {
  const json config = read_json_file(config_path);
  if (!config.is_object() || !config.contains("output_dir")) return std::nullopt;
  return resolve(config_path.parent_path(), get<std::string>(config, "output_dir", "config"));
}

// ---------------------------------------------------------------------------
// Running

Matrix propagate(const Matrix& response, const std::optional<ConvGeometry>& next) {
  if (!next) return response;
  if (response.rows() != next->channels || response.cols() != next->in_h * next->in_w)
    throw GeometryError("response " + std::to_string(response.rows()) + "x" +
                        std::to_string(response.cols()) + " cannot feed a " +
                        std::to_string(next->channels) + "x" + std::to_string(next->in_h) + "x" +
                        std::to_string(next->in_w) + " input");
  return im2col(as_feature_map(response, next->in_h, next->in_w), *next);
}

namespace {

LayerMetadata base_metadata(const PipelineSpec& spec, const PipelineLayer& layer,
                            std::size_t index, Strategy strategy) {
  LayerMetadata md;
  md.name = layer.name;
  md.hyperparams = to_json(layer.hp);
  md.provenance = {{"version", version_string()},
                   {"model", spec.model},
                   {"seed", spec.seed},
                   {"layer_index", index},
                   {"strategy", std::string(to_string(strategy))},
                   {"activation", std::string(to_string(layer.activation))},
                   {"weights", layer.weights_source},
                   {"samples", layer.samples.size()}};
  return md;
}

json summarize(const PipelineSpec& spec, const PipelineResult& result) {
  json layers = json::array();
  std::uint64_t original = 0, compressed = 0;
  for (const LayerOutcome& o : result.layers) {
    const CompressedLayer& l = o.layer;
    const CompressionRate cr = compression_rate(l);
    original += l.counts.original;
    compressed += l.counts.sparse + l.counts.lowrank;
    json entry = {{"name", l.metadata.name},
                  {"file", l.metadata.name + ".slrl"},
                  {"rows", l.rows},
                  {"cols", l.cols},
                  {"nz_cols", l.sparse.nnz_cols()},
                  {"rank", l.rank()},
                  {"lowrank_dense", l.dense_lowrank.has_value()},
                  {"skipped", o.skipped},
                  {"param_counts",
                   {{"original", l.counts.original},
                    {"sparse", l.counts.sparse},
                    {"lowrank", l.counts.lowrank}}},
                  {"cr_a", cr.cr_a},
                  {"cr_b", cr.cr_b},
                  {"cr_total", cr.cr_total},
                  {"residual", l.metadata.residual},
                  {"iterations", l.metadata.iterations},
                  {"converged", l.metadata.converged}};
    if (o.error) entry["error"] = *o.error;
    layers.push_back(std::move(entry));
  }
  json total = {{"original", original}, {"compressed", compressed}};
  if (original > 0) {
    const double cr = 100.0 * static_cast<double>(compressed) / static_cast<double>(original);
    total["cr_total"] = cr;
    total["reduction"] = cr > 0.0 ? json(100.0 / cr) : json(nullptr);
    total["description"] = describe_reduction(cr);
  }
  return {{"version", version_string()},
          {"model", spec.model},
          {"seed", spec.seed},
          {"strategy", std::string(to_string(result.strategy))},
          {"config", spec.config},
          {"layers", std::move(layers)},
          {"total", std::move(total)}};
}

LayerOutcome solve_layer(const PipelineSpec& spec, const PipelineLayer& layer, std::size_t index,
                         Strategy strategy, std::vector<Sample> samples) {
  LayerOutcome out;
  for (const Sample& s : samples) out.solver_inputs.push_back(s.x);
  LayerMetadata md = base_metadata(spec, layer, index, strategy);
  if (layer.skip) {
    out.skipped = true;
    out.layer = make_passthrough_layer(layer.w, std::move(md));
    return out;
  }
  LayerProblem problem{layer.w, std::move(samples), layer.activation};
  try {
    const Decomposition d = decompose(problem, layer.hp);
    out.layer = to_compressed_layer(d, std::move(md));
  } catch (const Error& e) {
    if (!spec.continue_on_error) throw;
    out.error = e.what();
    out.layer = make_passthrough_layer(layer.w, base_metadata(spec, layer, index, strategy));
  }
  return out;
}

}  // namespace

PipelineResult run_symmetric(const PipelineSpec& spec) {
  PipelineResult result;
  result.strategy = Strategy::symmetric;
  for (std::size_t k = 0; k < spec.layers.size(); ++k)
    result.layers.push_back(
        solve_layer(spec, spec.layers[k], k, Strategy::symmetric, spec.layers[k].samples));
  result.summary = summarize(spec, result);
  return result;
}

PipelineResult run_asymmetric(const PipelineSpec& spec) {
  PipelineResult result;
  result.strategy = Strategy::asymmetric;
  // Inputs to the current layer, produced by the compressed layers before it.
  std::optional<std::vector<Matrix>> carried;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const PipelineLayer& layer = spec.layers[k];
    std::vector<Sample> samples = layer.samples;
    if (carried && !samples.empty()) {
      if (carried->size() != samples.size())
        throw ConfigError("layer '" + layer.name + "' has " + std::to_string(samples.size()) +
                          " samples but the previous layer produced " +
                          std::to_string(carried->size()));
      for (std::size_t i = 0; i < samples.size(); ++i) samples[i].x = (*carried)[i];
    }
    LayerOutcome outcome = solve_layer(spec, layer, k, Strategy::asymmetric, std::move(samples));

    if (outcome.solver_inputs.empty() || k + 1 == spec.layers.size()) {
      carried.reset();
    } else {
      std::vector<Matrix> next;
      next.reserve(outcome.solver_inputs.size());
      for (const Matrix& x : outcome.solver_inputs)
        next.push_back(propagate(forward_compressed(outcome.layer, x, layer.activation),
                                 spec.layers[k + 1].geometry));
      carried = std::move(next);
    }
    result.layers.push_back(std::move(outcome));
  }
  result.summary = summarize(spec, result);
  return result;
}

PipelineResult run_pipeline(const PipelineSpec& spec, Strategy strategy) {
  return strategy == Strategy::symmetric ? run_symmetric(spec) : run_asymmetric(spec);
}

void write_artifacts(const PipelineResult& result, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (const LayerOutcome& o : result.layers) save(o.layer, out_dir / (o.layer.metadata.name + ".slrl"));
  std::ofstream out(out_dir / "summary.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "summary.json").string());
  out << result.summary.dump(2) << '\n';
  if (!out) throw IoError("short write on summary.json");
}

json verify_artifacts(const std::filesystem::path& out_dir) {
  const json summary = read_json_file(out_dir / "summary.json");
  std::uint64_t original = 0, compressed = 0;
  try {
    for (const json& entry : summary.at("layers")) {
      const CompressedLayer layer = load(out_dir / entry.at("file").get<std::string>());
      const CompressionRate cr = compression_rate(layer);
      const json& pc = entry.at("param_counts");
      const bool counts_ok = pc.at("original").get<std::uint64_t>() == layer.counts.original &&
                             pc.at("sparse").get<std::uint64_t>() == layer.counts.sparse &&
                             pc.at("lowrank").get<std::uint64_t>() == layer.counts.lowrank;
      if (!counts_ok || entry.at("cr_total").get<double>() != cr.cr_total ||
          entry.at("name").get<std::string>() != layer.metadata.name)
        throw CorruptionError("summary entry for '" + entry.at("name").get<std::string>() +
                              "' does not match its artifact");
      original += layer.counts.original;
      compressed += layer.counts.sparse + layer.counts.lowrank;
    }
    const json& total = summary.at("total");
    if (total.at("original").get<std::uint64_t>() != original ||
        total.at("compressed").get<std::uint64_t>() != compressed)
      throw CorruptionError("summary totals do not match the layer artifacts");
  } catch (const json::exception& e) {
    throw FormatError(std::string("summary.json: ") + e.what());
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Nonlinear vs linear

double post_relu_error(const Matrix& w, const std::vector<Sample>& samples) {
  double num = 0.0, den = 0.0;
  for (const Sample& s : samples) {
    num += squared_frobenius(s.y - relu(matmul(w, s.x)));
    den += squared_frobenius(s.y);
  }
  return den > 0.0 ? num / den : num;
}

namespace {

struct Scored {
  double cr = 0.0;
  double error = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

Scored solve_and_score(const LayerProblem& problem, const HyperParams& hp,
                       const std::vector<Sample>& eval) {
  const Decomposition d = decompose(problem, hp);
  const CompressedLayer layer = to_compressed_layer(d, {});
  return {compression_rate(layer).cr_total, post_relu_error(d.a + d.b, eval), d.state.iter,
          d.converged};
}

}  // namespace

std::vector<CompareRow> compare_nonlinear_linear(const LayerProblem& problem,
                                                 const std::vector<HyperParams>& grid,
                                                 const CompareOptions& opts) {
  if (grid.empty()) throw ConfigError("compare: hyperparameter grid is empty");
  if (problem.activation != Activation::relu)
    throw ConfigError("compare: the layer's recorded responses must be post-ReLU");
  if (!(opts.heldout_fraction >= 0.0 && opts.heldout_fraction < 1.0))
    throw ConfigError("compare: heldout_fraction must be in [0, 1)");
  problem.validate();

  const std::size_t n = problem.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(opts.seed, 0));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::floor(opts.heldout_fraction * n));
  std::vector<std::size_t> held(order.begin(), order.begin() + n_held);
  std::vector<std::size_t> train(order.begin() + n_held, order.end());
  std::sort(held.begin(), held.end());
  std::sort(train.begin(), train.end());

  LayerProblem nonlinear{problem.w, {}, Activation::relu};
  LayerProblem linear{problem.w, {}, Activation::identity};
  for (std::size_t i : train) {
    nonlinear.samples.push_back(problem.samples[i]);
    linear.samples.push_back({problem.samples[i].x, matmul(problem.w, problem.samples[i].x)});
  }
  std::vector<Sample> eval;
  for (std::size_t i : held) eval.push_back(problem.samples[i]);
  const bool fallback = eval.empty();
  if (fallback) eval = nonlinear.samples;

  std::vector<CompareRow> rows;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    HyperParams hp = grid[g];
    hp.sgd.seed = derive_seed(opts.seed, g + 1);
    const Scored nl = solve_and_score(nonlinear, hp, eval);
    rows.push_back({g, "nonlinear", hp.lambda1, hp.lambda2, nl.cr, nl.error, fallback, true,
                    nl.iterations, nl.converged});

    auto run_linear = [&](double scale) {
      HyperParams h = hp;
      h.lambda1 *= scale;
      h.lambda2 *= scale;
      return std::pair{h, solve_and_score(linear, h, eval)};
    };
    auto best = run_linear(1.0);
    auto within = [&](const Scored& s) { return std::abs(s.cr - nl.cr) <= opts.cr_window; };
    if (opts.match_cr && !within(best.second)) {
      double lo = opts.scale_low, hi = opts.scale_high;
      for (std::size_t step = 0; step < opts.bisection_steps; ++step) {
        const double mid = std::sqrt(lo * hi);
        auto trial = run_linear(mid);
        if (std::abs(trial.second.cr - nl.cr) < std::abs(best.second.cr - nl.cr)) best = trial;
        if (within(trial.second)) break;
        // Larger lambdas compress harder.
        if (trial.second.cr > nl.cr) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
    }
    const HyperParams& lh = best.first;
    const Scored& lin = best.second;
    rows.push_back({g, "linear", lh.lambda1, lh.lambda2, lin.cr, lin.error, fallback,
                    !opts.match_cr || within(lin), lin.iterations, lin.converged});
  }
  return rows;
}

void write_compare_csv(const std::vector<CompareRow>& rows, std::ostream& out) {
  out << "grid_index,objective,lambda1,lambda2,cr_total,error,training_fallback,cr_matched,"
         "iterations,converged\n";
  out << std::setprecision(10);
  for (const CompareRow& r : rows) {
    out << r.grid_index << ',' << r.objective << ',' << r.lambda1 << ',' << r.lambda2 << ','
        << r.cr_total << ',' << r.error << ',' << (r.training_fallback ? 1 : 0) << ','
        << (r.cr_matched ? 1 : 0) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << '\n';
  }
}

}  // namespace slr
