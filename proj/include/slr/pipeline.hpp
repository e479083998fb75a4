#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "slr/admm.hpp"
#include "slr/compressed.hpp"
#include "slr/tensor.hpp"

namespace slr {

/// "git describe" of the build, or the project version outside a checkout.
std::string version_string();

/// Deterministic child seed for item `index` of a run seeded with `base`.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Solver seed of the layer called `name` in a run seeded with `base`. Keyed
/// by name so that adding or removing other layers leaves it unchanged.
std::uint64_t layer_seed(std::uint64_t base, std::string_view name);

nlohmann::json to_json(const HyperParams& hp);

/// Overlay the keys present in `j` onto `base`. Unknown keys are a ConfigError.
HyperParams hyperparams_from_json(const nlohmann::json& j, HyperParams base);

/// Compressed form of a decomposition (sparse part packed, B factored).
CompressedLayer to_compressed_layer(const Decomposition& d, LayerMetadata metadata);

enum class Strategy { symmetric, asymmetric };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct PipelineLayer {
  std::string name;
  Matrix w;
  std::vector<Sample> samples;
  Activation activation = Activation::relu;
  /// Set for convolutional layers. Asymmetric propagation reshapes the
  /// previous layer's response to in_h x in_w and unrolls it with this.
  std::optional<ConvGeometry> geometry;
  HyperParams hp;
  bool skip = false;
  /// Where the weights came from; recorded in the artifact.
  std::string weights_source;
};

struct PipelineSpec {
  std::string model;
  std::uint64_t seed = 0;
  std::vector<PipelineLayer> layers;
  /// On a failing layer keep it untouched and go on instead of aborting.
  bool continue_on_error = false;
  /// The configuration as given; embedded in the summary.
  nlohmann::json config = nlohmann::json::object();
};

/// Command-line overrides, applied on top of every layer's hyperparameters.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  std::optional<std::size_t> max_iter;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<Mode> mode;
  bool empty() const { return !seed && !tol && !max_iter && !lambda1 && !lambda2 && !mode; }
};

/// Parse a pipeline config (or an exporter manifest) and load every file it
/// names. Relative paths resolve against the config's directory.
///
/// {
///   "model": "...", "seed": 0, "sample_count": 64, "output_dir": "out",
///   "continue_on_error": false,
///   "defaults": {"lambda1": .., "lambda2": .., "t": .., "tau": .., "alpha": ..,
///                "tol": .., "max_iter": .., "mode": "both",
///                "sgd": {"learning_rate": .., "momentum": .., "epochs": ..,
///                        "batch_size": ..}},
///   "layers": [{"name": "conv1", "weights": "conv1_w.npy", "activation": "relu",
///               "samples": [{"x": "conv1_x0.npy", "y": "conv1_y0.npy"}],
///               "geometry": {"in_h": .., "in_w": .., "channels": .., "kernel": ..,
///                            "stride": .., "pad": ..},
///               "mode": "both", "hyperparams": {...}, "skip": false,
///               "sample_free": false}]
/// }
///
/// Unknown keys anywhere are a ConfigError.
PipelineSpec load_config(const std::filesystem::path& path, const Overrides& overrides = {});
PipelineSpec parse_config(const nlohmann::json& config, const std::filesystem::path& base_dir,
                          const Overrides& overrides = {});

/// Output directory named by the config, if any (resolved like other paths).
std::optional<std::filesystem::path> config_output_dir(const std::filesystem::path& config_path);

struct LayerOutcome {
  CompressedLayer layer;
  /// Inputs the solver saw (recorded or propagated).
  std::vector<Matrix> solver_inputs;
  bool skipped = false;
  std::optional<std::string> error;
};

struct PipelineResult {
  Strategy strategy = Strategy::symmetric;
  std::vector<LayerOutcome> layers;
  nlohmann::json summary;
};

/// Each layer against its own recorded inputs.
PipelineResult run_symmetric(const PipelineSpec& spec);

/// Layers in order; layer k is solved on the inputs produced by the already
/// compressed layers 1..k-1 from layer 1's recorded inputs, against its own
/// recorded (clean) targets. Sequential by nature. A layer without samples
/// breaks the chain; the next layer starts again from its recorded inputs.
PipelineResult run_asymmetric(const PipelineSpec& spec);

PipelineResult run_pipeline(const PipelineSpec& spec, Strategy strategy);

/// <name>.slrl per layer plus summary.json.
void write_artifacts(const PipelineResult& result, const std::filesystem::path& out_dir);

/// Reload the artifacts in `out_dir` and check that the summary's counts and
/// rates follow from them. Throws CorruptionError on disagreement.
nlohmann::json verify_artifacts(const std::filesystem::path& out_dir);

/// The input layer k+1 sees given layer k's response (n x p): unchanged for
/// fully connected layers, unrolled by `next` when it is convolutional.
Matrix propagate(const Matrix& response, const std::optional<ConvGeometry>& next);

/// sum ||Y - relu(W X)||^2 / sum ||Y||^2 over `samples`.
double post_relu_error(const Matrix& w, const std::vector<Sample>& samples);

struct CompareOptions {
  std::uint64_t seed = 0;
  double heldout_fraction = 0.2;
  /// Rescale the linear run's lambdas (ratio kept) until its CR is within
  /// cr_window percentage points of the nonlinear run.
  bool match_cr = true;
  double cr_window = 5.0;
  std::size_t bisection_steps = 10;
  double scale_low = 0.25;
  double scale_high = 8.0;
};

struct CompareRow {
  std::size_t grid_index = 0;
  std::string objective;  // "nonlinear" or "linear"
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double cr_total = 0.0;
  double error = 0.0;
  /// Error measured on the training samples because the held-out set was empty.
  bool training_fallback = false;
  bool cr_matched = true;
  std::size_t iterations = 0;
  bool converged = false;
  bool operator==(const CompareRow&) const = default;
};

/// For every grid point, solve once against the recorded ReLU responses and
/// once against the linear responses W X (identity objective), then score
/// both by post-ReLU error on a seeded held-out split of the samples.
std::vector<CompareRow> compare_nonlinear_linear(const LayerProblem& problem,
                                                 const std::vector<HyperParams>& grid,
                                                 const CompareOptions& opts = {});

void write_compare_csv(const std::vector<CompareRow>& rows, std::ostream& out);

}  // namespace slr
