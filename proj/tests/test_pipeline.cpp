#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "slr/errors.hpp"
#include "slr/inference.hpp"
#include "slr/npy.hpp"
#include "slr/pipeline.hpp"
#include "slr/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using slr::Matrix;

namespace {

const fs::path fixtures{SLR_FIXTURES};

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "slr_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

// A planted 3-layer stack (dims 16-12-12-8) written as NPY files with a
// config whose recorded inputs are the clean responses of the previous layer.
json write_stack(const fs::path& dir, std::uint64_t seed, std::size_t layers = 3) {
  const std::vector<std::size_t> dims{16, 12, 12, 8};
  const auto stack = slr::synth::planted_stack(seed, {dims.begin(), dims.begin() + layers + 1}, 4, 0, 6);
  const auto responses = slr::synth::forward_stack(stack.weights, stack.train_inputs);
  json cfg = {{"model", "stack"}, {"seed", seed}, {"layers", json::array()}};
  cfg["defaults"] = {{"lambda1", 0.5}, {"lambda2", 1.4}, {"t", 1.0}, {"max_iter", 40}};
  for (std::size_t k = 0; k < layers; ++k) {
    const std::string name = "fc" + std::to_string(k + 1);
    slr::npy::write(dir / (name + "_w.npy"), stack.weights[k]);
    json samples = json::array();
    for (std::size_t i = 0; i < responses[k].size(); ++i) {
      const std::string x = name + "_x" + std::to_string(i) + ".npy";
      const std::string y = name + "_y" + std::to_string(i) + ".npy";
      slr::npy::write(dir / x, responses[k][i]);
      slr::npy::write(dir / y, responses[k + 1][i]);
      samples.push_back({{"x", x}, {"y", y}});
    }
    cfg["layers"].push_back({{"name", name}, {"weights", name + "_w.npy"}, {"samples", samples}});
  }
  return cfg;
}

slr::PipelineSpec parse(const json& cfg, const fs::path& dir, const slr::Overrides& o = {}) {
  return slr::parse_config(cfg, dir, o);
}

void check_same_layer(const slr::CompressedLayer& x, const slr::CompressedLayer& y) {
  CHECK(x.sparse == y.sparse);
  CHECK(x.lowrank == y.lowrank);
  CHECK(x.dense_lowrank == y.dense_lowrank);
  CHECK(x.counts == y.counts);
  CHECK(x.metadata.residual == y.metadata.residual);
  CHECK(x.metadata.iterations == y.metadata.iterations);
}

}  // namespace

TEST_CASE("seeds") {
  CHECK(slr::derive_seed(1, 0) == slr::derive_seed(1, 0));
  CHECK(slr::derive_seed(1, 0) != slr::derive_seed(1, 1));
  CHECK(slr::derive_seed(1, 0) != slr::derive_seed(2, 0));
  CHECK(slr::layer_seed(5, "conv1") == slr::layer_seed(5, "conv1"));
  CHECK(slr::layer_seed(5, "conv1") != slr::layer_seed(5, "conv2"));
  CHECK_FALSE(slr::version_string().empty());
}

TEST_CASE("hyperparameter json") {
  slr::HyperParams base;
  const auto hp = slr::hyperparams_from_json(
      {{"lambda1", 0.2}, {"mode", "sparse-only"}, {"sgd", {{"epochs", 3}}}}, base);
  CHECK(hp.lambda1 == 0.2);
  CHECK(hp.lambda2 == base.lambda2);
  CHECK(hp.mode == slr::Mode::sparse_only);
  CHECK(hp.sgd.epochs == 3);
  CHECK(slr::hyperparams_from_json(slr::to_json(hp), {}).lambda1 == 0.2);
  CHECK_THROWS_AS(slr::hyperparams_from_json({{"lamda1", 0.2}}, base), slr::ConfigError);
  CHECK_THROWS_AS(slr::hyperparams_from_json({{"sgd", {{"lr", 1}}}}, base), slr::ConfigError);
  CHECK_THROWS_AS(slr::hyperparams_from_json({{"lambda1", "big"}}, base), slr::ConfigError);
  CHECK(slr::parse_strategy("asymmetric") == slr::Strategy::asymmetric);
  CHECK_THROWS_AS(slr::parse_strategy("both"), slr::ConfigError);
}

TEST_CASE("config validation") {
  const auto dir = temp_dir("validation");
  const json good = write_stack(dir, 1, 2);
  CHECK_NOTHROW(parse(good, dir));

  json bad = good;
  bad["extra"] = 1;
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][0]["weight"] = "x.npy";
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][0]["samples"][0]["z"] = "x.npy";
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][1]["name"] = "fc1";
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][1]["name"] = "../evil";
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][0]["weights"] = "missing.npy";
  CHECK_THROWS_AS(parse(bad, dir), slr::IoError);
  bad = good;
  bad["layers"][0]["samples"][0]["x"] = bad["layers"][1]["samples"][0]["x"];
  CHECK_THROWS_AS(parse(bad, dir), slr::ShapeError);
  bad = good;
  bad["layers"][0]["sample_free"] = true;
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][0]["geometry"] = {{"in_h", 4}, {"in_w", 4}, {"channels", 3}, {"kernel", 3}};
  CHECK_THROWS_AS(parse(bad, dir), slr::GeometryError);
  bad = good;
  bad["defaults"]["lambda1"] = -1;
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"][0]["mode"] = "dense";
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);
  bad = good;
  bad["layers"] = json::object();
  CHECK_THROWS_AS(parse(bad, dir), slr::ConfigError);

  CHECK_THROWS_AS(slr::load_config(dir / "absent.json"), slr::IoError);
  std::ofstream(dir / "broken.json") << "{\"layers\": [";
  CHECK_THROWS_AS(slr::load_config(dir / "broken.json"), slr::ConfigError);
}

TEST_CASE("exporter manifest loads") {
  const auto spec = slr::load_config(fixtures / "manifest.json");
  CHECK(spec.model == "toy-conv");
  CHECK(spec.seed == 7);
  REQUIRE(spec.layers.size() == 2);
  const auto& conv = spec.layers[0];
  CHECK(conv.w.rows() == 4);
  CHECK(conv.w.cols() == 18);
  REQUIRE(conv.geometry.has_value());
  CHECK(conv.geometry->positions() == 25);
  CHECK(conv.samples.size() == 2);
  CHECK(spec.layers[1].samples.empty());
  CHECK(spec.config.at("sample_count") == 2);
}

TEST_CASE("layer hyperparameters: defaults, per-layer values, then overrides") {
  const auto dir = temp_dir("overrides");
  json cfg = write_stack(dir, 2, 2);
  cfg["layers"][1]["hyperparams"] = {{"lambda1", 0.9}, {"tol", 1e-6}};
  cfg["layers"][1]["mode"] = "lowrank_only";
  const auto plain = parse(cfg, dir);
  CHECK(plain.layers[0].hp.lambda1 == 0.5);
  CHECK(plain.layers[1].hp.lambda1 == 0.9);
  CHECK(plain.layers[1].hp.tol == 1e-6);
  CHECK(plain.layers[1].hp.mode == slr::Mode::lowrank_only);
  CHECK(plain.layers[0].hp.sgd.seed == slr::layer_seed(2, "fc1"));
  CHECK_FALSE(plain.config.contains("overrides"));

  slr::Overrides o;
  o.lambda1 = 0.05;
  o.seed = 11;
  o.mode = slr::Mode::both;
  const auto over = parse(cfg, dir, o);
  for (const auto& l : over.layers) {
    CHECK(l.hp.lambda1 == 0.05);
    CHECK(l.hp.mode == slr::Mode::both);
  }
  CHECK(over.layers[1].hp.tol == 1e-6);
  CHECK(over.seed == 11);
  CHECK(over.layers[1].hp.sgd.seed == slr::layer_seed(11, "fc2"));
  CHECK(over.config.at("overrides").at("lambda1") == 0.05);
}

TEST_CASE("single-layer pipeline equals decompose") {
  const auto dir = temp_dir("single");
  const auto spec = parse(write_stack(dir, 3, 1), dir);
  const auto& l = spec.layers[0];
  const auto d = slr::decompose({l.w, l.samples, l.activation}, l.hp);
  const auto direct = slr::to_compressed_layer(d, {});
  for (auto s : {slr::Strategy::symmetric, slr::Strategy::asymmetric}) {
    const auto r = slr::run_pipeline(spec, s);
    REQUIRE(r.layers.size() == 1);
    check_same_layer(r.layers[0].layer, direct);
    CHECK(r.layers[0].layer.densify() == d.a + d.b);
  }
}

TEST_CASE("skipping a layer leaves the others as if run alone") {
  const auto dir = temp_dir("skip");
  json cfg = write_stack(dir, 4, 2);
  json alone = cfg;
  alone["layers"].erase(0);
  cfg["layers"][0]["skip"] = true;
  const auto both = parse(cfg, dir);
  const auto single = slr::run_symmetric(parse(alone, dir));

  for (auto s : {slr::Strategy::symmetric, slr::Strategy::asymmetric}) {
    const auto r = slr::run_pipeline(both, s);
    CHECK(r.layers[0].skipped);
    CHECK(r.layers[0].layer.densify() == both.layers[0].w);
    CHECK(slr::compression_rate(r.layers[0].layer).cr_total == 100.0);
    check_same_layer(r.layers[1].layer, single.layers[0].layer);
    CHECK(r.summary.at("layers")[0].at("skipped") == true);
  }
}

TEST_CASE("with every layer skipped asymmetric equals symmetric") {
  const auto dir = temp_dir("all_skipped");
  json cfg = write_stack(dir, 5, 3);
  for (auto& l : cfg["layers"]) l["skip"] = true;
  const auto spec = parse(cfg, dir);
  const auto sym = slr::run_symmetric(spec), asym = slr::run_asymmetric(spec);
  for (std::size_t k = 0; k < 3; ++k) {
    check_same_layer(sym.layers[k].layer, asym.layers[k].layer);
    CHECK(sym.layers[k].solver_inputs == asym.layers[k].solver_inputs);
  }
  CHECK(sym.summary.at("layers") == asym.summary.at("layers"));
  CHECK(sym.summary.at("total") == asym.summary.at("total"));
}

TEST_CASE("asymmetric inputs come from the compressed previous layer") {
  const auto dir = temp_dir("propagation");
  const auto spec = parse(write_stack(dir, 6, 3), dir);
  const auto r = slr::run_asymmetric(spec);
  for (std::size_t k = 1; k < 3; ++k) {
    const auto& prev = r.layers[k - 1];
    REQUIRE(r.layers[k].solver_inputs.size() == prev.solver_inputs.size());
    for (std::size_t i = 0; i < prev.solver_inputs.size(); ++i)
      CHECK(r.layers[k].solver_inputs[i] ==
            slr::forward_compressed(prev.layer, prev.solver_inputs[i], slr::Activation::relu));
  }
  for (std::size_t i = 0; i < spec.layers[0].samples.size(); ++i)
    CHECK(r.layers[0].solver_inputs[i] == spec.layers[0].samples[i].x);

  // Symmetric mode uses the recorded inputs everywhere.
  const auto s = slr::run_symmetric(spec);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < spec.layers[k].samples.size(); ++i)
      CHECK(s.layers[k].solver_inputs[i] == spec.layers[k].samples[i].x);
}

TEST_CASE("a layer without samples breaks the propagation chain") {
  const auto dir = temp_dir("chain");
  json cfg = write_stack(dir, 7, 3);
  cfg["layers"][1].erase("samples");
  cfg["layers"][1]["sample_free"] = true;
  const auto spec = parse(cfg, dir);
  const auto r = slr::run_asymmetric(spec);
  CHECK(r.layers[1].solver_inputs.empty());
  for (std::size_t i = 0; i < spec.layers[2].samples.size(); ++i)
    CHECK(r.layers[2].solver_inputs[i] == spec.layers[2].samples[i].x);
}

TEST_CASE("mismatched sample counts between chained layers are rejected") {
  const auto dir = temp_dir("counts");
  json cfg = write_stack(dir, 8, 2);
  cfg["layers"][1]["samples"].erase(0);
  const auto spec = parse(cfg, dir);
  CHECK_NOTHROW(slr::run_symmetric(spec));
  CHECK_THROWS_AS(slr::run_asymmetric(spec), slr::ConfigError);
}

TEST_CASE("conv propagation unrolls the response with the next geometry") {
  std::mt19937_64 rng(71);
  const slr::ConvGeometry g{4, 3, 2, 3, 1, 1};
  const Matrix response = oracle::random(rng, 2, 12);
  const Matrix cols = slr::propagate(response, g);
  CHECK(cols == slr::im2col(slr::as_feature_map(response, 4, 3), g));
  CHECK(cols.rows() == 18);
  CHECK(cols.cols() == 12);
  CHECK(slr::propagate(response, std::nullopt) == response);
  CHECK_THROWS_AS(slr::propagate(oracle::random(rng, 3, 12), g), slr::GeometryError);

  // Two conv layers: layer 2's solver inputs are the unrolled compressed responses.
  const auto dir = temp_dir("conv");
  slr::Tensor4 f1(2, 1, 3, 3), f2(3, 2, 3, 3);
  std::normal_distribution<double> nd;
  for (double& v : f1.data) v = nd(rng);
  for (double& v : f2.data) v = nd(rng);
  slr::npy::write(dir / "c1.npy", f1);
  slr::npy::write(dir / "c2.npy", f2);
  const slr::ConvGeometry g1{5, 5, 1, 3, 1, 1}, g2{5, 5, 2, 3, 1, 1};
  json cfg = {{"seed", 1}, {"defaults", {{"lambda1", 0.3}, {"lambda2", 0.8}, {"t", 1.0},
                                         {"max_iter", 20}}}};
  json s1 = json::array(), s2 = json::array();
  for (int i = 0; i < 3; ++i) {
    slr::Tensor3 img(1, 5, 5);
    for (double& v : img.data) v = nd(rng);
    const Matrix x1 = slr::im2col(img, g1);
    const Matrix y1 = slr::forward_dense(slr::lower_filter(f1), x1, slr::Activation::relu);
    const Matrix x2 = slr::propagate(y1, g2);
    const Matrix y2 = slr::forward_dense(slr::lower_filter(f2), x2, slr::Activation::relu);
    const std::string k = std::to_string(i);
    slr::npy::write(dir / ("x1_" + k + ".npy"), x1);
    slr::npy::write(dir / ("y1_" + k + ".npy"), y1);
    slr::npy::write(dir / ("x2_" + k + ".npy"), x2);
    slr::npy::write(dir / ("y2_" + k + ".npy"), y2);
    s1.push_back({{"x", "x1_" + k + ".npy"}, {"y", "y1_" + k + ".npy"}});
    s2.push_back({{"x", "x2_" + k + ".npy"}, {"y", "y2_" + k + ".npy"}});
  }
  auto geo = [](const slr::ConvGeometry& q) {
    return json{{"in_h", q.in_h}, {"in_w", q.in_w}, {"channels", q.channels},
                {"kernel", q.kernel}, {"stride", q.stride}, {"pad", q.pad}};
  };
  cfg["layers"] = {{{"name", "conv1"}, {"weights", "c1.npy"}, {"geometry", geo(g1)}, {"samples", s1}},
                   {{"name", "conv2"}, {"weights", "c2.npy"}, {"geometry", geo(g2)}, {"samples", s2}}};
  const auto spec = parse(cfg, dir);
  CHECK(spec.layers[1].w.cols() == 18);
  const auto r = slr::run_asymmetric(spec);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(r.layers[1].solver_inputs[i] ==
          slr::propagate(slr::forward_compressed(r.layers[0].layer, r.layers[0].solver_inputs[i],
                                                 slr::Activation::relu),
                         g2));

  cfg["layers"][0]["skip"] = true;
  const auto skipped = slr::run_asymmetric(parse(cfg, dir));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(slr::max_abs(skipped.layers[1].solver_inputs[i] - spec.layers[1].samples[i].x) == 0.0);
}

TEST_CASE("failing layers abort unless continue_on_error is set") {
  const auto dir = temp_dir("errors");
  json cfg = write_stack(dir, 9, 2);
  cfg["layers"][0]["hyperparams"] = {{"sgd", {{"learning_rate", 50.0}, {"epochs", 10}}}};
  CHECK_THROWS_AS(slr::run_symmetric(parse(cfg, dir)), slr::NumericalError);
  cfg["continue_on_error"] = true;
  const auto spec = parse(cfg, dir);
  const auto r = slr::run_symmetric(spec);
  REQUIRE(r.layers[0].error.has_value());
  CHECK(r.layers[0].layer.densify() == spec.layers[0].w);
  CHECK(r.summary.at("layers")[0].contains("error"));
  CHECK_FALSE(r.layers[1].error.has_value());
}

TEST_CASE("artifacts are byte-identical across reruns and self-consistent") {
  const auto dir = temp_dir("artifacts");
  write_json(dir / "config.json", write_stack(dir, 10, 3));
  for (auto s : {slr::Strategy::symmetric, slr::Strategy::asymmetric}) {
    const std::string tag(slr::to_string(s));
    slr::write_artifacts(slr::run_pipeline(slr::load_config(dir / "config.json"), s), dir / (tag + "1"));
    slr::write_artifacts(slr::run_pipeline(slr::load_config(dir / "config.json"), s), dir / (tag + "2"));
    for (const auto& e : fs::directory_iterator(dir / (tag + "1")))
      CHECK(read_text(e.path()) == read_text(dir / (tag + "2") / e.path().filename()));

    const json summary = slr::verify_artifacts(dir / (tag + "1"));
    CHECK(summary.at("strategy") == tag);
    CHECK(summary.at("seed") == 10);
    CHECK(summary.at("version") == slr::version_string());
    CHECK(summary.at("config").at("model") == "stack");
    CHECK(summary.at("layers").size() == 3);
    const auto layer = slr::load(dir / (tag + "1") / "fc2.slrl");
    CHECK(layer.metadata.provenance.at("strategy") == tag);
    CHECK(layer.metadata.provenance.at("seed") == 10);
  }

  json tampered = json::parse(read_text(dir / "symmetric1" / "summary.json"));
  tampered["layers"][1]["param_counts"]["sparse"] = 1;
  write_json(dir / "symmetric1" / "summary.json", tampered);
  CHECK_THROWS_AS(slr::verify_artifacts(dir / "symmetric1"), slr::CorruptionError);
  tampered["layers"][1].erase("param_counts");
  write_json(dir / "symmetric1" / "summary.json", tampered);
  CHECK_THROWS_AS(slr::verify_artifacts(dir / "symmetric1"), slr::FormatError);
}

TEST_CASE("summary totals") {
  const auto dir = temp_dir("totals");
  const auto r = slr::run_symmetric(parse(write_stack(dir, 11, 3), dir));
  std::uint64_t original = 0, compressed = 0;
  for (const auto& o : r.layers) {
    original += o.layer.counts.original;
    compressed += o.layer.counts.sparse + o.layer.counts.lowrank;
  }
  const json& total = r.summary.at("total");
  CHECK(total.at("original") == original);
  CHECK(total.at("compressed") == compressed);
  const double cr = 100.0 * static_cast<double>(compressed) / static_cast<double>(original);
  CHECK(total.at("cr_total").get<double>() == doctest::Approx(cr));
  CHECK(total.at("description") == slr::describe_reduction(cr));
}

TEST_CASE("post-relu error") {
  const Matrix w{{1, -1}};
  const std::vector<slr::Sample> s{{Matrix{{1}, {0}}, Matrix{{2}}}};
  CHECK(slr::post_relu_error(w, s) == doctest::Approx(0.25));
  CHECK(slr::post_relu_error(Matrix{{2, 0}}, s) == 0.0);
}

TEST_CASE("nonlinear vs linear comparison") {
  std::mt19937_64 rng(72);
  slr::LayerProblem p;
  p.w = oracle::random(rng, 6, 10);
  for (int i = 0; i < 10; ++i) {
    const Matrix x = oracle::random(rng, 10, 8);
    p.samples.push_back({x, slr::relu(slr::matmul(p.w, x))});
  }
  slr::HyperParams hp;
  hp.lambda1 = 0.5;
  hp.lambda2 = 1.4;
  hp.t = 1.0;
  hp.max_iter = 60;

  CHECK_THROWS_AS(slr::compare_nonlinear_linear(p, {}), slr::ConfigError);
  slr::LayerProblem lin = p;
  lin.activation = slr::Activation::identity;
  CHECK_THROWS_AS(slr::compare_nonlinear_linear(lin, {hp}), slr::ConfigError);

  slr::CompareOptions opts;
  opts.seed = 3;
  const auto rows = slr::compare_nonlinear_linear(p, {hp, hp}, opts);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].objective == "nonlinear");
  CHECK(rows[1].objective == "linear");
  CHECK(rows[2].grid_index == 1);
  CHECK_FALSE(rows[0].training_fallback);
  CHECK(rows == slr::compare_nonlinear_linear(p, {hp, hp}, opts));
  for (const auto& r : rows)
    if (r.cr_matched && r.objective == "linear") CHECK(std::abs(r.cr_total - rows[0].cr_total) <= 5.0);

  opts.heldout_fraction = 0.0;
  const auto train_only = slr::compare_nonlinear_linear(p, {hp}, opts);
  CHECK(train_only[0].training_fallback);
  CHECK(train_only[1].training_fallback);

  std::ostringstream csv;
  slr::write_compare_csv(rows, csv);
  const std::string text = csv.str();
  CHECK(text.rfind("grid_index,objective,lambda1,lambda2,cr_total,error,training_fallback,"
                   "cr_matched,iterations,converged\n",
                   0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
}

TEST_CASE("nonlinear and linear objectives agree where the ReLU is inactive") {
  std::mt19937_64 rng(73);
  slr::LayerProblem p;
  p.w = slr::relu(oracle::random(rng, 5, 8)) + Matrix(5, 8, 0.5);
  for (int i = 0; i < 10; ++i) {
    const Matrix x = slr::relu(oracle::random(rng, 8, 6)) + Matrix(8, 6, 0.5);
    p.samples.push_back({x, slr::relu(slr::matmul(p.w, x))});
  }
  slr::HyperParams hp;
  hp.lambda1 = 0.5;
  hp.lambda2 = 1.4;
  hp.t = 1.0;
  hp.tol = 1e-7;
  hp.max_iter = 3000;
  hp.sgd.epochs = 20;
  slr::CompareOptions opts;
  opts.match_cr = false;
  const auto rows = slr::compare_nonlinear_linear(p, {hp}, opts);
  CHECK(rows[0].cr_total == doctest::Approx(rows[1].cr_total));
  CHECK(std::abs(rows[0].error - rows[1].error) <= 1e-3);
}

TEST_CASE("output directory from config") {
  const auto dir = temp_dir("outdir");
  write_json(dir / "a.json", {{"layers", json::array()}, {"output_dir", "out"}});
  write_json(dir / "b.json", {{"layers", json::array()}});
  CHECK(slr::config_output_dir(dir / "a.json") == dir / "out");
  CHECK_FALSE(slr::config_output_dir(dir / "b.json").has_value());
}
