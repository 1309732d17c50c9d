#include "mtlgen/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mtlgen/rng.hpp"

namespace mtlgen {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Strict JSON reading

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(where + "." + key + ": expected a nonnegative integer");
  out = v.get<std::size_t>();
}

json weights_json(const LossWeights& w) { return {{"price", w.beta}, {"attributes", w.alpha}, {"text", w.gamma}}; }

LossWeights parse_weights(const json& j, const std::string& where) {
  reject_unknown(j, {"price", "attributes", "text"}, where);
  LossWeights w{0.0, 0.0, 0.0};
  for (const char* k : {"price", "attributes", "text"})
    if (!j.contains(k) || !j.at(k).is_number()) throw ConfigError(where + ": '" + k + "' must be a number");
  w.beta = j.at("price");
  w.alpha = j.at("attributes");
  w.gamma = j.at("text");
  w.validate();
  return w;
}

std::string weights_tag(const LossWeights& w) {
  return "p" + fmt(w.beta, 2) + "_a" + fmt(w.alpha, 2) + "_t" + fmt(w.gamma, 2);
}

std::string weights_label(const LossWeights& w) {
  return "{price " + fmt(w.beta, 1) + ", attributes " + fmt(w.alpha, 1) + ", text " + fmt(w.gamma, 1) + "}";
}

// ---------------------------------------------------------------------------
// Reports

json opt_number(const std::optional<double>& v) { return v ? json(*v) : json("NA"); }

std::optional<double> read_opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_string() || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

bool is_text_preset(const std::string& preset) {
  if (preset == kHybrid) return false;
  const Topology t = parse_topology(preset);
  return default_mode(t).has_value();
}

std::string mode_dir_name(std::optional<GenerationMode> mode) {
  return mode ? "eval_" + std::string(mode_name(*mode)) : std::string("eval_structured");
}

}  // namespace

// ---------------------------------------------------------------------------
// Presets and configuration

std::vector<LossWeights> default_weight_grid() {
  // {attributes, price, text}; the study lists them as {price, attributes, text}.
  return {{0.3, 0.3, 0.4}, {0.4, 0.4, 0.2}, {0.2, 0.6, 0.2}, {0.6, 0.2, 0.2}, {0.1, 0.1, 0.8},
          {0.4, 0.1, 0.5}, {0.5, 0.0, 0.5}, {0.0, 0.5, 0.5}, {0.5, 0.5, 0.0}};
}

std::vector<std::string> all_presets() {
  std::vector<std::string> out;
  for (Topology t : all_topologies()) out.emplace_back(topology_name(t));
  out.emplace_back(kHybrid);
  return out;
}

void ExperimentConfig::validate() const {
  catalog.validate();
  train.validate();
  encoder.validate();
  if (encoder.image_size != catalog.image_height || encoder.image_size != catalog.image_width)
    throw ConfigError("encoder.image_size must match the catalog image size");
  if (topologies.empty()) throw ConfigError("at least one topology is required");
  for (const auto& t : topologies)
    if (t != kHybrid) parse_topology(t);
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (weight_grid.empty()) throw ConfigError("weight_grid must not be empty");
  for (const auto& w : weight_grid) {
    w.validate();
    if (!w.any_positive()) throw ConfigError("weight_grid: all-zero weighting");
  }
  if (generation.beams < 1 || generation.max_len < 1) throw ConfigError("generation: beams and max_len must be positive");
  if (bench_samples < kMinLatencySamples)
    throw ConfigError("bench_samples must be at least " + std::to_string(kMinLatencySamples));
  if (decoder.n_heads == 0 || decoder.d_dec % decoder.n_heads != 0)
    throw ConfigError("decoder: d_dec not divisible by n_heads");
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["catalog"] = {{"n_listings", catalog.n_listings},
                  {"image_height", catalog.image_height},
                  {"image_width", catalog.image_width},
                  {"rng_seed", catalog.rng_seed},
                  {"price_noise_sd", catalog.price_noise_sd},
                  {"unknown_rate", catalog.unknown_rate},
                  {"split_ratios", catalog.split_ratios},
                  {"occasion_noise", catalog.occasion_noise}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"early_stop_patience", train.early_stop_patience},
                {"weights", weights_json(train.weights)}};
  j["encoder"] = {{"image_size", encoder.image_size}, {"patch_size", encoder.patch_size},
                  {"d_enc", encoder.d_enc},           {"n_layers", encoder.n_layers},
                  {"n_heads", encoder.n_heads},       {"mlp_ratio", encoder.mlp_ratio},
                  {"pooling", encoder.pooling == Pooling::kMean ? "mean" : "cls"}};
  j["decoder"] = {{"d_dec", decoder.d_dec},
                  {"n_layers", decoder.n_layers},
                  {"n_heads", decoder.n_heads},
                  {"max_len", decoder.max_len}};
  j["generation"] = {{"beams", generation.beams}, {"max_len", generation.max_len}};
  j["boosting"] = {{"rounds", boosting.rounds},
                   {"depth", boosting.depth},
                   {"shrinkage", boosting.shrinkage},
                   {"min_leaf", boosting.min_leaf}};
  j["topologies"] = topologies;
  j["weight_grid"] = json::array();
  for (const auto& w : weight_grid) j["weight_grid"].push_back(weights_json(w));
  j["seeds"] = seeds;
  j["out_dir"] = out_dir.string();
  j["eval_limit"] = eval_limit;
  j["bench_samples"] = bench_samples;
  j["bench_warmup"] = bench_warmup;
  return j.dump(2);
}

std::string ExperimentConfig::hash() const {
  // The output location does not change what a run computes.
  json j = json::parse(to_json());
  j.erase("out_dir");
  return fnv1a_hex(j.dump());
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"catalog", "train", "encoder", "decoder", "generation", "boosting", "topologies", "weight_grid",
                  "seeds", "out_dir", "eval_limit", "bench_samples", "bench_warmup"},
                 "config");
  ExperimentConfig c;
  if (j.contains("catalog")) {
    const auto& s = j["catalog"];
    reject_unknown(s,
                   {"n_listings", "image_height", "image_width", "rng_seed", "price_noise_sd", "unknown_rate",
                    "split_ratios", "occasion_noise"},
                   "catalog");
    read_size(s, "n_listings", c.catalog.n_listings, "catalog");
    read_size(s, "image_height", c.catalog.image_height, "catalog");
    read_size(s, "image_width", c.catalog.image_width, "catalog");
    read(s, "rng_seed", c.catalog.rng_seed, "catalog");
    read(s, "price_noise_sd", c.catalog.price_noise_sd, "catalog");
    read(s, "unknown_rate", c.catalog.unknown_rate, "catalog");
    read(s, "split_ratios", c.catalog.split_ratios, "catalog");
    read(s, "occasion_noise", c.catalog.occasion_noise, "catalog");
    c.encoder.image_size = c.catalog.image_height;
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    reject_unknown(s, {"epochs", "batch_size", "lr", "early_stop_patience", "weights"}, "train");
    read_size(s, "epochs", c.train.epochs, "train");
    read_size(s, "batch_size", c.train.batch_size, "train");
    read(s, "lr", c.train.lr, "train");
    read_size(s, "early_stop_patience", c.train.early_stop_patience, "train");
    if (s.contains("weights")) c.train.weights = parse_weights(s["weights"], "train.weights");
  }
  if (j.contains("encoder")) {
    const auto& s = j["encoder"];
    reject_unknown(s, {"image_size", "patch_size", "d_enc", "n_layers", "n_heads", "mlp_ratio", "pooling"}, "encoder");
    read_size(s, "image_size", c.encoder.image_size, "encoder");
    read_size(s, "patch_size", c.encoder.patch_size, "encoder");
    read_size(s, "d_enc", c.encoder.d_enc, "encoder");
    read_size(s, "n_layers", c.encoder.n_layers, "encoder");
    read_size(s, "n_heads", c.encoder.n_heads, "encoder");
    read_size(s, "mlp_ratio", c.encoder.mlp_ratio, "encoder");
    if (s.contains("pooling")) {
      std::string p;
      read(s, "pooling", p, "encoder");
      if (p == "mean") c.encoder.pooling = Pooling::kMean;
      else if (p == "cls") c.encoder.pooling = Pooling::kCls;
      else throw ConfigError("encoder.pooling: expected 'mean' or 'cls'");
    }
  }
  if (j.contains("decoder")) {
    const auto& s = j["decoder"];
    reject_unknown(s, {"d_dec", "n_layers", "n_heads", "max_len"}, "decoder");
    read_size(s, "d_dec", c.decoder.d_dec, "decoder");
    read_size(s, "n_layers", c.decoder.n_layers, "decoder");
    read_size(s, "n_heads", c.decoder.n_heads, "decoder");
    read_size(s, "max_len", c.decoder.max_len, "decoder");
  }
  if (j.contains("generation")) {
    const auto& s = j["generation"];
    reject_unknown(s, {"beams", "max_len"}, "generation");
    read_size(s, "beams", c.generation.beams, "generation");
    read_size(s, "max_len", c.generation.max_len, "generation");
  }
  if (j.contains("boosting")) {
    const auto& s = j["boosting"];
    reject_unknown(s, {"rounds", "depth", "shrinkage", "min_leaf"}, "boosting");
    read_size(s, "rounds", c.boosting.rounds, "boosting");
    read_size(s, "depth", c.boosting.depth, "boosting");
    read(s, "shrinkage", c.boosting.shrinkage, "boosting");
    read_size(s, "min_leaf", c.boosting.min_leaf, "boosting");
  }
  read(j, "topologies", c.topologies, "config");
  if (j.contains("weight_grid")) {
    if (!j["weight_grid"].is_array()) throw ConfigError("weight_grid: expected an array");
    c.weight_grid.clear();
    for (const auto& w : j["weight_grid"]) c.weight_grid.push_back(parse_weights(w, "weight_grid"));
  }
  read(j, "seeds", c.seeds, "config");
  if (j.contains("out_dir")) {
    std::string d;
    read(j, "out_dir", d, "config");
    c.out_dir = d;
  }
  read_size(j, "eval_limit", c.eval_limit, "config");
  read_size(j, "bench_samples", c.bench_samples, "config");
  read_size(j, "bench_warmup", c.bench_warmup, "config");
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Data

Vocab build_vocab(const std::vector<Listing>& train, const AttributeSchema& schema) {
  std::vector<std::string> corpus;
  for (const auto& l : train) {
    corpus.push_back(reference_stream(l));
    corpus.push_back(training_prompt(schema, l.attributes));
  }
  corpus.push_back(generic_prompt());
  // Every word the hierarchical prompt can contain.
  corpus.emplace_back("generate a product listing. attributes:");
  for (const auto& cat : schema.categories()) {
    corpus.push_back(to_lower(cat.name));
    for (const auto& cls : cat.classes)
      if (cls != kUnknownLabel) corpus.push_back(to_lower(cls));
  }
  return Vocab::build(corpus);
}

fs::path data_dir(const ExperimentConfig& config) { return config.out_dir / "data"; }

DataBundle make_data(const ExperimentConfig& config) {
  DataBundle d{default_schema(), {}, {}};
  d.splits = generate_catalog(config.catalog, d.schema);
  d.vocab = build_vocab(d.splits.train, d.schema);
  return d;
}

DataBundle load_data(const ExperimentConfig& config) {
  const fs::path dir = data_dir(config);
  if (!fs::exists(dir / "train.jsonl"))
    throw ConfigError("no catalog under '" + dir.string() + "'; run gen-data first");
  DataBundle d{default_schema(), {}, {}};
  d.splits.train = read_catalog(dir / "train.jsonl", d.schema);
  d.splits.val = read_catalog(dir / "val.jsonl", d.schema);
  d.splits.test = read_catalog(dir / "test.jsonl", d.schema);
  d.vocab = Vocab::load(dir / "vocab.txt");
  return d;
}

// ---------------------------------------------------------------------------
// Training

RunSpec preset_spec(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed) {
  RunSpec s{preset, seed, config.train.weights};
  if (preset == kHybrid) {
    s.weights = {1.0, 0.0, 0.0};
    return s;
  }
  switch (parse_topology(preset)) {
    case Topology::kMtlHier: break;
    case Topology::kNoMtl: s.weights.beta = 0.0; break;
    case Topology::kSiloedAttr: s.weights = {1.0, 0.0, 0.0}; break;
    case Topology::kSiloedPrice: s.weights = {0.0, 1.0, 0.0}; break;
    case Topology::kDirectCrossAttn:
    case Topology::kDirectUnified: s.weights = {0.0, 0.0, 1.0}; break;
  }
  return s;
}

std::string run_id(const RunSpec& spec, bool with_weights) {
  std::string id = spec.preset;
  if (with_weights) id += "-" + weights_tag(spec.weights);
  return id + "-s" + std::to_string(spec.seed);
}

TrainedRun train_run(const ExperimentConfig& config, const DataBundle& data, const RunSpec& spec) {
  const Topology topology = spec.preset == kHybrid ? Topology::kSiloedAttr : parse_topology(spec.preset);
  DecoderConfig dc = config.decoder;
  dc.vocab_size = data.vocab.size();
  TrainedRun run{spec, build_bundle(topology, config.encoder, dc, data.schema, spec.seed), std::nullopt, {}};

  TrainConfig tc = config.train;
  tc.seed = spec.seed;
  tc.weights = spec.weights;
  if (topology == Topology::kDirectUnified) {
    // The unified stack is trained with a 12/16 batch and 15/10 epochs.
    tc.batch_size = std::max<std::size_t>(1, tc.batch_size * 3 / 4);
    tc.epochs = tc.epochs * 3 / 2;
  }
  const Vocab* vocab = run.bundle.generates_text() ? &data.vocab : nullptr;
  run.result = train(run.bundle, data.splits.train, data.splits.val, tc, vocab);

  if (spec.preset == kHybrid) {
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& l : data.splits.train) {
      x.push_back(attribute_onehot(data.schema, l.attributes));
      y.push_back(l.price);
    }
    run.trees = fit_tree_price_regressor(x, y, config.boosting);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

PredictionRecord infer_one(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                           const Listing& listing, std::optional<GenerationMode> mode) {
  const auto start = std::chrono::steady_clock::now();
  PredictionRecord rec;
  rec.id = listing.id;
  const ModelBundle& b = run.bundle;
  if (mode) {
    rec.generation = generate_listing(listing.image, b, data.vocab, *mode, config.generation);
    if (rec.generation->predicted_attributes) rec.attributes = rec.generation->predicted_attributes->classes;
    rec.price = rec.generation->predicted_price;
  } else if (run.trees) {
    const auto pred = predict_attributes(listing.image, b);
    rec.attributes = pred.classes;
    rec.price = run.trees->predict(attribute_onehot(b.schema, pred.classes));
  } else {
    NoGradGuard guard;
    const EncoderOutput enc = encode_image(listing.image, b);
    if (b.has_attribute_heads()) rec.attributes = predict_attributes_from_pooled(enc.pooled, b).classes;
    if (b.has_price_head()) rec.price = b.price_scaler.destandardize(price_estimate(enc.pooled, b).item());
  }
  rec.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

namespace {

std::optional<GenerationMode> resolve_mode(const TrainedRun& run, std::optional<GenerationMode> mode) {
  const Topology t = run.bundle.topology;
  if (run.trees || !run.bundle.generates_text()) {
    if (mode)
      throw ConfigError("mode '" + std::string(mode_name(*mode)) + "' is not available for '" + run.spec.preset +
                        "', which does not generate text");
    return std::nullopt;
  }
  if (!mode) return default_mode(t);
  if (!mode_supported(t, *mode))
    throw ConfigError("mode '" + std::string(mode_name(*mode)) + "' is not available for '" + run.spec.preset + "'");
  return mode;
}

std::string listing_text(const GenerationResult& g) {
  if (g.description.empty()) return g.name;
  return g.name + " . " + g.description;
}

}  // namespace

EvalOutput evaluate_run(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                        std::optional<GenerationMode> requested) {
  const auto mode = resolve_mode(run, requested);
  const auto& test = data.splits.test;
  const std::size_t n = config.eval_limit ? std::min(config.eval_limit, test.size()) : test.size();
  if (n == 0) throw ConfigError("evaluation split is empty");

  EvalOutput out;
  for (std::size_t i = 0; i < n; ++i) out.predictions.push_back(infer_one(config, data, run, test[i], mode));

  EvalReport& r = out.report;
  r.run_id = run_id(run.spec, false);
  r.topology = run.spec.preset;
  if (mode) r.mode = std::string(mode_name(*mode));
  r.n_samples = n;
  r.parameter_count = run.bundle.parameter_count();

  std::vector<AttributeLabels> golds;
  for (std::size_t i = 0; i < n; ++i) golds.push_back(test[i].attributes);
  if (out.predictions.front().attributes) {
    std::vector<AttributeLabels> preds;
    for (const auto& p : out.predictions) preds.push_back(*p.attributes);
    r.f1 = macro_f1(preds, golds, data.schema);
    r.chance_f1 = chance_macro_f1(golds, data.schema);
  }
  if (out.predictions.front().price) {
    std::vector<double> pp, gp;
    for (std::size_t i = 0; i < n; ++i) {
      pp.push_back(*out.predictions[i].price);
      gp.push_back(test[i].price);
    }
    r.price = regression_metrics(pp, gp);
  }
  if (mode) {
    std::vector<std::string> cands, refs;
    std::vector<GenerationResult> gens;
    double tokens = 0.0, words = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& g = *out.predictions[i].generation;
      cands.push_back(listing_text(g));
      refs.push_back(reference_stream(test[i]));
      tokens += static_cast<double>(g.token_count);
      words += static_cast<double>(tokenize(g.description).size());
      GenerationResult scored = g;
      scored.description = g.name + " " + g.description;  // contradictions may sit in either field
      gens.push_back(std::move(scored));
    }
    r.bleu4 = bleu4(cands, refs);
    r.rouge = rouge_scores(cands, refs);
    r.mean_generated_tokens = tokens / static_cast<double>(n);
    r.mean_description_words = words / static_cast<double>(n);
    // A knocked-out text task leaves generation degenerate: reported as NA.
    if (run.spec.weights.gamma > 0.0) r.hallucination_rate = hallucination_rate(gens, AttributeLexicon(data.schema));
  }
  return out;
}

std::string EvalReport::to_json() const {
  json j = json::object();
  j["run_id"] = run_id;
  j["topology"] = topology;
  j["mode"] = mode ? json(*mode) : json(nullptr);
  j["n_samples"] = n_samples;
  j["parameter_count"] = parameter_count;
  if (f1) {
    json per = json::object();
    for (std::size_t c = 0; c < f1->categories.size(); ++c) per[f1->categories[c]] = f1->per_category[c];
    j["per_attribute_f1"] = per;
    j["macro_f1_avg"] = f1->average;
    j["chance_macro_f1"] = *chance_f1;
  } else {
    j["per_attribute_f1"] = "NA";
    j["macro_f1_avg"] = "NA";
    j["chance_macro_f1"] = "NA";
  }
  j["price_mae"] = price ? json(price->mae) : json("NA");
  j["price_rmse"] = price ? json(price->rmse) : json("NA");
  j["price_r2"] = price ? opt_number(price->r2) : json("NA");
  j["bleu4"] = opt_number(bleu4);
  j["rouge1"] = rouge ? json(rouge->rouge1) : json("NA");
  j["rouge2"] = rouge ? json(rouge->rouge2) : json("NA");
  j["rougeL"] = rouge ? json(rouge->rougeL) : json("NA");
  j["hallucination_rate"] = opt_number(hallucination_rate);
  j["mean_generated_tokens"] = opt_number(mean_generated_tokens);
  j["mean_description_words"] = opt_number(mean_description_words);
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.run_id = j.at("run_id");
  r.topology = j.at("topology");
  if (!j.at("mode").is_null()) r.mode = j.at("mode").get<std::string>();
  r.n_samples = j.at("n_samples");
  r.parameter_count = j.at("parameter_count");
  if (j.at("per_attribute_f1").is_object()) {
    F1Report f;
    // Category order is restored from the schema rather than the (sorted) object.
    const auto schema = default_schema();
    const json& per = j.at("per_attribute_f1");
    for (const auto& cat : schema.categories()) {
      if (!per.contains(cat.name)) continue;
      f.categories.push_back(cat.name);
      f.per_category.push_back(per.at(cat.name));
    }
    f.average = j.at("macro_f1_avg");
    r.f1 = f;
    r.chance_f1 = read_opt(j, "chance_macro_f1");
  }
  if (j.at("price_mae").is_number())
    r.price = RegressionReport{j.at("price_mae"), j.at("price_rmse"), read_opt(j, "price_r2")};
  r.bleu4 = read_opt(j, "bleu4");
  if (j.at("rouge1").is_number()) r.rouge = RougeScores{j.at("rouge1"), j.at("rouge2"), j.at("rougeL")};
  r.hallucination_rate = read_opt(j, "hallucination_rate");
  r.mean_generated_tokens = read_opt(j, "mean_generated_tokens");
  r.mean_description_words = read_opt(j, "mean_description_words");
  return r;
}

BenchRow bench_run(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                   std::optional<GenerationMode> requested) {
  const auto mode = resolve_mode(run, requested);
  const auto& test = data.splits.test;
  if (test.empty()) throw ConfigError("bench: empty test split");
  for (std::size_t i = 0; i < config.bench_warmup; ++i) infer_one(config, data, run, test[i % test.size()], mode);
  std::vector<double> times;
  double tokens = 0.0;
  for (std::size_t i = 0; i < config.bench_samples; ++i) {
    const auto rec = infer_one(config, data, run, test[(config.bench_warmup + i) % test.size()], mode);
    times.push_back(rec.wall_time_ms);
    if (rec.generation) tokens += static_cast<double>(rec.generation->token_count);
  }
  BenchRow row;
  row.run_id = run_id(run.spec, false);
  row.topology = run.spec.preset;
  if (mode) row.mode = std::string(mode_name(*mode));
  row.parameter_count = run.bundle.parameter_count();
  row.latency = latency_stats(times);
  row.mean_generated_tokens = tokens / static_cast<double>(times.size());
  return row;
}

// ---------------------------------------------------------------------------
// Persistence

fs::path run_dir(const ExperimentConfig& config, const std::string& id) { return config.out_dir / "runs" / id; }

fs::path eval_dir(const ExperimentConfig& config, const std::string& id, std::optional<GenerationMode> mode) {
  return run_dir(config, id) / mode_dir_name(mode);
}

namespace {

json run_record_json(const RunRecord& r) {
  return {{"run_id", r.run_id},
          {"preset", r.preset},
          {"seed", r.seed},
          {"weights", weights_json(r.weights)},
          {"config_hash", r.config_hash},
          {"checkpoint", r.checkpoint},
          {"provenance", r.provenance},
          {"parameter_count", r.parameter_count},
          {"best_epoch", r.best_epoch},
          {"epochs_run", r.epochs_run}};
}

RunRecord make_record(const ExperimentConfig& config, const TrainedRun& run, const std::string& id) {
  RunRecord r;
  r.run_id = id;
  r.preset = run.spec.preset;
  r.seed = run.spec.seed;
  r.weights = run.spec.weights;
  r.config_hash = config.hash();
  r.checkpoint = "checkpoint.bin";
  r.provenance = std::string("mtlgen-") + kVersion + "+cfg." + r.config_hash + ".seed." + std::to_string(r.seed);
  r.parameter_count = run.bundle.parameter_count();
  r.best_epoch = run.result.best_epoch;
  r.epochs_run = run.result.epochs.size();
  return r;
}

json prediction_json(const PredictionRecord& p, const AttributeSchema& schema) {
  json j;
  j["id"] = p.id;
  j["mode"] = p.generation ? json(std::string(mode_name(p.generation->mode))) : json(nullptr);
  j["name"] = p.generation ? json(p.generation->name) : json(nullptr);
  j["description"] = p.generation ? json(p.generation->description) : json(nullptr);
  if (p.attributes) {
    json a = json::object();
    for (std::size_t c = 0; c < schema.size(); ++c) a[schema[c].name] = schema[c].classes[(*p.attributes)[c]];
    j["predicted_attributes"] = a;
  } else {
    j["predicted_attributes"] = nullptr;
  }
  j["predicted_price"] = p.price ? json(*p.price) : json(nullptr);
  j["token_count"] = p.generation ? json(p.generation->token_count) : json(nullptr);
  return j;
}

}  // namespace

void save_run(const ExperimentConfig& config, const TrainedRun& run, const std::string& id) {
  const fs::path dir = run_dir(config, id);
  fs::create_directories(dir);
  save_checkpoint(run.bundle, dir / "checkpoint.bin");
  std::string epochs;
  for (const auto& e : run.result.epochs)
    epochs += json{{"epoch", e.epoch},   {"l_total", e.l_total}, {"l_attr", e.l_attr},
                   {"l_price", e.l_price}, {"l_text", e.l_text},  {"val_l_total", e.val_l_total}}
                  .dump() +
              "\n";
  write_file_atomic(dir / "epochs.jsonl", epochs);
  if (run.trees) write_file_atomic(dir / "trees.json", run.trees->to_json() + "\n");
  write_file_atomic(dir / "run.json", run_record_json(make_record(config, run, id)).dump(2) + "\n");
}

TrainedRun load_run(const ExperimentConfig& config, const std::string& id) {
  const fs::path dir = run_dir(config, id);
  if (!fs::exists(dir / "run.json")) throw ConfigError("no trained run '" + id + "' under " + dir.string());
  const json rec = json::parse(read_text(dir / "run.json"));
  TrainedRun run;
  run.spec.preset = rec.at("preset");
  run.spec.seed = rec.at("seed");
  run.spec.weights = parse_weights(rec.at("weights"), "run.json weights");
  run.bundle = load_checkpoint(dir / rec.at("checkpoint").get<std::string>());
  if (fs::exists(dir / "trees.json")) run.trees = TreeEnsemble::from_json(read_text(dir / "trees.json"));
  run.result.best_epoch = rec.at("best_epoch");
  return run;
}

void save_eval(const ExperimentConfig& config, const EvalOutput& out, std::optional<GenerationMode> mode) {
  const fs::path dir = eval_dir(config, out.report.run_id, mode);
  fs::create_directories(dir);
  const auto schema = default_schema();
  std::string preds, timings;
  std::vector<double> ms;
  for (const auto& p : out.predictions) {
    preds += prediction_json(p, schema).dump() + "\n";
    timings += json{{"id", p.id}, {"wall_time_ms", p.wall_time_ms}}.dump() + "\n";
    ms.push_back(p.wall_time_ms);
  }
  write_file_atomic(dir / "report.json", out.report.to_json());
  write_file_atomic(dir / "predictions.jsonl", preds);
  write_file_atomic(dir / "timings.jsonl", timings);
  if (ms.size() >= kMinLatencySamples) {
    const auto s = latency_stats(ms);
    write_file_atomic(dir / "timing.json",
                      json{{"latency_ms", {{"mean", s.mean}, {"median", s.median}, {"p95", s.p95}}},
                           {"inference_seconds", std::accumulate(ms.begin(), ms.end(), 0.0) / 1000.0}}
                                   .dump(2) + "\n");
  }
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const ExperimentConfig& config, std::ostream& log) {
  const DataBundle d = make_data(config);
  const fs::path dir = data_dir(config);
  fs::create_directories(dir);
  write_catalog(d.splits.train, d.schema, dir / "train.jsonl");
  write_catalog(d.splits.val, d.schema, dir / "val.jsonl");
  write_catalog(d.splits.test, d.schema, dir / "test.jsonl");
  json schema = json::array();
  for (const auto& c : d.schema.categories()) schema.push_back({{"name", c.name}, {"classes", c.classes}});
  write_file_atomic(dir / "schema.json", json{{"hash", d.schema.hash()}, {"categories", schema}}.dump(2) + "\n");
  d.vocab.save(dir / "vocab.txt");
  log << "catalog: train " << d.splits.train.size() << ", val " << d.splits.val.size() << ", test "
      << d.splits.test.size() << " listings; vocabulary " << d.vocab.size() << " tokens -> " << dir.string() << "\n";
}

namespace {

// Returns a stored run when it was produced by the same configuration.
std::optional<TrainedRun> reuse_run(const ExperimentConfig& config, const std::string& id) {
  const fs::path rec = run_dir(config, id) / "run.json";
  if (!fs::exists(rec)) return std::nullopt;
  if (json::parse(read_text(rec)).value("config_hash", "") != config.hash()) return std::nullopt;
  return load_run(config, id);
}

TrainedRun train_or_reuse(const ExperimentConfig& config, const DataBundle& data, const RunSpec& spec,
                          const std::string& id, std::ostream& log) {
  if (auto r = reuse_run(config, id)) {
    log << "reusing " << id << "\n";
    return std::move(*r);
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainedRun run = train_run(config, data, spec);
  save_run(config, run, id);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file_atomic(run_dir(config, id) / "timing.json", json{{"train_seconds", secs}}.dump() + "\n");
  log << "trained " << id << ": " << run.bundle.parameter_count() << " parameters, best epoch "
      << run.result.best_epoch << " of " << run.result.epochs.size() << " (" << fmt(secs, 1) << " s)\n";
  return run;
}

std::vector<std::optional<GenerationMode>> eval_modes(const std::string& preset) {
  if (!is_text_preset(preset)) return {std::nullopt};
  const Topology t = parse_topology(preset);
  if (t == Topology::kMtlHier) return {GenerationMode::kHierarchical, GenerationMode::kNonHierarchical};
  return {default_mode(t)};
}

}  // namespace

RunRecord cmd_train(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed, std::ostream& log) {
  const DataBundle data = load_data(config);
  const RunSpec spec = preset_spec(config, preset, seed);
  const std::string id = run_id(spec, false);
  const auto t0 = std::chrono::steady_clock::now();
  TrainedRun run = train_run(config, data, spec);
  save_run(config, run, id);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file_atomic(run_dir(config, id) / "timing.json", json{{"train_seconds", secs}}.dump() + "\n");
  for (const auto& e : run.result.epochs)
    log << "epoch " << e.epoch << ": l_total " << fmt(e.l_total) << " (attr " << fmt(e.l_attr) << ", price "
        << fmt(e.l_price) << ", text " << fmt(e.l_text) << "), val " << fmt(e.val_l_total) << "\n";
  log << id << ": " << run.bundle.parameter_count() << " parameters ("
      << fmt(static_cast<double>(run.bundle.parameter_count()) / 1e6, 3) << " M), best epoch "
      << run.result.best_epoch << " -> " << run_dir(config, id).string() << "\n";
  return make_record(config, run, id);
}

EvalReport cmd_eval(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed,
                    std::optional<GenerationMode> mode, std::ostream& log) {
  const DataBundle data = load_data(config);
  if (preset != kHybrid) parse_topology(preset);
  const std::string id = run_id(RunSpec{preset, seed, {}}, false);
  const TrainedRun run = load_run(config, id);
  const auto resolved = resolve_mode(run, mode);
  EvalOutput out = evaluate_run(config, data, run, resolved);
  save_eval(config, out, resolved);
  log << out.report.to_json();
  return out.report;
}

// ---------------------------------------------------------------------------
// Tables

namespace {

struct Table {
  std::string name;
  std::string title;
  std::vector<std::string> headers;
  std::vector<std::vector<std::string>> rows;

  std::string markdown() const {
    std::string s = "### " + title + "\n\n|";
    for (const auto& h : headers) s += " " + h + " |";
    s += "\n|";
    for (std::size_t i = 0; i < headers.size(); ++i) s += i == 0 ? " --- |" : " ---: |";
    s += "\n";
    for (const auto& r : rows) {
      s += "|";
      for (const auto& c : r) s += " " + c + " |";
      s += "\n";
    }
    return s + "\n";
  }

  std::string csv() const {
    auto cell = [](const std::string& c) {
      if (c.find_first_of(",\"") == std::string::npos) return c;
      std::string q = "\"";
      for (char ch : c) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      return q + "\"";
    };
    std::string s;
    for (std::size_t i = 0; i < headers.size(); ++i) s += (i ? "," : "") + cell(headers[i]);
    s += "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + cell(r[i]);
      s += "\n";
    }
    return s;
  }
};

void write_table(const fs::path& dir, const Table& t) {
  fs::create_directories(dir);
  write_file_atomic(dir / (t.name + ".md"), t.markdown());
  write_file_atomic(dir / (t.name + ".csv"), t.csv());
}

// mean ± sample sd over seeds; NA when any seed is NA or nothing is present.
std::string agg(const std::vector<std::optional<double>>& values, double scale = 1.0, int digits = 4) {
  if (values.empty()) return "NA";
  std::vector<double> v;
  for (const auto& x : values) {
    if (!x) return "NA";
    v.push_back(*x * scale);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return fmt(mean, digits) + " ± " + fmt(sd, digits);
}

template <typename F>
std::vector<std::optional<double>> collect(const std::vector<EvalReport>& reports, F f) {
  std::vector<std::optional<double>> out;
  for (const auto& r : reports) out.push_back(f(r));
  return out;
}

std::optional<double> r_mae(const EvalReport& r) { return r.price ? std::optional(r.price->mae) : std::nullopt; }
std::optional<double> r_rmse(const EvalReport& r) { return r.price ? std::optional(r.price->rmse) : std::nullopt; }
std::optional<double> r_r2(const EvalReport& r) { return r.price ? r.price->r2 : std::nullopt; }
std::optional<double> r_f1(const EvalReport& r) { return r.f1 ? std::optional(r.f1->average) : std::nullopt; }
std::optional<double> r_bleu(const EvalReport& r) { return r.bleu4; }
std::optional<double> r_r1(const EvalReport& r) { return r.rouge ? std::optional(r.rouge->rouge1) : std::nullopt; }
std::optional<double> r_r2g(const EvalReport& r) { return r.rouge ? std::optional(r.rouge->rouge2) : std::nullopt; }
std::optional<double> r_rl(const EvalReport& r) { return r.rouge ? std::optional(r.rouge->rougeL) : std::nullopt; }
std::optional<double> r_hall(const EvalReport& r) { return r.hallucination_rate; }

std::vector<EvalReport> load_reports(const ExperimentConfig& config, const std::string& preset,
                                     std::optional<GenerationMode> mode) {
  std::vector<EvalReport> out;
  for (auto seed : config.seeds) {
    const fs::path p = eval_dir(config, run_id(RunSpec{preset, seed, {}}, false), mode) / "report.json";
    if (fs::exists(p)) out.push_back(EvalReport::from_json(read_text(p)));
  }
  return out;
}

std::string seeds_cell(const std::vector<EvalReport>& r) { return std::to_string(r.size()); }

std::vector<std::string> ablation_row(const LossWeights& w, const std::vector<EvalReport>& reps) {
  return {fmt(w.beta, 1),
          fmt(w.alpha, 1),
          fmt(w.gamma, 1),
          seeds_cell(reps),
          agg(collect(reps, r_mae), 1.0, 1),
          agg(collect(reps, r_rmse), 1.0, 1),
          agg(collect(reps, r_r2)),
          agg(collect(reps, r_f1)),
          agg(collect(reps, r_bleu)),
          agg(collect(reps, r_r1)),
          agg(collect(reps, r_r2g)),
          agg(collect(reps, r_rl)),
          agg(collect(reps, r_hall), 100.0, 1)};
}

const std::vector<std::string> kAblationHeaders = {"Price w", "Attributes w", "Text w", "Seeds", "Price MAE",
                                                   "Price RMSE", "Price R²", "Attribute F1", "BLEU", "ROUGE-1",
                                                   "ROUGE-2", "ROUGE-L", "Hallucination Rate (%)"};

}  // namespace

void cmd_ablate(const ExperimentConfig& config, std::ostream& log) {
  const DataBundle data = load_data(config);
  json rows = json::array();
  Table table{"table7_ablation", "Loss-weight ablation (hierarchical generation, test split)", kAblationHeaders, {}};
  for (const auto& w : config.weight_grid) {
    std::vector<EvalReport> reps;
    json row{{"weights", weights_json(w)}, {"reports", json::array()}};
    for (auto seed : config.seeds) {
      RunSpec spec{std::string(topology_name(Topology::kMtlHier)), seed, w};
      // The grid point matching the mtl_hier preset is that preset's run.
      const bool is_preset = preset_spec(config, spec.preset, seed).weights == w;
      const std::string id = run_id(spec, !is_preset);
      const fs::path stored = eval_dir(config, id, GenerationMode::kHierarchical) / "report.json";
      if (is_preset && reuse_run(config, id) && fs::exists(stored)) {
        log << "reusing " << id << " evaluation\n";
        reps.push_back(EvalReport::from_json(read_text(stored)));
      } else {
        const TrainedRun run = train_or_reuse(config, data, spec, id, log);
        EvalOutput out = evaluate_run(config, data, run, GenerationMode::kHierarchical);
        out.report.run_id = id;
        save_eval(config, out, GenerationMode::kHierarchical);
        reps.push_back(std::move(out.report));
      }
      row["reports"].push_back(json::parse(reps.back().to_json()));
    }
    table.rows.push_back(ablation_row(w, reps));
    rows.push_back(std::move(row));
    log << "ablation " << weights_label(w) << " done\n";
  }
  const fs::path dir = config.out_dir / "ablation";
  fs::create_directories(dir);
  write_file_atomic(dir / "ablation.json", rows.dump(2) + "\n");
  write_table(dir, table);
  log << table.markdown();
}

std::vector<BenchRow> cmd_bench(const ExperimentConfig& config, const std::vector<std::string>& presets,
                                std::uint64_t seed, std::ostream& log) {
  const DataBundle data = load_data(config);
  std::vector<BenchRow> rows;
  for (const auto& preset : presets) {
    const std::string id = run_id(RunSpec{preset, seed, {}}, false);
    if (!fs::exists(run_dir(config, id) / "run.json")) {
      log << "bench: skipping " << id << " (not trained)\n";
      continue;
    }
    const TrainedRun run = load_run(config, id);
    for (const auto& mode : eval_modes(preset)) {
      rows.push_back(bench_run(config, data, run, mode));
      const auto& r = rows.back();
      log << "bench " << id << (mode ? " " + std::string(mode_name(*mode)) : std::string()) << ": median "
          << fmt(r.latency.median, 2) << " ms\n";
    }
  }
  if (rows.empty()) throw ConfigError("bench: no trained runs found under " + (config.out_dir / "runs").string());

  Table t{"table5_latency", "Parameters and single-sample latency", {"Model", "Mode", "Parameters (M)", "Mean (ms)",
          "Median (ms)", "p95 (ms)", "Mean generated tokens"}, {}};
  json j = json::array();
  for (const auto& r : rows) {
    t.rows.push_back({r.topology, r.mode.value_or("-"), fmt(static_cast<double>(r.parameter_count) / 1e6, 3),
                      fmt(r.latency.mean, 2), fmt(r.latency.median, 2), fmt(r.latency.p95, 2),
                      fmt(r.mean_generated_tokens, 1)});
    j.push_back({{"run_id", r.run_id},
                 {"topology", r.topology},
                 {"mode", r.mode ? json(*r.mode) : json(nullptr)},
                 {"parameter_count", r.parameter_count},
                 {"latency_ms", {{"mean", r.latency.mean}, {"median", r.latency.median}, {"p95", r.latency.p95}}},
                 {"mean_generated_tokens", r.mean_generated_tokens}});
  }
  const fs::path dir = config.out_dir / "bench";
  fs::create_directories(dir);
  write_file_atomic(dir / "bench.json", j.dump(2) + "\n");
  write_table(dir, t);
  log << t.markdown();
  return rows;
}

std::vector<std::string> cmd_report(const ExperimentConfig& config, std::ostream& log) {
  const fs::path dir = config.out_dir / "report";
  std::vector<Table> tables;
  std::vector<std::string> skipped;
  const std::string mtl = std::string(topology_name(Topology::kMtlHier));
  const auto hier = std::optional(GenerationMode::kHierarchical);

  auto price_rows = [&](const std::string& name, const std::string& title, const std::string& other) {
    Table t{name, title, {"Model", "Seeds", "MAE", "RMSE", "R²"}, {}};
    for (const auto& [preset, mode] : {std::pair{mtl, hier}, std::pair{other, std::optional<GenerationMode>{}}}) {
      const auto reps = load_reports(config, preset, mode);
      if (reps.empty()) continue;
      t.rows.push_back({preset, seeds_cell(reps), agg(collect(reps, r_mae), 1.0, 1), agg(collect(reps, r_rmse), 1.0, 1),
                        agg(collect(reps, r_r2))});
    }
    if (t.rows.size() < 2) skipped.push_back(name);
    else tables.push_back(std::move(t));
  };
  price_rows("table2_price", "Price regression: multitask vs siloed", "siloed_price");

  {
    Table t{"table3_attributes", "Attribute macro-F1: multitask vs siloed", {"Model", "Seeds", "Macro F1", "Chance F1"}, {}};
    for (const auto& [preset, mode] : {std::pair{mtl, hier}, std::pair{std::string("siloed_attr"), std::optional<GenerationMode>{}},
                                       std::pair{std::string("no_mtl"), hier}}) {
      const auto reps = load_reports(config, preset, mode);
      if (reps.empty()) continue;
      t.rows.push_back({preset, seeds_cell(reps), agg(collect(reps, r_f1)),
                        agg(collect(reps, [](const EvalReport& r) { return r.chance_f1; }))});
    }
    if (t.rows.size() < 2) skipped.push_back(t.name);
    else tables.push_back(std::move(t));
  }

  price_rows("table4_hybrid", "Price regression: multitask vs attribute-bottleneck hybrid", std::string(kHybrid));

  if (fs::exists(config.out_dir / "bench" / "bench.json")) {
    const json j = json::parse(read_text(config.out_dir / "bench" / "bench.json"));
    Table t{"table5_latency", "Parameters and single-sample latency", {"Model", "Mode", "Parameters (M)", "Mean (ms)",
            "Median (ms)", "p95 (ms)", "Mean generated tokens"}, {}};
    for (const auto& r : j)
      t.rows.push_back({r.at("topology"), r.at("mode").is_null() ? "-" : r.at("mode").get<std::string>(),
                        fmt(r.at("parameter_count").get<double>() / 1e6, 3), fmt(r["latency_ms"]["mean"], 2),
                        fmt(r["latency_ms"]["median"], 2), fmt(r["latency_ms"]["p95"], 2),
                        fmt(r.at("mean_generated_tokens"), 1)});
    tables.push_back(std::move(t));
  } else {
    skipped.push_back("table5_latency");
  }

  {
    Table t{"table6_text", "Text quality and hallucination",
            {"Model", "Mode", "Seeds", "BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "Hallucination Rate (%)",
             "Description words"}, {}};
    const std::vector<std::pair<std::string, GenerationMode>> rows = {
        {mtl, GenerationMode::kHierarchical},
        {mtl, GenerationMode::kNonHierarchical},
        {"no_mtl", GenerationMode::kHierarchical},
        {"direct_cross_attn", GenerationMode::kDirect},
        {"direct_unified", GenerationMode::kDirect}};
    for (const auto& [preset, mode] : rows) {
      const auto reps = load_reports(config, preset, mode);
      if (reps.empty()) continue;
      t.rows.push_back({preset, std::string(mode_name(mode)), seeds_cell(reps), agg(collect(reps, r_bleu)),
                        agg(collect(reps, r_r1)), agg(collect(reps, r_r2g)), agg(collect(reps, r_rl)),
                        agg(collect(reps, r_hall), 100.0, 1),
                        agg(collect(reps, [](const EvalReport& r) { return r.mean_description_words; }), 1.0, 1)});
    }
    if (t.rows.empty()) skipped.push_back(t.name);
    else tables.push_back(std::move(t));
  }

  if (fs::exists(config.out_dir / "ablation" / "ablation.json")) {
    const json j = json::parse(read_text(config.out_dir / "ablation" / "ablation.json"));
    Table t{"table7_ablation", "Loss-weight ablation (hierarchical generation, test split)", kAblationHeaders, {}};
    for (const auto& row : j) {
      std::vector<EvalReport> reps;
      for (const auto& r : row.at("reports")) reps.push_back(EvalReport::from_json(r.dump()));
      t.rows.push_back(ablation_row(parse_weights(row.at("weights"), "ablation.json"), reps));
    }
    tables.push_back(std::move(t));
  } else {
    skipped.push_back("table7_ablation");
  }

  {
    const auto reps = load_reports(config, mtl, hier);
    if (reps.empty() || !reps.front().f1) {
      skipped.push_back("per_attribute_f1");
    } else {
      Table t{"per_attribute_f1", "Per-attribute macro-F1 (multitask model)", {"Attribute", "Macro F1"}, {}};
      std::vector<std::pair<double, std::string>> order;
      const auto& cats = reps.front().f1->categories;
      for (std::size_t c = 0; c < cats.size(); ++c) {
        std::vector<std::optional<double>> v;
        for (const auto& r : reps) v.push_back(r.f1->per_category[c]);
        double m = 0.0;
        for (const auto& x : v) m += *x;
        order.emplace_back(m / static_cast<double>(v.size()), cats[c]);
        t.rows.push_back({cats[c], agg(v)});
      }
      // Descending by mean F1; the row text was built in schema order.
      std::vector<std::size_t> idx(cats.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return order[a].first > order[b].first; });
      std::vector<std::vector<std::string>> sorted;
      for (auto i : idx) sorted.push_back(t.rows[i]);
      double avg = 0.0;
      for (const auto& o : order) avg += o.first;
      sorted.push_back({"Average", fmt(avg / static_cast<double>(order.size()))});
      t.rows = std::move(sorted);
      tables.push_back(std::move(t));
    }
  }

  fs::create_directories(dir);
  std::string all = "# mtlgen report\n\n";
  for (const auto& t : tables) {
    write_table(dir, t);
    all += t.markdown();
  }
  for (const auto& s : skipped) {
    all += "_" + s + " skipped: missing inputs._\n\n";
    log << "report: " << s << " skipped (missing inputs)\n";
  }
  write_file_atomic(dir / "report.md", all);
  log << "report: " << tables.size() << " tables -> " << dir.string() << "\n";
  return skipped;
}

void run_pipeline(const ExperimentConfig& config, std::ostream& log, bool with_ablation) {
  // Stage wall times go to a timing file next to the artifacts.
  json stages = json::object();
  auto t0 = std::chrono::steady_clock::now();
  const auto lap = [&](const char* name) {
    const auto now = std::chrono::steady_clock::now();
    stages[name] = std::chrono::duration<double>(now - t0).count();
    t0 = now;
  };
  cmd_gen_data(config, log);
  const DataBundle data = load_data(config);
  lap("gen_data");
  for (const auto& preset : config.topologies) {
    for (auto seed : config.seeds) {
      const RunSpec spec = preset_spec(config, preset, seed);
      const std::string id = run_id(spec, false);
      const TrainedRun run = train_or_reuse(config, data, spec, id, log);
      for (const auto& mode : eval_modes(preset)) save_eval(config, evaluate_run(config, data, run, mode), mode);
    }
  }
  lap("presets");
  if (with_ablation) {
    cmd_ablate(config, log);
    lap("ablation");
  }
  cmd_bench(config, config.topologies, config.seeds.front(), log);
  lap("bench");
  cmd_report(config, log);
  lap("report");
  write_file_atomic(config.out_dir / "pipeline_timing.json", stages.dump(2) + "\n");
}

}  // namespace mtlgen
