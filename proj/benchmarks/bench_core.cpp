// Micro benchmarks for the hot paths: GEMM, attention, encoder forward,
// one cached decode step and a full listing generation.

#include <benchmark/benchmark.h>

#include "mtlgen/catalog.hpp"
#include "mtlgen/harness.hpp"
#include "mtlgen/inference.hpp"
#include "mtlgen/model.hpp"
#include "mtlgen/rng.hpp"
#include "mtlgen/tensor.hpp"

using namespace mtlgen;

namespace {

Tensor random(Rng& rng, Shape shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v));
}

// Default-sized models over a small catalog; untrained weights are fine for timing.
struct Setup {
  AttributeSchema schema = default_schema();
  Splits splits;
  Vocab vocab;
  ExperimentConfig config;

  Setup() {
    CatalogConfig c;
    c.n_listings = 100;
    splits = generate_catalog(c, schema);
    vocab = build_vocab(splits.train, schema);
    config.decoder.vocab_size = vocab.size();
  }

  ModelBundle bundle(Topology t) const { return build_bundle(t, config.encoder, config.decoder, schema, 1); }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random(rng, {n, n}), b = random(rng, {n, n});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor q = random(rng, {4, s, 16}), k = random(rng, {4, s, 16}), v = random(rng, {4, s, 16});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(scaled_dot_attention(q, k, v, AttentionMask::causal()));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64)->Arg(128);

void BM_EncodeImage(benchmark::State& state) {
  const auto b = setup().bundle(Topology::kMtlHier);
  const Image& img = setup().splits.test.front().image;
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(encode_image(img, b).pooled);
}
BENCHMARK(BM_EncodeImage)->Unit(benchmark::kMillisecond);

void BM_DecodeNext(benchmark::State& state) {
  const auto b = setup().bundle(Topology::kMtlHier);
  NoGradGuard guard;
  const auto enc = encode_image(setup().splits.test.front().image, b);
  const auto prompt = setup().vocab.encode("garment for everyday wear", false);
  const Tensor context = fuse_context(enc.pooled, prompt, b);
  const auto prefix = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    state.PauseTiming();
    DecodeState st = begin_decode(context, b);
    for (std::size_t i = 0; i < prefix; ++i) decode_next(st, i == 0 ? Vocab::kBos : Vocab::kUnk + 1, b);
    state.ResumeTiming();
    benchmark::DoNotOptimize(decode_next(st, Vocab::kUnk + 1, b));
  }
}
BENCHMARK(BM_DecodeNext)->Arg(1)->Arg(16)->Arg(64);

void BM_Generate(benchmark::State& state) {
  const auto topology = static_cast<Topology>(state.range(0));
  const auto mode = static_cast<GenerationMode>(state.range(1));
  const auto b = setup().bundle(topology);
  const Image& img = setup().splits.test.front().image;
  GenerationOptions opts;
  opts.max_len = 32;
  std::size_t tokens = 0;
  for (auto _ : state) tokens += generate_listing(img, b, setup().vocab, mode, opts).token_count;
  state.counters["tokens"] = benchmark::Counter(static_cast<double>(tokens), benchmark::Counter::kAvgIterations);
}
BENCHMARK(BM_Generate)
    ->Args({static_cast<int>(Topology::kMtlHier), static_cast<int>(GenerationMode::kHierarchical)})
    ->Args({static_cast<int>(Topology::kMtlHier), static_cast<int>(GenerationMode::kNonHierarchical)})
    ->Args({static_cast<int>(Topology::kDirectCrossAttn), static_cast<int>(GenerationMode::kDirect)})
    ->Args({static_cast<int>(Topology::kDirectUnified), static_cast<int>(GenerationMode::kDirect)})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
