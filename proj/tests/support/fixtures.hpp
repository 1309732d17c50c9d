#pragma once

// Small catalogs and narrow model configs so model-level tests run in
// seconds.

#include <vector>

#include "mtlgen/catalog.hpp"
#include "mtlgen/harness.hpp"
#include "mtlgen/model.hpp"
#include "mtlgen/vocab.hpp"

namespace fixtures {

inline mtlgen::EncoderConfig tiny_encoder() {
  mtlgen::EncoderConfig e;
  e.d_enc = 16;
  e.n_layers = 1;
  e.n_heads = 2;
  return e;
}

inline mtlgen::DecoderConfig tiny_decoder(std::size_t vocab_size) {
  mtlgen::DecoderConfig d;
  d.d_dec = 12;
  d.n_layers = 1;
  d.n_heads = 2;
  d.vocab_size = vocab_size;
  d.max_len = 64;
  return d;
}

struct World {
  mtlgen::AttributeSchema schema = mtlgen::default_schema();
  mtlgen::Splits splits;
  mtlgen::Vocab vocab;

  explicit World(std::size_t n = 60, std::uint64_t seed = 7) {
    mtlgen::CatalogConfig c;
    c.n_listings = n;
    c.rng_seed = seed;
    splits = mtlgen::generate_catalog(c, schema);
    vocab = mtlgen::build_vocab(splits.train, schema);
  }

  mtlgen::ModelBundle bundle(mtlgen::Topology t, std::uint64_t seed = 1) const {
    return mtlgen::build_bundle(t, tiny_encoder(), tiny_decoder(vocab.size()), schema, seed);
  }
};

/// Harness config sized for seconds-long end-to-end runs.
inline mtlgen::ExperimentConfig tiny_experiment(const std::filesystem::path& out) {
  mtlgen::ExperimentConfig c;
  c.catalog.n_listings = 40;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.encoder = tiny_encoder();
  c.decoder = tiny_decoder(0);
  c.generation.beams = 2;
  c.generation.max_len = 12;
  c.boosting.rounds = 5;
  c.seeds = {1};
  c.bench_samples = 5;
  c.bench_warmup = 1;
  c.out_dir = out;
  return c;
}

}  // namespace fixtures
