#pragma once

// Patch-transformer encoder, task heads, prompt-fused text decoder and the
// alternative topologies used by the baselines.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mtlgen/catalog.hpp"
#include "mtlgen/schema.hpp"
#include "mtlgen/tensor.hpp"

namespace mtlgen {

class UnsupportedTopology : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Topology { kMtlHier, kSiloedAttr, kSiloedPrice, kDirectCrossAttn, kDirectUnified, kNoMtl };

std::string_view topology_name(Topology t);
Topology parse_topology(std::string_view name);
std::vector<Topology> all_topologies();

enum class Pooling { kMean, kCls };

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t d_enc = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 2;
  Pooling pooling = Pooling::kMean;

  void validate() const;
  std::size_t n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  bool operator==(const EncoderConfig&) const = default;
};

struct DecoderConfig {
  std::size_t d_dec = 48;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_len = 128;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

struct Norm {
  Tensor gain;
  Tensor bias;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5); }
};

struct MultiHeadAttention {
  Linear query, key, value, out;
  std::size_t heads = 1;
  Tensor operator()(const Tensor& x, const Tensor& memory, const AttentionMask& mask) const;
};

struct EncoderBlock {
  Norm norm1;
  MultiHeadAttention attn;
  Norm norm2;
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x, const AttentionMask& mask) const;
};

struct DecoderBlock {
  Norm norm1;
  MultiHeadAttention self_attn;
  Norm norm2;
  MultiHeadAttention cross_attn;
  Norm norm3;
  Linear fc1, fc2;
  Tensor operator()(const Tensor& x, const Tensor& context) const;
};

struct ImageEncoder {
  Linear patch_embed;
  Tensor pos_embed;  // [n_patches (+1 with CLS), d_enc]
  Tensor cls_token;  // [1, d_enc], only with CLS pooling
  std::vector<EncoderBlock> blocks;
  Norm final_norm;
};

struct PriceHead {
  Linear hidden, out;
};

struct TextDecoder {
  Tensor token_embed;  // [vocab, d_dec]
  Tensor pos_embed;    // [max_len, d_dec]
  Norm context_norm;
  std::vector<DecoderBlock> blocks;
  Norm final_norm;
  Tensor lm_bias;  // [vocab]; output projection is tied to token_embed
};

/// Single self-attention stack over [patch tokens; text tokens].
struct UnifiedStack {
  Linear patch_proj;   // d_enc -> d_dec
  Tensor token_embed;  // [vocab, d_dec]
  Tensor pos_embed;    // [max_len, d_dec]
  std::vector<EncoderBlock> blocks;
  Norm final_norm;
  Tensor lm_bias;
};

/// Prices are modelled as z-scores and reported in currency.
struct PriceScaler {
  double mean = 0.0;
  double sd = 1.0;
  double standardize(double price) const { return (price - mean) / sd; }
  double destandardize(double z) const { return z * sd + mean; }
  static PriceScaler fit(std::span<const double> prices);
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelBundle {
  Topology topology = Topology::kMtlHier;
  EncoderConfig encoder_config;
  DecoderConfig decoder_config;
  AttributeSchema schema;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  PriceScaler price_scaler;

  std::optional<ImageEncoder> encoder;
  std::vector<Linear> attribute_heads;
  std::optional<PriceHead> price_head;
  std::optional<Linear> projection;
  std::optional<TextDecoder> decoder;
  std::optional<UnifiedStack> unified;

  bool has_attribute_heads() const { return !attribute_heads.empty(); }
  bool has_price_head() const { return price_head.has_value(); }
  bool generates_text() const { return decoder.has_value() || unified.has_value(); }

  /// Every trainable tensor in declaration order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  std::size_t price_head_parameter_count() const;
  std::size_t attribute_head_parameter_count() const;
  /// Deep copy: the clone shares no parameter storage.
  ModelBundle clone() const;
  /// Overwrites parameter values from `values` (declaration order).
  void load_values(const std::vector<std::vector<double>>& values);
  std::vector<std::vector<double>> snapshot_values() const;
};

ModelBundle build_bundle(Topology topology, const EncoderConfig& encoder_config, const DecoderConfig& decoder_config,
                         const AttributeSchema& schema, std::uint64_t seed);

/// [n_patches, patch_dim], patches in raster order, each flattened HWC.
Tensor patchify(const Image& image, const EncoderConfig& config);

struct EncoderOutput {
  Tensor patch_states;  // [n_patches, d_enc]
  Tensor pooled;        // [1, d_enc]
};

EncoderOutput encode_image(const Image& image, const ModelBundle& bundle);
EncoderOutput encode_patches(const Tensor& patches, const ModelBundle& bundle);

/// One [1, K_c] logit row per schema category.
std::vector<Tensor> attribute_logits(const Tensor& pooled, const ModelBundle& bundle);
/// [1, 1] standardized price.
Tensor price_estimate(const Tensor& pooled, const ModelBundle& bundle);

/// Row 0 is the projected pooled vector, rows 1.. the embedded prompt.
Tensor fuse_context(const Tensor& pooled, std::span<const int> prompt_ids, const ModelBundle& bundle);

/// Logits for every position of `prefix_ids` ([len, vocab]) under teacher forcing.
Tensor decoder_logits(const Tensor& context, std::span<const int> prefix_ids, const ModelBundle& bundle);
/// Next-token logits ([vocab]) after `prefix_ids`.
Tensor decoder_step(const Tensor& context, std::span<const int> prefix_ids, const ModelBundle& bundle);

Tensor unified_logits(const Tensor& patch_states, std::span<const int> prefix_ids, const ModelBundle& bundle);
Tensor decoder_step_unified(const Image& image, std::span<const int> prefix_ids, const ModelBundle& bundle);
Tensor decoder_step_unified(const Tensor& patch_states, std::span<const int> prefix_ids, const ModelBundle& bundle);

/// Per-layer projected keys/values of an already-consumed prefix. Extending
/// it by one token costs one row per layer instead of the whole prefix;
/// copies share storage safely because tensors are never mutated in place.
struct DecodeState {
  bool unified = false;
  std::size_t length = 0;  // text tokens consumed
  std::vector<Tensor> keys, values;                // self-attention, [t, d] per layer
  std::vector<Tensor> memory_keys, memory_values;  // cross-attention (decoder only)
};

DecodeState begin_decode(const Tensor& context, const ModelBundle& bundle);
DecodeState begin_decode_unified(const Tensor& patch_states, const ModelBundle& bundle);
/// Consumes `token` at position state.length; returns next-token logits ([vocab]).
/// Matches decoder_step / decoder_step_unified on the extended prefix.
Tensor decode_next(DecodeState& state, int token, const ModelBundle& bundle);

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace mtlgen
