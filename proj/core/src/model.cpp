#include "mtlgen/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mtlgen/rng.hpp"
#include "mtlgen/vocab.hpp"

namespace mtlgen {

using nlohmann::json;

std::string_view topology_name(Topology t) {
  switch (t) {
    case Topology::kMtlHier: return "mtl_hier";
    case Topology::kSiloedAttr: return "siloed_attr";
    case Topology::kSiloedPrice: return "siloed_price";
    case Topology::kDirectCrossAttn: return "direct_cross_attn";
    case Topology::kDirectUnified: return "direct_unified";
    case Topology::kNoMtl: return "no_mtl";
  }
  return "?";
}

std::vector<Topology> all_topologies() {
  return {Topology::kMtlHier,         Topology::kSiloedAttr,     Topology::kSiloedPrice,
          Topology::kDirectCrossAttn, Topology::kDirectUnified, Topology::kNoMtl};
}

Topology parse_topology(std::string_view name) {
  for (auto t : all_topologies())
    if (topology_name(t) == name) return t;
  throw ConfigError("unknown topology '" + std::string(name) + "'");
}

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0)
    throw ConfigError("encoder: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  if (n_heads == 0 || d_enc % n_heads != 0) throw ConfigError("encoder: d_enc not divisible by n_heads");
  if (n_layers == 0 || mlp_ratio == 0) throw ConfigError("encoder: n_layers and mlp_ratio must be positive");
}

void DecoderConfig::validate() const {
  if (n_heads == 0 || d_dec % n_heads != 0) throw ConfigError("decoder: d_dec not divisible by n_heads");
  if (max_len < 1) throw ConfigError("decoder: max_len must be at least 1");
  if (n_layers == 0) throw ConfigError("decoder: n_layers must be positive");
  if (vocab_size <= Vocab::kReserved) throw ConfigError("decoder: vocab_size must exceed the reserved ids");
}

PriceScaler PriceScaler::fit(std::span<const double> prices) {
  if (prices.empty()) return {};
  const double n = static_cast<double>(prices.size());
  const double mean = std::accumulate(prices.begin(), prices.end(), 0.0) / n;
  double var = 0.0;
  for (double p : prices) var += (p - mean) * (p - mean);
  var /= n;
  return {mean, var > 0.0 ? std::sqrt(var) : 1.0};
}

// ---------------------------------------------------------------------------
// Construction

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Linear linear(std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng_.uniform(-bound, bound);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
  }
  Norm norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }
  Tensor gaussian(Shape shape, double sd) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng_.normal(0.0, sd);
    return Tensor::from(std::move(shape), std::move(v), true);
  }
  MultiHeadAttention attention(std::size_t d, std::size_t heads) {
    MultiHeadAttention a;
    a.query = linear(d, d);
    a.key = linear(d, d);
    a.value = linear(d, d);
    a.out = linear(d, d);
    a.heads = heads;
    return a;
  }
  EncoderBlock encoder_block(std::size_t d, std::size_t heads, std::size_t ratio) {
    EncoderBlock b;
    b.norm1 = norm(d);
    b.attn = attention(d, heads);
    b.norm2 = norm(d);
    b.fc1 = linear(d, d * ratio);
    b.fc2 = linear(d * ratio, d);
    return b;
  }
  DecoderBlock decoder_block(std::size_t d, std::size_t heads) {
    DecoderBlock b;
    b.norm1 = norm(d);
    b.self_attn = attention(d, heads);
    b.norm2 = norm(d);
    b.cross_attn = attention(d, heads);
    b.norm3 = norm(d);
    b.fc1 = linear(d, d * 2);
    b.fc2 = linear(d * 2, d);
    return b;
  }

 private:
  Rng rng_;
};

constexpr double kEmbedSd = 0.02;
constexpr std::size_t kPriceHidden = 32;

template <typename Fn>
void visit_linear(const std::string& prefix, const Linear& l, Fn& fn) {
  fn(prefix + ".weight", l.weight);
  fn(prefix + ".bias", l.bias);
}
template <typename Fn>
void visit_norm(const std::string& prefix, const Norm& n, Fn& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".bias", n.bias);
}
template <typename Fn>
void visit_attention(const std::string& prefix, const MultiHeadAttention& a, Fn& fn) {
  visit_linear(prefix + ".query", a.query, fn);
  visit_linear(prefix + ".key", a.key, fn);
  visit_linear(prefix + ".value", a.value, fn);
  visit_linear(prefix + ".out", a.out, fn);
}
template <typename Fn>
void visit_encoder_block(const std::string& prefix, const EncoderBlock& b, Fn& fn) {
  visit_norm(prefix + ".norm1", b.norm1, fn);
  visit_attention(prefix + ".attn", b.attn, fn);
  visit_norm(prefix + ".norm2", b.norm2, fn);
  visit_linear(prefix + ".fc1", b.fc1, fn);
  visit_linear(prefix + ".fc2", b.fc2, fn);
}

template <typename Fn>
void visit_parameters(const ModelBundle& m, Fn&& fn) {
  if (m.encoder) {
    const auto& e = *m.encoder;
    visit_linear("encoder.patch_embed", e.patch_embed, fn);
    fn("encoder.pos_embed", e.pos_embed);
    if (e.cls_token) fn("encoder.cls_token", e.cls_token);
    for (std::size_t i = 0; i < e.blocks.size(); ++i)
      visit_encoder_block("encoder.blocks." + std::to_string(i), e.blocks[i], fn);
    visit_norm("encoder.final_norm", e.final_norm, fn);
  }
  for (std::size_t i = 0; i < m.attribute_heads.size(); ++i)
    visit_linear("attribute_heads." + std::to_string(i), m.attribute_heads[i], fn);
  if (m.price_head) {
    visit_linear("price_head.hidden", m.price_head->hidden, fn);
    visit_linear("price_head.out", m.price_head->out, fn);
  }
  if (m.projection) visit_linear("projection", *m.projection, fn);
  if (m.decoder) {
    const auto& d = *m.decoder;
    fn("decoder.token_embed", d.token_embed);
    fn("decoder.pos_embed", d.pos_embed);
    visit_norm("decoder.context_norm", d.context_norm, fn);
    for (std::size_t i = 0; i < d.blocks.size(); ++i) {
      const std::string p = "decoder.blocks." + std::to_string(i);
      const auto& b = d.blocks[i];
      visit_norm(p + ".norm1", b.norm1, fn);
      visit_attention(p + ".self_attn", b.self_attn, fn);
      visit_norm(p + ".norm2", b.norm2, fn);
      visit_attention(p + ".cross_attn", b.cross_attn, fn);
      visit_norm(p + ".norm3", b.norm3, fn);
      visit_linear(p + ".fc1", b.fc1, fn);
      visit_linear(p + ".fc2", b.fc2, fn);
    }
    visit_norm("decoder.final_norm", d.final_norm, fn);
    fn("decoder.lm_bias", d.lm_bias);
  }
  if (m.unified) {
    const auto& u = *m.unified;
    visit_linear("unified.patch_proj", u.patch_proj, fn);
    fn("unified.token_embed", u.token_embed);
    fn("unified.pos_embed", u.pos_embed);
    for (std::size_t i = 0; i < u.blocks.size(); ++i)
      visit_encoder_block("unified.blocks." + std::to_string(i), u.blocks[i], fn);
    visit_norm("unified.final_norm", u.final_norm, fn);
    fn("unified.lm_bias", u.lm_bias);
  }
}

Tensor copy_tensor(const Tensor& t) {
  if (!t) return t;
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
}
Linear copy_linear(const Linear& l) { return {copy_tensor(l.weight), copy_tensor(l.bias)}; }
Norm copy_norm(const Norm& n) { return {copy_tensor(n.gain), copy_tensor(n.bias)}; }
MultiHeadAttention copy_attention(const MultiHeadAttention& a) {
  return {copy_linear(a.query), copy_linear(a.key), copy_linear(a.value), copy_linear(a.out), a.heads};
}
EncoderBlock copy_block(const EncoderBlock& b) {
  return {copy_norm(b.norm1), copy_attention(b.attn), copy_norm(b.norm2), copy_linear(b.fc1), copy_linear(b.fc2)};
}

Tensor positions(const Tensor& table, std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return gather_rows(table, ids);
}

}  // namespace

std::vector<NamedTensor> ModelBundle::named_parameters() const {
  std::vector<NamedTensor> out;
  visit_parameters(*this, [&out](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::vector<Tensor> ModelBundle::parameters() const {
  std::vector<Tensor> out;
  visit_parameters(*this, [&out](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

std::size_t ModelBundle::parameter_count() const {
  std::size_t n = 0;
  visit_parameters(*this, [&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::size_t ModelBundle::price_head_parameter_count() const {
  if (!price_head) return 0;
  const auto& h = *price_head;
  return h.hidden.weight.size() + h.hidden.bias.size() + h.out.weight.size() + h.out.bias.size();
}

std::size_t ModelBundle::attribute_head_parameter_count() const {
  std::size_t n = 0;
  for (const auto& h : attribute_heads) n += h.weight.size() + h.bias.size();
  return n;
}

ModelBundle ModelBundle::clone() const {
  ModelBundle c;
  c.topology = topology;
  c.encoder_config = encoder_config;
  c.decoder_config = decoder_config;
  c.schema = schema;
  c.seed = seed;
  c.step = step;
  c.price_scaler = price_scaler;
  if (encoder) {
    ImageEncoder e;
    e.patch_embed = copy_linear(encoder->patch_embed);
    e.pos_embed = copy_tensor(encoder->pos_embed);
    e.cls_token = copy_tensor(encoder->cls_token);
    for (const auto& b : encoder->blocks) e.blocks.push_back(copy_block(b));
    e.final_norm = copy_norm(encoder->final_norm);
    c.encoder = std::move(e);
  }
  for (const auto& h : attribute_heads) c.attribute_heads.push_back(copy_linear(h));
  if (price_head) c.price_head = PriceHead{copy_linear(price_head->hidden), copy_linear(price_head->out)};
  if (projection) c.projection = copy_linear(*projection);
  if (decoder) {
    TextDecoder d;
    d.token_embed = copy_tensor(decoder->token_embed);
    d.pos_embed = copy_tensor(decoder->pos_embed);
    d.context_norm = copy_norm(decoder->context_norm);
    for (const auto& b : decoder->blocks) {
      d.blocks.push_back({copy_norm(b.norm1), copy_attention(b.self_attn), copy_norm(b.norm2),
                          copy_attention(b.cross_attn), copy_norm(b.norm3), copy_linear(b.fc1), copy_linear(b.fc2)});
    }
    d.final_norm = copy_norm(decoder->final_norm);
    d.lm_bias = copy_tensor(decoder->lm_bias);
    c.decoder = std::move(d);
  }
  if (unified) {
    UnifiedStack u;
    u.patch_proj = copy_linear(unified->patch_proj);
    u.token_embed = copy_tensor(unified->token_embed);
    u.pos_embed = copy_tensor(unified->pos_embed);
    for (const auto& b : unified->blocks) u.blocks.push_back(copy_block(b));
    u.final_norm = copy_norm(unified->final_norm);
    u.lm_bias = copy_tensor(unified->lm_bias);
    c.unified = std::move(u);
  }
  return c;
}

std::vector<std::vector<double>> ModelBundle::snapshot_values() const {
  std::vector<std::vector<double>> out;
  for (const auto& t : parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void ModelBundle::load_values(const std::vector<std::vector<double>>& values) {
  auto params = parameters();
  if (values.size() != params.size())
    throw DimensionError("load_values: expected " + std::to_string(params.size()) + " tensors, got " +
                         std::to_string(values.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].size() != params[i].size())
      throw DimensionError("load_values: size mismatch for parameter " + std::to_string(i));
    std::copy(values[i].begin(), values[i].end(), params[i].mutable_data().begin());
  }
}

ModelBundle build_bundle(Topology topology, const EncoderConfig& ec, const DecoderConfig& dc,
                         const AttributeSchema& schema, std::uint64_t seed) {
  ec.validate();
  const bool text = topology == Topology::kMtlHier || topology == Topology::kNoMtl ||
                    topology == Topology::kDirectCrossAttn || topology == Topology::kDirectUnified;
  if (text) dc.validate();

  ModelBundle m;
  m.topology = topology;
  m.encoder_config = ec;
  m.decoder_config = dc;
  m.schema = schema;
  m.seed = seed;

  Initializer init(seed);
  {
    ImageEncoder e;
    e.patch_embed = init.linear(ec.patch_dim(), ec.d_enc);
    const std::size_t tokens = ec.n_patches() + (ec.pooling == Pooling::kCls ? 1 : 0);
    e.pos_embed = init.gaussian({tokens, ec.d_enc}, kEmbedSd);
    if (ec.pooling == Pooling::kCls) e.cls_token = init.gaussian({1, ec.d_enc}, kEmbedSd);
    for (std::size_t i = 0; i < ec.n_layers; ++i) e.blocks.push_back(init.encoder_block(ec.d_enc, ec.n_heads, ec.mlp_ratio));
    e.final_norm = init.norm(ec.d_enc);
    m.encoder = std::move(e);
  }
  const bool attr_heads = topology == Topology::kMtlHier || topology == Topology::kNoMtl ||
                          topology == Topology::kSiloedAttr;
  const bool price = topology == Topology::kMtlHier || topology == Topology::kSiloedPrice;
  if (attr_heads)
    for (const auto& cat : schema.categories()) m.attribute_heads.push_back(init.linear(ec.d_enc, cat.size()));
  if (price) m.price_head = PriceHead{init.linear(ec.d_enc, kPriceHidden), init.linear(kPriceHidden, 1)};

  if (topology == Topology::kMtlHier || topology == Topology::kNoMtl || topology == Topology::kDirectCrossAttn) {
    m.projection = init.linear(ec.d_enc, dc.d_dec);
    TextDecoder d;
    d.token_embed = init.gaussian({dc.vocab_size, dc.d_dec}, kEmbedSd);
    d.pos_embed = init.gaussian({dc.max_len, dc.d_dec}, kEmbedSd);
    d.context_norm = init.norm(dc.d_dec);
    for (std::size_t i = 0; i < dc.n_layers; ++i) d.blocks.push_back(init.decoder_block(dc.d_dec, dc.n_heads));
    d.final_norm = init.norm(dc.d_dec);
    d.lm_bias = Tensor::zeros({dc.vocab_size}, true);
    m.decoder = std::move(d);
  }
  if (topology == Topology::kDirectUnified) {
    UnifiedStack u;
    u.patch_proj = init.linear(ec.d_enc, dc.d_dec);
    u.token_embed = init.gaussian({dc.vocab_size, dc.d_dec}, kEmbedSd);
    u.pos_embed = init.gaussian({dc.max_len, dc.d_dec}, kEmbedSd);
    for (std::size_t i = 0; i < dc.n_layers; ++i) u.blocks.push_back(init.encoder_block(dc.d_dec, dc.n_heads, 2));
    u.final_norm = init.norm(dc.d_dec);
    u.lm_bias = Tensor::zeros({dc.vocab_size}, true);
    m.unified = std::move(u);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes

Tensor MultiHeadAttention::operator()(const Tensor& x, const Tensor& memory, const AttentionMask& mask) const {
  Tensor q = split_heads(query(x), heads);
  Tensor k = split_heads(key(memory), heads);
  Tensor v = split_heads(value(memory), heads);
  return out(merge_heads(scaled_dot_attention(q, k, v, mask)));
}

Tensor EncoderBlock::operator()(const Tensor& x, const AttentionMask& mask) const {
  Tensor h = norm1(x);
  Tensor y = add(x, attn(h, h, mask));
  return add(y, fc2(gelu(fc1(norm2(y)))));
}

Tensor DecoderBlock::operator()(const Tensor& x, const Tensor& context) const {
  Tensor h = norm1(x);
  Tensor y = add(x, self_attn(h, h, AttentionMask::causal()));
  y = add(y, cross_attn(norm2(y), context, AttentionMask::none()));
  return add(y, fc2(gelu(fc1(norm3(y)))));
}

Tensor patchify(const Image& image, const EncoderConfig& config) {
  if (image.height != config.image_size || image.width != config.image_size)
    throw DimensionError("patchify: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", encoder expects " + std::to_string(config.image_size) + "x" +
                         std::to_string(config.image_size));
  const std::size_t p = config.patch_size;
  const std::size_t per_row = config.image_size / p;
  const std::size_t dim = config.patch_dim();
  std::vector<double> out(config.n_patches() * dim);
  for (std::size_t pr = 0; pr < per_row; ++pr)
    for (std::size_t pc = 0; pc < per_row; ++pc) {
      double* dst = out.data() + (pr * per_row + pc) * dim;
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = image.at(pr * p + r, pc * p + c, ch);
    }
  return Tensor::from({config.n_patches(), dim}, std::move(out));
}

EncoderOutput encode_image(const Image& image, const ModelBundle& bundle) {
  return encode_patches(patchify(image, bundle.encoder_config), bundle);
}

EncoderOutput encode_patches(const Tensor& patches, const ModelBundle& bundle) {
  if (!bundle.encoder) throw UnsupportedTopology("bundle has no image encoder");
  const auto& cfg = bundle.encoder_config;
  const auto& e = *bundle.encoder;
  if (patches.rank() != 2 || patches.dim(0) != cfg.n_patches() || patches.dim(1) != cfg.patch_dim())
    throw DimensionError("encode_patches: expected [" + std::to_string(cfg.n_patches()) + "," +
                         std::to_string(cfg.patch_dim()) + "], got " + shape_str(patches.shape()));
  Tensor x = e.patch_embed(patches);
  const bool cls = cfg.pooling == Pooling::kCls;
  if (cls) x = concat_rows({e.cls_token, x});
  x = add(x, e.pos_embed);
  for (const auto& b : e.blocks) x = b(x, AttentionMask::none());
  x = e.final_norm(x);
  if (cls) return {slice_rows(x, 1, x.dim(0)), slice_rows(x, 0, 1)};
  return {x, mean_rows(x)};
}

std::vector<Tensor> attribute_logits(const Tensor& pooled, const ModelBundle& bundle) {
  if (!bundle.has_attribute_heads())
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no attribute heads");
  std::vector<Tensor> out;
  out.reserve(bundle.attribute_heads.size());
  for (const auto& h : bundle.attribute_heads) out.push_back(h(pooled));
  return out;
}

Tensor price_estimate(const Tensor& pooled, const ModelBundle& bundle) {
  if (!bundle.has_price_head())
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no price head");
  return bundle.price_head->out(gelu(bundle.price_head->hidden(pooled)));
}

Tensor fuse_context(const Tensor& pooled, std::span<const int> prompt_ids, const ModelBundle& bundle) {
  if (!bundle.projection || !bundle.decoder)
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no prompt-fused decoder");
  if (prompt_ids.size() > kMaxPromptTokens)
    throw DimensionError("fuse_context: prompt of " + std::to_string(prompt_ids.size()) + " tokens exceeds " +
                         std::to_string(kMaxPromptTokens));
  Tensor visual = (*bundle.projection)(pooled);
  if (prompt_ids.empty()) return visual;
  return concat_rows({visual, gather_rows(bundle.decoder->token_embed, prompt_ids)});
}

namespace {

Tensor decoder_hidden(const Tensor& context, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  if (!bundle.decoder) throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no decoder");
  const auto& d = *bundle.decoder;
  Tensor ctx = d.context_norm(context);
  if (prefix_ids.empty()) throw DimensionError("decoder: empty prefix");
  if (prefix_ids.size() > bundle.decoder_config.max_len)
    throw DimensionError("decoder: prefix of " + std::to_string(prefix_ids.size()) + " exceeds max_len " +
                         std::to_string(bundle.decoder_config.max_len));
  Tensor x = add(gather_rows(d.token_embed, prefix_ids), positions(d.pos_embed, prefix_ids.size()));
  for (const auto& b : d.blocks) x = b(x, ctx);
  return x;
}

Tensor unified_hidden(const Tensor& patch_states, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  if (!bundle.unified)
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no unified stack");
  const auto& u = *bundle.unified;
  if (prefix_ids.empty()) throw DimensionError("unified decoder: empty prefix");
  if (prefix_ids.size() > bundle.decoder_config.max_len)
    throw DimensionError("unified decoder: prefix exceeds max_len");
  const std::size_t n_patches = patch_states.dim(0);
  Tensor img = u.patch_proj(patch_states);
  Tensor txt = add(gather_rows(u.token_embed, prefix_ids), positions(u.pos_embed, prefix_ids.size()));
  Tensor x = concat_rows({img, txt});
  const auto mask = AttentionMask::prefix_lm(n_patches);
  for (const auto& b : u.blocks) x = b(x, mask);
  return slice_rows(x, n_patches, x.dim(0));
}

Tensor tied_logits(const Tensor& x, const Tensor& embed, const Tensor& bias) {
  return add_row(matmul(x, transpose(embed)), bias);
}

Tensor last_row(const Tensor& x) { return slice_rows(x, x.dim(0) - 1, x.dim(0)); }

}  // namespace

Tensor decoder_logits(const Tensor& context, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  Tensor x = decoder_hidden(context, prefix_ids, bundle);
  const auto& d = *bundle.decoder;
  return tied_logits(d.final_norm(x), d.token_embed, d.lm_bias);
}

// Only the last position is projected onto the vocabulary.
Tensor decoder_step(const Tensor& context, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  Tensor x = last_row(decoder_hidden(context, prefix_ids, bundle));
  const auto& d = *bundle.decoder;
  Tensor logits = tied_logits(d.final_norm(x), d.token_embed, d.lm_bias);
  return reshape(logits, {logits.size()});
}

Tensor unified_logits(const Tensor& patch_states, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  Tensor x = unified_hidden(patch_states, prefix_ids, bundle);
  const auto& u = *bundle.unified;
  return tied_logits(u.final_norm(x), u.token_embed, u.lm_bias);
}

Tensor decoder_step_unified(const Tensor& patch_states, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  Tensor x = last_row(unified_hidden(patch_states, prefix_ids, bundle));
  const auto& u = *bundle.unified;
  Tensor logits = tied_logits(u.final_norm(x), u.token_embed, u.lm_bias);
  return reshape(logits, {logits.size()});
}

Tensor decoder_step_unified(const Image& image, std::span<const int> prefix_ids, const ModelBundle& bundle) {
  if (bundle.topology != Topology::kDirectUnified)
    throw UnsupportedTopology("decoder_step_unified requires the direct_unified topology");
  return decoder_step_unified(encode_image(image, bundle).patch_states, prefix_ids, bundle);
}

namespace {

Tensor attend_cached(const MultiHeadAttention& a, const Tensor& query_row, const Tensor& keys, const Tensor& values) {
  Tensor q = split_heads(a.query(query_row), a.heads);
  return a.out(merge_heads(
      scaled_dot_attention(q, split_heads(keys, a.heads), split_heads(values, a.heads), AttentionMask::none())));
}

Tensor append_row(const Tensor& cache, const Tensor& row) { return cache ? concat_rows({cache, row}) : row; }

}  // namespace

DecodeState begin_decode(const Tensor& context, const ModelBundle& bundle) {
  if (!bundle.decoder) throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no decoder");
  const auto& d = *bundle.decoder;
  DecodeState st;
  Tensor ctx = d.context_norm(context);
  for (const auto& b : d.blocks) {
    st.memory_keys.push_back(b.cross_attn.key(ctx));
    st.memory_values.push_back(b.cross_attn.value(ctx));
  }
  st.keys.resize(d.blocks.size());
  st.values.resize(d.blocks.size());
  return st;
}

DecodeState begin_decode_unified(const Tensor& patch_states, const ModelBundle& bundle) {
  if (!bundle.unified)
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no unified stack");
  const auto& u = *bundle.unified;
  DecodeState st;
  st.unified = true;
  // Patch positions only ever attend among themselves, so their keys and
  // values do not depend on the text that follows.
  Tensor x = u.patch_proj(patch_states);
  for (const auto& b : u.blocks) {
    Tensor h = b.norm1(x);
    st.keys.push_back(b.attn.key(h));
    st.values.push_back(b.attn.value(h));
    x = b(x, AttentionMask::none());
  }
  return st;
}

Tensor decode_next(DecodeState& st, int token, const ModelBundle& bundle) {
  if (st.length >= bundle.decoder_config.max_len)
    throw DimensionError("decode_next: prefix would exceed max_len " + std::to_string(bundle.decoder_config.max_len));
  const int ids[1] = {token};
  const int pos[1] = {static_cast<int>(st.length)};
  if (st.unified) {
    if (!bundle.unified) throw UnsupportedTopology("decode_next: state belongs to a unified stack");
    const auto& u = *bundle.unified;
    Tensor x = add(gather_rows(u.token_embed, ids), gather_rows(u.pos_embed, pos));
    for (std::size_t l = 0; l < u.blocks.size(); ++l) {
      const auto& b = u.blocks[l];
      Tensor h = b.norm1(x);
      st.keys[l] = append_row(st.keys[l], b.attn.key(h));
      st.values[l] = append_row(st.values[l], b.attn.value(h));
      Tensor y = add(x, attend_cached(b.attn, h, st.keys[l], st.values[l]));
      x = add(y, b.fc2(gelu(b.fc1(b.norm2(y)))));
    }
    ++st.length;
    Tensor logits = tied_logits(u.final_norm(x), u.token_embed, u.lm_bias);
    return reshape(logits, {logits.size()});
  }
  if (!bundle.decoder) throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no decoder");
  const auto& d = *bundle.decoder;
  Tensor x = add(gather_rows(d.token_embed, ids), gather_rows(d.pos_embed, pos));
  for (std::size_t l = 0; l < d.blocks.size(); ++l) {
    const auto& b = d.blocks[l];
    Tensor h = b.norm1(x);
    st.keys[l] = append_row(st.keys[l], b.self_attn.key(h));
    st.values[l] = append_row(st.values[l], b.self_attn.value(h));
    Tensor y = add(x, attend_cached(b.self_attn, h, st.keys[l], st.values[l]));
    y = add(y, attend_cached(b.cross_attn, b.norm2(y), st.memory_keys[l], st.memory_values[l]));
    x = add(y, b.fc2(gelu(b.fc1(b.norm3(y)))));
  }
  ++st.length;
  Tensor logits = tied_logits(d.final_norm(x), d.token_embed, d.lm_bias);
  return reshape(logits, {logits.size()});
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json encoder_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"d_enc", c.d_enc},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"mlp_ratio", c.mlp_ratio},
          {"pooling", c.pooling == Pooling::kCls ? "cls" : "mean"}};
}

json decoder_json(const DecoderConfig& c) {
  return {{"d_dec", c.d_dec}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len}};
}

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  json params = json::array();
  const auto named = bundle.named_parameters();
  for (const auto& p : named) params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  json schema = json::array();
  for (const auto& c : bundle.schema.categories()) schema.push_back({{"name", c.name}, {"classes", c.classes}});
  json header = {{"format", "mtlgen-checkpoint"},
                 {"version", 1},
                 {"topology", topology_name(bundle.topology)},
                 {"encoder", encoder_json(bundle.encoder_config)},
                 {"decoder", decoder_json(bundle.decoder_config)},
                 {"schema_hash", bundle.schema.hash()},
                 {"schema", schema},
                 {"seed", bundle.seed},
                 {"step", bundle.step},
                 {"price_mean", bundle.price_scaler.mean},
                 {"price_sd", bundle.price_scaler.sd},
                 {"parameter_count", bundle.parameter_count()},
                 {"parameters", params}};
  std::string body = header.dump() + "\n";
  for (const auto& p : named) {
    const auto d = p.tensor.data();
    body.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }
  write_file_atomic(path, body);
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  json h;
  try {
    h = json::parse(line);
    if (h.at("format") != "mtlgen-checkpoint") throw ParseError(path.string() + ": not a checkpoint");
    EncoderConfig ec;
    const auto& je = h.at("encoder");
    ec.image_size = je.at("image_size");
    ec.patch_size = je.at("patch_size");
    ec.d_enc = je.at("d_enc");
    ec.n_layers = je.at("n_layers");
    ec.n_heads = je.at("n_heads");
    ec.mlp_ratio = je.at("mlp_ratio");
    ec.pooling = je.at("pooling") == "cls" ? Pooling::kCls : Pooling::kMean;
    DecoderConfig dc;
    const auto& jd = h.at("decoder");
    dc.d_dec = jd.at("d_dec");
    dc.n_layers = jd.at("n_layers");
    dc.n_heads = jd.at("n_heads");
    dc.vocab_size = jd.at("vocab_size");
    dc.max_len = jd.at("max_len");
    std::vector<AttributeCategory> cats;
    for (const auto& c : h.at("schema")) cats.push_back({c.at("name"), c.at("classes")});
    AttributeSchema schema(std::move(cats));
    if (schema.hash() != h.at("schema_hash").get<std::string>())
      throw ParseError(path.string() + ": schema hash mismatch");
    ModelBundle m = build_bundle(parse_topology(h.at("topology").get<std::string>()), ec, dc, schema,
                                 h.at("seed").get<std::uint64_t>());
    m.step = h.at("step");
    m.price_scaler = {h.at("price_mean").get<double>(), h.at("price_sd").get<double>()};
    auto named = m.named_parameters();
    const auto& listed = h.at("parameters");
    if (listed.size() != named.size()) throw ParseError(path.string() + ": parameter list does not match topology");
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (listed[i].at("name") != named[i].name || listed[i].at("shape").get<Shape>() != named[i].tensor.shape())
        throw ParseError(path.string() + ": parameter '" + named[i].name + "' does not match");
      auto dst = named[i].tensor.mutable_data();
      in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
      if (!in) throw ParseError(path.string() + ": truncated parameter data");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw ParseError(path.string() + ": trailing bytes");
    return m;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": bad checkpoint header: " + e.what());
  }
}

}  // namespace mtlgen
