#include "mtlgen/training.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mtlgen/adam.hpp"
#include "mtlgen/inference.hpp"
#include "mtlgen/rng.hpp"

namespace mtlgen {

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0))
    throw ConfigError("loss weights must be nonnegative");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (!(lr >= 0.0)) throw ConfigError("train: lr must be nonnegative");
  weights.validate();
  if (!weights.any_positive()) throw ConfigError("train: at least one loss weight must be positive");
}

Tensor attribute_loss(const std::vector<Tensor>& per_category_logits, const AttributeLabels& labels,
                      const AttributeSchema& schema) {
  if (per_category_logits.size() != schema.size() || labels.size() != schema.size())
    throw DimensionError("attribute_loss: expected one logit vector and one label per category");
  Tensor total;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (labels[c] >= schema[c].size())
      throw std::out_of_range("attribute_loss: label " + std::to_string(labels[c]) + " not in vocabulary of '" +
                              schema[c].name + "'");
    Tensor ce = cross_entropy_logits(per_category_logits[c], labels[c]);
    total = total ? add(total, ce) : ce;
  }
  return scale(total, 1.0 / static_cast<double>(schema.size()));
}

LossBreakdown joint_loss(double l_attr, double l_price, double l_text, const LossWeights& weights) {
  weights.validate();
  if (l_attr < 0.0 || l_price < 0.0 || l_text < 0.0) throw std::invalid_argument("joint_loss: negative component");
  return {l_attr, l_price, l_text, weights.alpha * l_attr + weights.beta * l_price + weights.gamma * l_text};
}

std::string generic_prompt() {
  return "generate a product listing for an item of type 'garment', suitable for 'everyday wear'";
}

std::string training_prompt(const AttributeSchema& schema, const AttributeLabels& labels) {
  std::string occasion = "everyday wear";
  if (auto idx = schema.find("Occasion"); idx && !schema.is_unknown(*idx, labels.at(*idx)))
    occasion = to_lower(schema[*idx].classes[labels[*idx]]);
  return "generate a product listing for an item of type 'garment', suitable for '" + occasion + "'";
}

std::string reference_stream(const Listing& listing) { return listing.name + " . " + listing.description; }

std::vector<PreparedSample> prepare_samples(const std::vector<Listing>& listings, const ModelBundle& bundle,
                                            const Vocab* vocab) {
  std::vector<PreparedSample> out;
  out.reserve(listings.size());
  const bool text = bundle.generates_text();
  if (text && !vocab) throw std::invalid_argument("prepare_samples: text topology needs a vocabulary");
  for (const auto& l : listings) {
    PreparedSample s;
    s.patches = patchify(l.image, bundle.encoder_config);
    s.labels = l.attributes;
    s.price_z = bundle.price_scaler.standardize(l.price);
    if (text) {
      if (bundle.topology == Topology::kMtlHier || bundle.topology == Topology::kNoMtl)
        s.prompt_ids = vocab->encode(training_prompt(bundle.schema, l.attributes), false, kMaxPromptTokens);
      s.target_ids = vocab->encode(reference_stream(l), true, bundle.decoder_config.max_len + 1);
    }
    out.push_back(std::move(s));
  }
  return out;
}

BatchLosses batch_losses(const ModelBundle& bundle, std::span<const PreparedSample* const> batch, LossMask track) {
  if (batch.empty()) throw std::invalid_argument("batch_losses: empty batch");
  const bool has_attr = bundle.has_attribute_heads();
  const bool has_price = bundle.has_price_head();
  const bool has_text = bundle.generates_text();

  Tensor attr_sum, price_sum, text_sum;
  std::size_t text_tokens = 0;
  auto accumulate = [](Tensor& acc, const Tensor& v) { acc = acc ? add(acc, v) : v; };

  for (const PreparedSample* s : batch) {
    const EncoderOutput enc = encode_patches(s->patches, bundle);
    if (has_attr) {
      std::optional<NoGradGuard> guard;
      if (!track.attr) guard.emplace();
      accumulate(attr_sum, attribute_loss(attribute_logits(enc.pooled, bundle), s->labels, bundle.schema));
    }
    if (has_price) {
      std::optional<NoGradGuard> guard;
      if (!track.price) guard.emplace();
      Tensor pred = price_estimate(enc.pooled, bundle);
      Tensor target = Tensor::from({1, 1}, {s->price_z});
      accumulate(price_sum, mse(pred, target));
    }
    if (has_text) {
      std::optional<NoGradGuard> guard;
      if (!track.text) guard.emplace();
      const auto& ids = s->target_ids;
      std::span<const int> inputs(ids.data(), ids.size() - 1);
      std::span<const int> targets(ids.data() + 1, ids.size() - 1);
      Tensor logits = bundle.unified ? unified_logits(enc.patch_states, inputs, bundle)
                                     : decoder_logits(fuse_context(enc.pooled, s->prompt_ids, bundle), inputs, bundle);
      accumulate(text_sum, cross_entropy_rows_sum(logits, targets));
      text_tokens += targets.size();
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  BatchLosses out;
  out.l_attr = attr_sum ? scale(attr_sum, inv_b) : Tensor::scalar(0.0);
  out.l_price = price_sum ? scale(price_sum, inv_b) : Tensor::scalar(0.0);
  out.l_text = text_sum ? scale(text_sum, 1.0 / static_cast<double>(text_tokens)) : Tensor::scalar(0.0);
  return out;
}

Tensor weighted_total(const BatchLosses& losses, const LossWeights& weights) {
  return add(add(scale(losses.l_attr, weights.alpha), scale(losses.l_price, weights.beta)),
             scale(losses.l_text, weights.gamma));
}

void check_topology_weights(Topology topology, const LossWeights& w) {
  w.validate();
  auto reject = [topology](const std::string& why) {
    throw ConfigError(std::string(topology_name(topology)) + ": " + why);
  };
  if (!w.any_positive()) reject("all loss weights are zero");
  switch (topology) {
    case Topology::kSiloedAttr:
      if (w.alpha <= 0.0 || w.beta != 0.0 || w.gamma != 0.0) reject("requires alpha > 0 and beta = gamma = 0");
      break;
    case Topology::kSiloedPrice:
      if (w.beta <= 0.0 || w.alpha != 0.0 || w.gamma != 0.0) reject("requires beta > 0 and alpha = gamma = 0");
      break;
    case Topology::kDirectCrossAttn:
    case Topology::kDirectUnified:
      if (w.gamma <= 0.0 || w.alpha != 0.0 || w.beta != 0.0) reject("requires gamma > 0 and alpha = beta = 0");
      break;
    case Topology::kNoMtl:
      if (w.beta != 0.0) reject("has no price head, beta must be 0");
      break;
    case Topology::kMtlHier:
      break;
  }
}

LossBreakdown evaluate_losses(const ModelBundle& bundle, const std::vector<PreparedSample>& samples,
                              const LossWeights& weights, std::size_t batch_size) {
  NoGradGuard guard;
  if (samples.empty()) return {};
  double attr = 0.0, price = 0.0, text = 0.0;
  double text_tokens = 0.0;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t end = std::min(samples.size(), begin + batch_size);
    std::vector<const PreparedSample*> batch;
    double tokens = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(&samples[i]);
      if (!samples[i].target_ids.empty()) tokens += static_cast<double>(samples[i].target_ids.size() - 1);
    }
    const auto l = batch_losses(bundle, batch, {false, false, false});
    const double b = static_cast<double>(batch.size());
    attr += l.l_attr.item() * b;
    price += l.l_price.item() * b;
    text += l.l_text.item() * tokens;
    text_tokens += tokens;
  }
  const double n = static_cast<double>(samples.size());
  return joint_loss(attr / n, price / n, text_tokens > 0.0 ? text / text_tokens : 0.0, weights);
}

TrainResult train(ModelBundle& bundle, const std::vector<Listing>& train_set, const std::vector<Listing>& val_set,
                  const TrainConfig& config, const Vocab* vocab, const EpochCallback& on_epoch) {
  config.validate();
  check_topology_weights(bundle.topology, config.weights);
  if (train_set.empty() || val_set.empty()) throw ConfigError("train: empty dataset");

  std::vector<double> prices;
  prices.reserve(train_set.size());
  for (const auto& l : train_set) prices.push_back(l.price);
  bundle.price_scaler = PriceScaler::fit(prices);

  const auto train_samples = prepare_samples(train_set, bundle, vocab);
  const auto val_samples = prepare_samples(val_set, bundle, vocab);
  const auto& w = config.weights;
  const LossMask track{w.alpha > 0.0, w.beta > 0.0, w.gamma > 0.0};

  auto params = bundle.parameters();
  AdamState adam = make_adam_state(params, config.lr);
  Rng rng(config.seed);
  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<std::vector<double>> best = bundle.snapshot_values();
  double best_val = INFINITY;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const PreparedSample*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&train_samples[order[i]]);

      zero_grads(params);
      const BatchLosses losses = batch_losses(bundle, batch, track);
      const Tensor total = weighted_total(losses, w);
      total.backward();
      adam_step(params, adam);
      bundle.step += 1;

      const LossBreakdown step{losses.l_attr.item(), losses.l_price.item(), losses.l_text.item(), total.item()};
      const double expected = w.alpha * step.l_attr + w.beta * step.l_price + w.gamma * step.l_text;
      if (std::abs(step.l_total - expected) > 1e-9 * std::max(1.0, std::abs(expected)))
        throw std::logic_error("train: joint loss identity violated");
      result.steps.push_back(step);
      log.l_attr += step.l_attr;
      log.l_price += step.l_price;
      log.l_text += step.l_text;
      log.l_total += step.l_total;
      ++n_batches;
    }
    const double nb = static_cast<double>(n_batches);
    log.l_attr /= nb;
    log.l_price /= nb;
    log.l_text /= nb;
    log.l_total /= nb;
    log.val_l_total = evaluate_losses(bundle, val_samples, w, config.batch_size).l_total;
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);

    if (log.val_l_total < best_val) {
      best_val = log.val_l_total;
      best = bundle.snapshot_values();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
  }
  bundle.load_values(best);
  zero_grads(params);
  result.best_val_l_total = best_val;
  return result;
}

std::vector<double> attribute_onehot(const AttributeSchema& schema, const AttributeLabels& labels) {
  std::vector<double> x(schema.total_labels(), 0.0);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    x.at(offset + labels.at(c)) = 1.0;
    offset += schema[c].size();
  }
  return x;
}

double hybrid_predict_price(const Image& image, const ModelBundle& siloed_attr, const TreeEnsemble& trees) {
  if (trees.n_features != siloed_attr.schema.total_labels())
    throw ConfigError("hybrid: tree ensemble expects " + std::to_string(trees.n_features) +
                      " features but the classifier schema has " + std::to_string(siloed_attr.schema.total_labels()));
  const auto pred = predict_attributes(image, siloed_attr);
  return trees.predict(attribute_onehot(siloed_attr.schema, pred.labels()));
}

}  // namespace mtlgen
