#include "mtlgen/catalog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mtlgen/rng.hpp"

namespace mtlgen {

using nlohmann::json;

namespace {

struct Rgb {
  double r, g, b;
};

Rgb garment_colour(std::size_t colour_class) {
  static const Rgb palette[] = {
      {0.08, 0.08, 0.08},  // Black
      {0.95, 0.95, 0.95},  // White
      {0.85, 0.12, 0.12},  // Red
      {0.15, 0.25, 0.85},  // Blue
      {0.15, 0.70, 0.20},  // Green
      {0.95, 0.55, 0.75},  // Pink
      {0.50, 0.50, 0.50},  // Unknown
  };
  return palette[std::min<std::size_t>(colour_class, 6)];
}

Rgb background_colour(const Rgb& g) {
  return {0.35 * g.r + 0.65 * 0.55, 0.35 * g.g + 0.65 * 0.55, 0.35 * g.b + 0.65 * 0.55};
}

// Normalized coordinates: x across, y down, both in [0, 1).
bool in_body(double x, double y, std::size_t hemline) {
  const double dx = std::abs(x - 0.5);
  if (y >= 0.18 && y < 0.56) return dx <= 0.16;
  if (y < 0.56 || y >= 0.95) return false;
  switch (hemline) {
    case 1: {  // Flared
      const double half = 0.16 + (y - 0.56) / (0.92 - 0.56) * 0.16;
      return y < 0.92 && dx <= half;
    }
    case 2: {  // Asymmetric: diagonal hem, short on the left
      const double bottom = 0.68 + 0.24 * std::clamp((x - 0.30) / 0.40, 0.0, 1.0);
      return dx <= 0.20 && y < bottom;
    }
    default:  // Straight (and Unknown)
      return y < 0.92 && dx <= 0.16;
  }
}

bool in_sleeve(double x, double y, std::size_t sleeve) {
  const double dx = std::abs(x - 0.5);
  switch (sleeve) {
    case 1:  // Short
      return y >= 0.20 && y < 0.36 && dx > 0.16 && dx <= 0.28;
    case 2:  // Long
      return y >= 0.20 && y < 0.64 && dx > 0.16 && dx <= 0.27;
    default:  // Sleeveless (and Unknown)
      return false;
  }
}

bool in_neck_cutout(double x, double y, std::size_t neck) {
  const double dx = std::abs(x - 0.5);
  switch (neck) {
    case 0:  // Round
      return (x - 0.5) * (x - 0.5) + (y - 0.18) * (y - 0.18) <= 0.09 * 0.09;
    case 1: {  // V-Neck
      const double depth = (y - 0.18) / 0.18;
      return depth >= 0.0 && depth <= 1.0 && dx <= 0.10 * (1.0 - depth);
    }
    case 2:  // One Shoulder: right shoulder cut away along a diagonal
      return x >= 0.34 && y < 0.18 + 0.18 * (x - 0.34) / 0.32;
    case 3: {  // Sweetheart: two lobes over a shallow point
      const double lobe = 0.065;
      const bool left = (x - 0.45) * (x - 0.45) + (y - 0.18) * (y - 0.18) <= lobe * lobe;
      const bool right = (x - 0.55) * (x - 0.55) + (y - 0.18) * (y - 0.18) <= lobe * lobe;
      const double depth = (y - 0.18) / 0.12;
      const bool point = depth >= 0.0 && depth <= 1.0 && dx <= 0.06 * (1.0 - depth);
      return left || right || point;
    }
    default:
      return false;
  }
}

bool pattern_mark(std::size_t r, std::size_t c, std::size_t pattern) {
  switch (pattern) {
    case 1:  // Printed: scattered dots
      return (r * 5 + c * 3) % 7 == 0;
    case 2:  // Striped: horizontal bands
      return (r / 2) % 2 == 0;
    case 3:  // Geometric: block checkerboard
      return ((r / 4) + (c / 4)) % 2 == 0;
    default:
      return false;
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

std::string listing_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "L%06zu", i);
  return buf;
}

}  // namespace

double Image::mean() const {
  double s = 0.0;
  for (double v : pixels) s += v;
  return pixels.empty() ? 0.0 : s / static_cast<double>(pixels.size());
}

PriceTable PriceTable::defaults(const AttributeSchema& schema) {
  PriceTable t;
  t.coefficients.resize(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) t.coefficients[c].assign(schema[c].size(), 0.0);
  if (schema == default_schema()) {
    t.coefficients[attr::kColour] = {1500, 500, 1000, 500, 0, 800, 0};
    t.coefficients[attr::kPattern] = {0, 800, 400, 1200, 0};
    t.coefficients[attr::kSleeve] = {1000, 0, 1500, 0};
    t.coefficients[attr::kHemline] = {0, 1000, 2000, 0};
    t.coefficients[attr::kNeck] = {0, 500, 2500, 1500, 0};
    t.coefficients[attr::kOccasion] = {0, 3000, 5000, 0};
  }
  return t;
}

void CatalogConfig::validate() const {
  if (n_listings < 10) throw ConfigError("catalog: n_listings must be at least 10, got " + std::to_string(n_listings));
  if (image_height == 0 || image_width == 0) throw ConfigError("catalog: image size must be positive");
  if (price_noise_sd < 0.0) throw ConfigError("catalog: price_noise_sd must be nonnegative");
  if (!(unknown_rate >= 0.0 && unknown_rate < 1.0)) throw ConfigError("catalog: unknown_rate must lie in [0,1)");
  if (!(occasion_noise >= 0.0 && occasion_noise <= 1.0)) throw ConfigError("catalog: occasion_noise must lie in [0,1]");
  double total = 0.0;
  for (double r : split_ratios) {
    if (!(r > 0.0)) throw ConfigError("catalog: split ratios must be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("catalog: split ratios must sum to 1");
}

Image render_listing_image(const AttributeSchema& schema, const AttributeLabels& attributes, double quality,
                           std::uint64_t seed, std::size_t height, std::size_t width) {
  if (attributes.size() != schema.size()) {
    throw ConfigError("render: expected " + std::to_string(schema.size()) + " labels, got " +
                      std::to_string(attributes.size()));
  }
  if (!(quality >= 0.0 && quality <= 1.0)) throw ConfigError("render: quality must lie in [0,1]");
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (attributes[c] >= schema[c].size())
      throw ConfigError("render: category '" + schema[c].name + "' has no class " + std::to_string(attributes[c]));
  }

  const std::size_t colour = attributes[attr::kColour];
  const std::size_t pattern = attributes[attr::kPattern];
  const std::size_t sleeve = attributes[attr::kSleeve];
  const std::size_t hemline = attributes[attr::kHemline];
  const std::size_t neck = attributes[attr::kNeck];

  const Rgb fg = garment_colour(colour);
  const Rgb bg = background_colour(fg);
  const Rgb mark{fg.r * 0.55 + (1.0 - fg.r) * 0.45, fg.g * 0.55 + (1.0 - fg.g) * 0.45,
                 fg.b * 0.55 + (1.0 - fg.b) * 0.45};

  const std::size_t n = height * width;
  std::vector<double> mask(n, 0.0);
  for (std::size_t r = 0; r < height; ++r) {
    const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(height);
    for (std::size_t c = 0; c < width; ++c) {
      const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(width);
      const bool garment = (in_body(x, y, hemline) || in_sleeve(x, y, sleeve)) && !in_neck_cutout(x, y, neck);
      mask[r * width + c] = garment ? 1.0 : 0.0;
    }
  }

  // Two 3x3 box-blur passes give the soft silhouette used at low quality.
  auto box_blur = [&](const std::vector<double>& in) {
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        double s = 0.0;
        int cnt = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<long>(height) || cc >= static_cast<long>(width)) continue;
            s += in[rr * width + cc];
            ++cnt;
          }
        out[r * width + c] = s / cnt;
      }
    return out;
  };
  const std::vector<double> soft = box_blur(box_blur(mask));

  Rng rng(seed);
  const double noise_amp = 0.02 + 0.18 * (1.0 - quality);
  Image img{height, width, std::vector<double>(n * 3)};
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      const double alpha = quality * mask[i] + (1.0 - quality) * soft[i];
      const Rgb& g = pattern_mark(r, c, pattern) ? mark : fg;
      const double px[3] = {alpha * g.r + (1.0 - alpha) * bg.r, alpha * g.g + (1.0 - alpha) * bg.g,
                            alpha * g.b + (1.0 - alpha) * bg.b};
      for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[i * 3 + ch] = quantize(px[ch] + noise_amp * rng.normal());
    }
  return img;
}

double price_oracle(const PriceTable& table, const AttributeLabels& attributes, double quality, double noise) {
  double p = table.base + table.quality_scale * quality + noise;
  for (std::size_t c = 0; c < attributes.size() && c < table.coefficients.size(); ++c)
    p += table.coefficients[c].at(attributes[c]);
  return std::clamp(p, table.min_price, table.max_price);
}

ReferenceText compose_reference_text(const AttributeSchema& schema, const AttributeLabels& attributes,
                                     double price) {
  if (attributes.size() != schema.size()) throw ConfigError("compose_reference_text: label count mismatch");
  auto known = [&](std::size_t c) { return !schema.is_unknown(c, attributes.at(c)); };
  auto value = [&](std::size_t c) { return to_lower(schema[c].classes.at(attributes[c])); };

  std::vector<std::string> words;
  auto append = [&words](const std::string& phrase) {
    std::istringstream in(phrase);
    for (std::string w; in >> w;) words.push_back(w);
  };

  // Phrases keyed by category in default_schema() order; other schemas fall
  // back to "<category> is <value>".
  const bool garment_schema = schema == default_schema();
  append("this garment is crafted with care");
  bool any_known = false;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (!known(c)) continue;
    any_known = true;
    if (!garment_schema) {
      append(to_lower(schema[c].name) + " is " + value(c));
      continue;
    }
    switch (c) {
      case attr::kColour: append("it comes in " + value(c)); break;
      case attr::kPattern: append("with a " + value(c) + " design"); break;
      case attr::kSleeve: append("its sleeve style is " + value(c)); break;
      case attr::kHemline: append("the hemline is " + value(c)); break;
      case attr::kNeck: append("it has a " + value(c) + " neckline"); break;
      case attr::kOccasion: append("ideal for " + value(c) + " occasions"); break;
      default: break;
    }
  }
  static const char* const kFillers[] = {
      "it feels comfortable all day",
      "it is easy to care for",
      "a versatile addition to any collection",
      "made to last through many seasons",
  };
  constexpr std::size_t kClosingWords = 7;
  for (const char* filler : kFillers) {
    if (words.size() + kClosingWords >= 25) break;
    append(filler);
  }
  if (!any_known) {
    append("a lovely choice to wear with confidence");
  } else if (price < 8000.0) {
    append("an affordable choice to wear with confidence");
  } else if (price < 14000.0) {
    append("a refined choice to wear with confidence");
  } else {
    append("a luxurious choice to wear with confidence");
  }

  ReferenceText out;
  for (std::size_t i = 0; i < words.size(); ++i) out.description += (i ? " " : "") + words[i];
  for (std::size_t c : {attr::kColour, attr::kPattern, attr::kOccasion}) {
    if (garment_schema && known(c)) out.name += value(c) + " ";
  }
  out.name += "garment";
  return out;
}

AttributeLabels sample_attributes(const AttributeSchema& schema, const CatalogConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  AttributeLabels labels(schema.size());
  if (!(schema == default_schema())) {
    for (std::size_t c = 0; c < schema.size(); ++c) {
      // Uniform over the known classes.
      std::size_t k = rng.below(schema[c].size() - 1);
      if (k >= schema[c].unknown_index()) ++k;
      labels[c] = k;
    }
    return labels;
  }
  static const double kColourWeights[] = {0.30, 0.14, 0.14, 0.14, 0.14, 0.14};
  static const double kSleeveWeights[] = {0.40, 0.30, 0.30};
  labels[attr::kColour] = rng.categorical(kColourWeights);
  labels[attr::kPattern] = rng.below(4);
  labels[attr::kSleeve] = rng.categorical(kSleeveWeights);
  labels[attr::kHemline] = rng.below(3);
  labels[attr::kNeck] = rng.below(4);
  // Occasion: Evening/Formal exactly for black sleeveless garments (Formal
  // when the hemline is straight), Daily otherwise, with uniform resampling.
  std::size_t occasion = 0;
  if (labels[attr::kColour] == 0 && labels[attr::kSleeve] == 0) occasion = labels[attr::kHemline] == 0 ? 2 : 1;
  if (rng.uniform() < config.occasion_noise) occasion = rng.below(3);
  labels[attr::kOccasion] = occasion;
  return labels;
}

Splits generate_catalog(const CatalogConfig& config, const AttributeSchema& schema) {
  return generate_catalog(config, schema, PriceTable::defaults(schema));
}

Splits generate_catalog(const CatalogConfig& config, const AttributeSchema& schema, const PriceTable& prices) {
  config.validate();
  std::vector<Listing> all;
  all.reserve(config.n_listings);
  for (std::size_t i = 0; i < config.n_listings; ++i) {
    Rng rng(mix_seed(config.rng_seed, i));
    Listing l;
    l.id = listing_id(i);
    const AttributeLabels truth = sample_attributes(schema, config, rng.next());
    l.quality = rng.uniform();
    const double noise = rng.normal(0.0, config.price_noise_sd);
    l.price = price_oracle(prices, truth, l.quality, noise);
    l.image = render_listing_image(schema, truth, l.quality, rng.next(), config.image_height, config.image_width);
    l.attributes = truth;
    for (std::size_t c = 0; c < schema.size(); ++c)
      if (rng.uniform() < config.unknown_rate) l.attributes[c] = schema[c].unknown_index();
    auto text = compose_reference_text(schema, l.attributes, l.price);
    l.name = std::move(text.name);
    l.description = std::move(text.description);
    all.push_back(std::move(l));
  }

  const auto n = static_cast<double>(config.n_listings);
  const auto n_train = static_cast<std::size_t>(std::llround(n * config.split_ratios[0]));
  const auto n_val = static_cast<std::size_t>(std::llround(n * config.split_ratios[1]));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= config.n_listings)
    throw ConfigError("catalog: split ratios leave an empty split");
  Splits s;
  s.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + n_train));
  s.val.assign(std::make_move_iterator(all.begin() + n_train),
               std::make_move_iterator(all.begin() + n_train + n_val));
  s.test.assign(std::make_move_iterator(all.begin() + n_train + n_val), std::make_move_iterator(all.end()));
  return s;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot move catalog into '" + path.string() + "'");
  }
}

std::filesystem::path quality_sidecar_path(const std::filesystem::path& catalog_path) {
  auto p = catalog_path;
  p.replace_extension(".quality.jsonl");
  return p;
}

namespace {

json schema_json(const AttributeSchema& schema) {
  json cats = json::array();
  for (const auto& c : schema.categories()) cats.push_back({{"name", c.name}, {"classes", c.classes}});
  return cats;
}

}  // namespace

void write_catalog(const std::vector<Listing>& listings, const AttributeSchema& schema,
                   const std::filesystem::path& path) {
  std::string body;
  json header = {{"format", "mtlgen-catalog"},
                 {"version", 1},
                 {"schema_hash", schema.hash()},
                 {"schema", schema_json(schema)},
                 {"count", listings.size()}};
  body += header.dump() + "\n";
  std::string side;
  for (const auto& l : listings) {
    json attrs = json::object();
    for (std::size_t c = 0; c < schema.size(); ++c) attrs[schema[c].name] = schema[c].classes.at(l.attributes.at(c));
    std::vector<int> pixels(l.image.pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
      pixels[i] = static_cast<int>(std::lround(l.image.pixels[i] * 255.0));
    json rec = {{"id", l.id},
                {"image_shape", {l.image.height, l.image.width, 3}},
                {"image_data", std::move(pixels)},
                {"attributes", std::move(attrs)},
                {"price", l.price},
                {"name", l.name},
                {"description", l.description}};
    body += rec.dump() + "\n";
    json q = {{"id", l.id}, {"quality", l.quality}};
    side += q.dump() + "\n";
  }
  write_file_atomic(path, body);
  write_file_atomic(quality_sidecar_path(path), side);
}

std::vector<Listing> read_catalog(const std::filesystem::path& path, const AttributeSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open catalog '" + path.string() + "'");
  auto fail = [&path](std::size_t line, const std::string& what) -> ParseError {
    return ParseError(path.string() + ":" + std::to_string(line) + ": " + what);
  };
  std::string line;
  std::size_t lineno = 0;
  std::vector<Listing> out;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(lineno, std::string("malformed JSON: ") + e.what());
    }
    try {
      if (lineno == 1) {
        if (j.value("format", "") != "mtlgen-catalog") throw fail(lineno, "missing catalog header");
        if (j.at("schema_hash").get<std::string>() != schema.hash())
          throw fail(lineno, "schema hash " + j.at("schema_hash").get<std::string>() + " does not match " +
                                 schema.hash());
        expected = j.at("count").get<std::size_t>();
        continue;
      }
      Listing l;
      l.id = j.at("id").get<std::string>();
      auto shape = j.at("image_shape").get<std::vector<std::size_t>>();
      if (shape.size() != 3 || shape[2] != 3) throw fail(lineno, "image_shape must be [H,W,3]");
      auto pixels = j.at("image_data").get<std::vector<int>>();
      if (pixels.size() != shape[0] * shape[1] * 3)
        throw fail(lineno, "image_data length does not match image_shape");
      l.image.height = shape[0];
      l.image.width = shape[1];
      l.image.pixels.resize(pixels.size());
      for (std::size_t i = 0; i < pixels.size(); ++i) {
        if (pixels[i] < 0 || pixels[i] > 255) throw fail(lineno, "pixel value outside [0,255]");
        l.image.pixels[i] = static_cast<double>(pixels[i]) / 255.0;
      }
      const auto& attrs = j.at("attributes");
      l.attributes.resize(schema.size());
      for (std::size_t c = 0; c < schema.size(); ++c) {
        if (!attrs.contains(schema[c].name)) throw fail(lineno, "missing label for category '" + schema[c].name + "'");
        auto label = attrs.at(schema[c].name).get<std::string>();
        auto idx = schema[c].find(label);
        if (!idx) throw fail(lineno, "label '" + label + "' not in category '" + schema[c].name + "'");
        l.attributes[c] = *idx;
      }
      l.price = j.at("price").get<double>();
      l.name = j.at("name").get<std::string>();
      l.description = j.at("description").get<std::string>();
      out.push_back(std::move(l));
    } catch (const json::exception& e) {
      throw fail(lineno, std::string("bad field: ") + e.what());
    }
  }
  if (lineno == 0) throw ParseError(path.string() + ": empty catalog");
  if (out.size() != expected)
    throw ParseError(path.string() + ": header announces " + std::to_string(expected) + " records, found " +
                     std::to_string(out.size()));
  return out;
}

void read_quality_sidecar(const std::filesystem::path& catalog_path, std::vector<Listing>& listings) {
  const auto path = quality_sidecar_path(catalog_path);
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open quality sidecar '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0, row = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      if (row >= listings.size()) throw ParseError(path.string() + ": more quality rows than listings");
      if (j.at("id").get<std::string>() != listings[row].id)
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": id does not align with catalog");
      listings[row++].quality = j.at("quality").get<double>();
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (row != listings.size()) throw ParseError(path.string() + ": quality row count differs from listing count");
}

}  // namespace mtlgen
