#pragma once

// Procedural garment catalog: rendered images, attribute labels, hedonic
// prices with a latent visual quality term, and templated reference text.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtlgen/schema.hpp"

namespace mtlgen {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Height x width x 3 image, row-major HWC, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * 3 + ch]; }
  double mean() const;
  bool operator==(const Image&) const = default;
};

struct Listing {
  std::string id;
  Image image;
  AttributeLabels attributes;
  double price = 0.0;
  /// Generator-internal; never written to the model-visible catalog file.
  double quality = std::numeric_limits<double>::quiet_NaN();
  std::string name;
  std::string description;
};

struct Splits {
  std::vector<Listing> train;
  std::vector<Listing> val;
  std::vector<Listing> test;
};

/// Additive price model: base + per-class coefficients + quality term.
struct PriceTable {
  double base = 4000.0;
  double quality_scale = 8000.0;
  double min_price = 1500.0;
  double max_price = 25000.0;
  /// coefficients[category][class]; 'Unknown' entries must be zero.
  std::vector<std::vector<double>> coefficients;

  static PriceTable defaults(const AttributeSchema& schema);
};

struct CatalogConfig {
  std::size_t n_listings = 2000;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::uint64_t rng_seed = 7;
  double price_noise_sd = 800.0;
  double unknown_rate = 0.05;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  /// Probability that Occasion is resampled uniformly instead of following
  /// the colour/sleeve rule.
  double occasion_noise = 0.1;

  void validate() const;
};

/// Renders the attributes onto a garment silhouette. Deterministic in all
/// arguments. Occasion is not drawn; it has to be inferred from other cues.
Image render_listing_image(const AttributeSchema& schema, const AttributeLabels& attributes, double quality,
                           std::uint64_t seed, std::size_t height = 32, std::size_t width = 32);

/// Pure hedonic price: clamp(base + Σ coef + quality_scale·quality + noise).
double price_oracle(const PriceTable& table, const AttributeLabels& attributes, double quality, double noise);

struct ReferenceText {
  std::string name;
  std::string description;
};

ReferenceText compose_reference_text(const AttributeSchema& schema, const AttributeLabels& attributes,
                                     double price);

/// Samples true attributes (before any masking) using the catalog's priors.
AttributeLabels sample_attributes(const AttributeSchema& schema, const CatalogConfig& config, std::uint64_t seed);

Splits generate_catalog(const CatalogConfig& config, const AttributeSchema& schema);
Splits generate_catalog(const CatalogConfig& config, const AttributeSchema& schema, const PriceTable& prices);

/// JSON-lines catalog plus a `<path>.quality.jsonl` sidecar.
void write_catalog(const std::vector<Listing>& listings, const AttributeSchema& schema,
                   const std::filesystem::path& path);
/// Reads a catalog; quality stays NaN unless read_quality_sidecar is applied.
std::vector<Listing> read_catalog(const std::filesystem::path& path, const AttributeSchema& schema);
void read_quality_sidecar(const std::filesystem::path& catalog_path, std::vector<Listing>& listings);
std::filesystem::path quality_sidecar_path(const std::filesystem::path& catalog_path);

/// Writes `contents` to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace mtlgen
