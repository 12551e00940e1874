#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace robustclf {

enum class Label : std::uint8_t { kReal = 0, kGenerated = 1 };

enum class BankFormat { kBinary, kCsv };

/// Picks kCsv for a ".csv" extension, kBinary otherwise.
BankFormat format_from_path(const std::filesystem::path& path);

struct ClassCounts {
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// Ordered collection of (feature vector, binary label) pairs sharing one
/// dimension. Features are stored row-major in a single buffer.
class FeatureBank {
 public:
  explicit FeatureBank(std::size_t dim, std::string source_tag = {});

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }

  std::span<const double> feature(std::size_t i) const;
  Label label(std::size_t i) const { return labels_[i]; }
  std::span<const Label> labels() const { return labels_; }
  /// Row-major n x dim view over all features.
  std::span<const double> values() const { return values_; }

  const std::string& source_tag() const { return source_tag_; }
  void set_source_tag(std::string tag) { source_tag_ = std::move(tag); }

  /// Appends one example. Throws InvalidArgument on a length mismatch or a
  /// non-finite component.
  void add(std::span<const double> feature, Label label);
  void reserve(std::size_t n);

  /// New bank holding the listed rows, in the listed order.
  FeatureBank subset(std::span<const std::size_t> rows) const;

  friend bool operator==(const FeatureBank& a, const FeatureBank& b) {
    return a.dim_ == b.dim_ && a.labels_ == b.labels_ && a.values_ == b.values_;
  }

 private:
  std::size_t dim_;
  std::vector<double> values_;
  std::vector<Label> labels_;
  std::string source_tag_;
};

ClassCounts class_counts(const FeatureBank& bank);

FeatureBank load_bank(const std::filesystem::path& path, BankFormat format);
void save_bank(const FeatureBank& bank, const std::filesystem::path& path, BankFormat format);

/// Negatives ~ N(0, I); positives ~ N(separation * e_0, I). Positives are
/// emitted first, then negatives; each row draws its `dim` coordinates in
/// order from Rng(seed).
FeatureBank generate_synthetic(std::size_t n_pos, std::size_t n_neg, std::size_t dim,
                               double separation, std::uint64_t seed);

}  // namespace robustclf
