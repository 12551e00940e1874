#include "robustclf/feature_bank.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/rng.hpp"

namespace robustclf {

namespace {

constexpr std::array<char, 8> kBankMagic = {'F', 'B', 'A', 'N', 'K', '\x00', '\x01', '\x00'};
constexpr std::size_t kHeaderBytes = 24;

std::string at_row(std::string_view what, std::size_t row) {
  return std::string(what) + " at row " + std::to_string(row);
}

FeatureBank load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature bank: " + path.string());

  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kBankMagic) {
    throw FormatError("malformed header: bad magic in " + path.string());
  }
  std::uint64_t n = 0;
  std::uint64_t d = 0;
  if (!detail::get_u64(in, n) || !detail::get_u64(in, d)) {
    throw FormatError("malformed header: truncated in " + path.string());
  }
  if (d == 0) throw FormatError("malformed header: dimension is zero");

  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(kHeaderBytes, std::ios::beg);
  const std::uint64_t record_bytes = d * 8 + 1;
  if (d > (UINT64_MAX - 1) / 8 || (n != 0 && record_bytes > (UINT64_MAX - kHeaderBytes) / n)) {
    throw FormatError("malformed header: size overflow");
  }
  const std::uint64_t payload = file_size - kHeaderBytes;
  if (payload < n * record_bytes) {
    throw FormatError(at_row("truncated record", payload / record_bytes + 1));
  }
  if (payload > n * record_bytes) throw FormatError("trailing bytes after last record");

  FeatureBank bank(d, "file:" + path.string());
  bank.reserve(n);
  std::vector<unsigned char> record(record_bytes);
  std::vector<double> row(d);
  for (std::uint64_t r = 0; r < n; ++r) {
    if (!in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record_bytes))) {
      throw FormatError(at_row("truncated record", r + 1));
    }
    for (std::uint64_t j = 0; j < d; ++j) {
      row[j] = detail::decode_f64(record.data() + 8 * j);
      if (!std::isfinite(row[j])) throw FormatError(at_row("non-finite value", r + 1));
    }
    const unsigned char label = record[record_bytes - 1];
    if (label > 1) throw FormatError(at_row("non-binary label", r + 1));
    bank.add(row, static_cast<Label>(label));
  }
  return bank;
}

FeatureBank load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature bank: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw FormatError("malformed header: empty file");
  std::vector<std::string_view> fields;
  auto split = [&fields](std::string_view text) {
    fields.clear();
    std::size_t start = 0;
    while (true) {
      const auto comma = text.find(',', start);
      fields.push_back(detail::trim(text.substr(start, comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
  };

  split(line);
  if (fields.size() < 2 || fields[0] != "label") {
    throw FormatError("malformed header: expected \"label,f0,...\"");
  }
  const std::size_t d = fields.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (fields[j + 1] != "f" + std::to_string(j)) {
      throw FormatError("malformed header: column " + std::to_string(j + 1) + " should be f" +
                        std::to_string(j));
    }
  }

  FeatureBank bank(d, "file:" + path.string());
  std::vector<double> row(d);
  std::size_t row_index = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row_index;
    split(line);
    if (fields.size() != d + 1) throw FormatError(at_row("dimension mismatch", row_index));
    Label label;
    if (fields[0] == "0") {
      label = Label::kReal;
    } else if (fields[0] == "1") {
      label = Label::kGenerated;
    } else {
      throw FormatError(at_row("non-binary label", row_index));
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (!detail::parse_double(fields[j + 1], row[j])) {
        throw FormatError(at_row("unparsable value", row_index));
      }
      if (!std::isfinite(row[j])) throw FormatError(at_row("non-finite value", row_index));
    }
    bank.add(row, label);
  }
  return bank;
}

}  // namespace

BankFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? BankFormat::kCsv : BankFormat::kBinary;
}

FeatureBank::FeatureBank(std::size_t dim, std::string source_tag)
    : dim_(dim), source_tag_(std::move(source_tag)) {
  if (dim == 0) throw InvalidArgument("feature bank dimension must be positive");
}

std::span<const double> FeatureBank::feature(std::size_t i) const {
  return std::span<const double>(values_).subspan(i * dim_, dim_);
}

void FeatureBank::add(std::span<const double> feature, Label label) {
  if (feature.size() != dim_) {
    throw InvalidArgument("feature length " + std::to_string(feature.size()) +
                          " does not match bank dimension " + std::to_string(dim_));
  }
  for (double v : feature) {
    if (!std::isfinite(v)) throw InvalidArgument("feature contains a non-finite value");
  }
  if (label != Label::kReal && label != Label::kGenerated) throw InvalidArgument("label must be 0 or 1");
  values_.insert(values_.end(), feature.begin(), feature.end());
  labels_.push_back(label);
}

void FeatureBank::reserve(std::size_t n) {
  values_.reserve(n * dim_);
  labels_.reserve(n);
}

FeatureBank FeatureBank::subset(std::span<const std::size_t> rows) const {
  FeatureBank out(dim_, source_tag_);
  out.reserve(rows.size());
  for (std::size_t r : rows) {
    if (r >= size()) throw InvalidArgument("subset row out of range");
    out.add(feature(r), labels_[r]);
  }
  return out;
}

ClassCounts class_counts(const FeatureBank& bank) {
  ClassCounts counts;
  for (Label l : bank.labels()) {
    if (l == Label::kGenerated) {
      ++counts.n_pos;
    } else {
      ++counts.n_neg;
    }
  }
  return counts;
}

FeatureBank load_bank(const std::filesystem::path& path, BankFormat format) {
  return format == BankFormat::kBinary ? load_binary(path) : load_csv(path);
}

void save_bank(const FeatureBank& bank, const std::filesystem::path& path, BankFormat format) {
  if (path.empty()) throw IoError("save_bank: empty path");
  std::ofstream out(path, format == BankFormat::kBinary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot write feature bank: " + path.string());

  if (format == BankFormat::kBinary) {
    out.write(kBankMagic.data(), kBankMagic.size());
    detail::put_u64(out, bank.size());
    detail::put_u64(out, bank.dim());
    for (std::size_t i = 0; i < bank.size(); ++i) {
      for (double v : bank.feature(i)) detail::put_f64(out, v);
      out.put(static_cast<char>(bank.label(i)));
    }
  } else {
    out << "label";
    for (std::size_t j = 0; j < bank.dim(); ++j) out << ",f" << j;
    out << '\n';
    for (std::size_t i = 0; i < bank.size(); ++i) {
      out << static_cast<int>(bank.label(i));
      for (double v : bank.feature(i)) out << ',' << detail::format_double(v);
      out << '\n';
    }
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

FeatureBank generate_synthetic(std::size_t n_pos, std::size_t n_neg, std::size_t dim,
                               double separation, std::uint64_t seed) {
  if (n_pos + n_neg == 0) throw InvalidArgument("generate_synthetic: need at least one example");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw InvalidArgument("generate_synthetic: separation must be finite and >= 0");
  }
  std::ostringstream tag;
  tag << "synthetic:n_pos=" << n_pos << ",n_neg=" << n_neg << ",dim=" << dim
      << ",sep=" << detail::format_double(separation) << ",seed=" << seed;
  FeatureBank bank(dim, tag.str());
  bank.reserve(n_pos + n_neg);

  Rng rng(seed);
  std::vector<double> row(dim);
  auto draw = [&](double shift, Label label) {
    for (double& v : row) v = rng.normal();
    row[0] += shift;
    bank.add(row, label);
  };
  for (std::size_t i = 0; i < n_pos; ++i) draw(separation, Label::kGenerated);
  for (std::size_t i = 0; i < n_neg; ++i) draw(0.0, Label::kReal);
  return bank;
}

}  // namespace robustclf
