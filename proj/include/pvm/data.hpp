#ifndef PVM_DATA_HPP
#define PVM_DATA_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pvm/error.hpp"
#include "pvm/problem.hpp"
#include "pvm/random.hpp"

namespace pvm {

// ---------------------------------------------------------------------------
// Communities and Crime
// ---------------------------------------------------------------------------

/// Numeric table with NaN as the missing marker. The last column is the target.
struct RawTable {
  std::vector<std::string> columns;
  Eigen::MatrixXd values;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  Index predictor_count() const { return values.cols() - 1; }

  static bool is_missing(double v) { return std::isnan(v); }

  Index missing_count() const { return values.array().isNaN().count(); }
};

/// Raw UCI layout: 128 comma-separated columns, the first five of which
/// (state, county, community, communityname, fold) are identifiers.
inline constexpr int kCommunitiesColumns = 128;
inline constexpr int kCommunitiesIdColumns = 5;

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      fields.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current.push_back(c);
    }
  }
  fields.push_back(current);
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return fields;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses the normalized Communities and Crime file ("?" = missing). An
/// optional header line is recognized when none of its fields is numeric.
/// Identifier columns are dropped, leaving the predictors and the target.
inline RawTable load_communities_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);

  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = detail::split_csv_line(line);
    if (width == 0) {
      width = fields.size();
      if (width <= static_cast<std::size_t>(kCommunitiesIdColumns) + 1) {
        throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(kCommunitiesColumns) + " columns, found " +
                             std::to_string(width),
                         line_no);
      }
      const bool any_numeric = std::any_of(fields.begin(), fields.end(), [](const std::string& f) {
        return detail::parse_number(f).has_value();
      });
      if (!any_numeric) {
        header = fields;
        continue;
      }
    }
    if (fields.size() != width) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                           " fields, found " + std::to_string(fields.size()),
                       line_no);
    }
    std::vector<double> row;
    row.reserve(width - kCommunitiesIdColumns);
    for (std::size_t c = kCommunitiesIdColumns; c < width; ++c) {
      if (fields[c] == "?") {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      auto v = detail::parse_number(fields[c]);
      if (!v) {
        throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(c + 1) +
                             ": not a number: '" + fields[c] + "'",
                         line_no);
      }
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("no data rows in " + path.string(), line_no);

  RawTable t;
  const auto cols = static_cast<Index>(width - kCommunitiesIdColumns);
  t.values.resize(static_cast<Index>(rows.size()), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Index c = 0; c < cols; ++c) t.values(static_cast<Index>(r), c) = rows[r][c];
  }
  for (Index c = 0; c < cols; ++c) {
    t.columns.push_back(header.empty() ? "attr" + std::to_string(c + kCommunitiesIdColumns)
                                       : header[c + kCommunitiesIdColumns]);
  }
  const Index target = cols - 1;
  if (t.values.col(target).array().isNaN().any()) {
    throw ParseError("target column has missing values", 0);
  }
  return t;
}

/// Fills missing predictor cells by least squares on the fully observed
/// predictor columns (plus intercept), fitted on the rows where the column is
/// observed. Fills are clamped to [0, 1]; observed cells are left untouched.
inline RawTable regression_impute(const RawTable& table) {
  const Index rows = table.rows();
  const Index predictors = table.predictor_count();
  std::vector<Index> complete;
  std::vector<Index> incomplete;
  for (Index c = 0; c < predictors; ++c) {
    const Index missing = table.values.col(c).array().isNaN().count();
    if (missing == rows) {
      throw ImputationError("column '" + table.columns[c] + "' is missing in every row");
    }
    (missing == 0 ? complete : incomplete).push_back(c);
  }
  if (table.values.col(table.cols() - 1).array().isNaN().any()) {
    throw ImputationError("target column has missing values");
  }
  RawTable out = table;
  if (incomplete.empty()) return out;
  if (complete.empty()) throw ImputationError("no fully observed predictor column to regress on");

  const auto k = static_cast<Index>(complete.size());
  Eigen::MatrixXd design(rows, k + 1);
  for (Index j = 0; j < k; ++j) design.col(j) = table.values.col(complete[j]);
  design.col(k).setOnes();

  for (Index c : incomplete) {
    std::vector<Index> observed;
    std::vector<Index> missing;
    for (Index r = 0; r < rows; ++r) {
      (std::isnan(table.values(r, c)) ? missing : observed).push_back(r);
    }
    Eigen::MatrixXd a(static_cast<Index>(observed.size()), k + 1);
    Vector b(static_cast<Index>(observed.size()));
    for (std::size_t i = 0; i < observed.size(); ++i) {
      a.row(static_cast<Index>(i)) = design.row(observed[i]);
      b[static_cast<Index>(i)] = table.values(observed[i], c);
    }
    // Minimum-norm least squares; stays defined when regressors outnumber rows.
    const Vector beta = a.completeOrthogonalDecomposition().solve(b);
    for (Index r : missing) out.values(r, c) = std::clamp(design.row(r).dot(beta), 0.0, 1.0);
  }
  return out;
}

/// Predictors and target of a fully observed table.
inline void table_to_regression(const RawTable& table, RowMatrix& features, Vector& targets) {
  if (table.missing_count() > 0) throw DomainError("table still has missing values");
  features = table.values.leftCols(table.predictor_count());
  targets = table.values.col(table.cols() - 1);
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 2051;  // 00 00 08 03
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;  // 00 00 08 01

/// Pixels scaled to [0, 1], one flattened row-major image per row.
struct ImageSet {
  RowMatrix pixels;
  std::vector<int> labels;
  Index image_rows = 0;
  Index image_cols = 0;

  Index size() const { return pixels.rows(); }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& what) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(what + ": truncated header at byte offset " + std::to_string(offset), offset);
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace detail

inline ImageSet load_mnist_idx(const std::filesystem::path& images_path,
                               const std::filesystem::path& labels_path) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);
  const std::string iname = images_path.filename().string();
  const std::string lname = labels_path.filename().string();

  const auto imagic = detail::read_be32(images, 0, iname);
  if (imagic != kIdxImagesMagic) {
    throw ParseError(iname + ": bad image magic " + std::to_string(imagic) + " at byte offset 0", 0);
  }
  const auto lmagic = detail::read_be32(labels, 0, lname);
  if (lmagic != kIdxLabelsMagic) {
    throw ParseError(lname + ": bad label magic " + std::to_string(lmagic) + " at byte offset 0", 0);
  }
  const std::size_t count = detail::read_be32(images, 4, iname);
  const std::size_t rows = detail::read_be32(images, 8, iname);
  const std::size_t cols = detail::read_be32(images, 12, iname);
  const std::size_t label_count = detail::read_be32(labels, 4, lname);
  if (count != label_count) {
    throw ParseError("image count " + std::to_string(count) + " != label count " +
                         std::to_string(label_count) + " (byte offset 4)",
                     4);
  }
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + count * pixels) {
    throw ParseError(iname + ": truncated pixel data at byte offset " + std::to_string(images.size()),
                     images.size());
  }
  if (labels.size() < 8 + count) {
    throw ParseError(lname + ": truncated label data at byte offset " + std::to_string(labels.size()),
                     labels.size());
  }

  ImageSet set;
  set.image_rows = static_cast<Index>(rows);
  set.image_cols = static_cast<Index>(cols);
  set.pixels.resize(static_cast<Index>(count), static_cast<Index>(pixels));
  set.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* src = images.data() + 16 + i * pixels;
    for (std::size_t j = 0; j < pixels; ++j) {
      set.pixels(static_cast<Index>(i), static_cast<Index>(j)) = src[j] / 255.0;
    }
    const int label = labels[8 + i];
    if (label > 9) {
      throw ParseError(lname + ": label " + std::to_string(label) + " out of range at byte offset " +
                           std::to_string(8 + i),
                       8 + i);
    }
    set.labels[i] = label;
  }
  return set;
}

/// Inverse of load_mnist_idx; pixels are rounded back to bytes.
inline void write_mnist_idx(const ImageSet& set, const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw ParseError("cannot write IDX output", 0);
  detail::write_be32(img, kIdxImagesMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(set.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(set.image_rows));
  detail::write_be32(img, static_cast<std::uint32_t>(set.image_cols));
  for (Index i = 0; i < set.pixels.rows(); ++i) {
    for (Index j = 0; j < set.pixels.cols(); ++j) {
      const double v = std::clamp(set.pixels(i, j), 0.0, 1.0);
      img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  detail::write_be32(lab, kIdxLabelsMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(set.size()));
  for (int l : set.labels) lab.put(static_cast<char>(l));
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::vector<Role> roles{Role::train, Role::validation};
  std::vector<double> fractions{0.75, 0.25};
  std::uint64_t seed = 0;
  std::optional<Index> subset;  // rows kept after shuffling, before splitting

  void validate(Index source_rows) const {
    if (roles.empty() || roles.size() != fractions.size()) {
      throw DomainError("split roles and fractions differ in length");
    }
    double sum = 0.0;
    for (double f : fractions) {
      if (f < 0.0) throw DomainError("negative split fraction");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw DomainError("split fractions must sum to 1");
    if (subset && (*subset < 1 || *subset > source_rows)) {
      throw DomainError("subset size " + std::to_string(*subset) + " exceeds source size " +
                        std::to_string(source_rows));
    }
  }
};

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> validation;
  std::vector<Index> test;

  std::vector<Index>& operator[](Role r) {
    return r == Role::train ? train : r == Role::validation ? validation : test;
  }
};

/// Seeded shuffle, prefix subset, then consecutive blocks whose boundaries
/// are floor(cumulative fraction * N); the last role takes the remainder.
inline SplitIndices split_indices(Index source_rows, const SplitSpec& spec) {
  spec.validate(source_rows);
  std::vector<Index> order = all_rows(source_rows);
  Rng rng(spec.seed);
  rng.shuffle(std::span<Index>(order));
  const Index n = spec.subset.value_or(source_rows);
  order.resize(static_cast<std::size_t>(n));

  SplitIndices out;
  double cumulative = 0.0;
  Index begin = 0;
  for (std::size_t r = 0; r < spec.roles.size(); ++r) {
    cumulative += spec.fractions[r];
    const Index end = r + 1 == spec.roles.size()
                          ? n
                          : static_cast<Index>(std::floor(cumulative * static_cast<double>(n) + 1e-9));
    auto& target = out[spec.roles[r]];
    target.assign(order.begin() + begin, order.begin() + end);
    begin = end;
  }
  return out;
}

struct Splits {
  DatasetSplit train;
  DatasetSplit validation;
  std::optional<DatasetSplit> test;
};

/// Regression splits of a fully imputed table.
inline Splits subsample_and_split(const RawTable& table, const SplitSpec& spec) {
  RowMatrix x;
  Vector y;
  table_to_regression(table, x, y);
  const auto all = DatasetSplit::regression(std::move(x), std::move(y), Role::train);
  auto idx = split_indices(all.rows(), spec);
  Splits s{all.select(idx.train, Role::train), all.select(idx.validation, Role::validation),
           std::nullopt};
  if (!idx.test.empty()) s.test = all.select(idx.test, Role::test);
  return s;
}

/// Classification splits from a training image set; the separate test set,
/// when given, is used whole.
inline Splits subsample_and_split(const ImageSet& source, const SplitSpec& spec,
                                  const ImageSet* test_set = nullptr, int classes = 10) {
  const auto all = DatasetSplit::classification(source.pixels, source.labels, classes, Role::train);
  auto idx = split_indices(all.rows(), spec);
  Splits s{all.select(idx.train, Role::train), all.select(idx.validation, Role::validation),
           std::nullopt};
  if (test_set) {
    s.test = DatasetSplit::classification(test_set->pixels, test_set->labels, classes, Role::test);
  } else if (!idx.test.empty()) {
    s.test = all.select(idx.test, Role::test);
  }
  return s;
}

}  // namespace pvm

#endif  // PVM_DATA_HPP
