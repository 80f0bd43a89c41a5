#pragma once

// Binary-classification datasets and the shuffled-epoch minibatch schedule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/rng.hpp"

namespace posteriorflow {

using FeatureMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Immutable N x d feature matrix with labels in {-1, +1}.
class Dataset {
 public:
  Dataset() = default;

  Dataset(FeatureMatrix features, Vector labels)
      : features_(std::move(features)), labels_(std::move(labels)) {
    require(features_.rows() == labels_.size(),
            "Dataset: feature rows and label count differ");
    require(features_.allFinite(), "Dataset: non-finite feature entry");
    for (Eigen::Index i = 0; i < labels_.size(); ++i) {
      require(labels_[i] == 1.0 || labels_[i] == -1.0,
              "Dataset: labels must be -1 or +1 (row " + std::to_string(i) + ")");
    }
  }

  /// An empty design with d columns; used for prior-only models.
  static Dataset empty(std::size_t d) {
    return Dataset(FeatureMatrix(0, static_cast<Eigen::Index>(d)), Vector(0));
  }

  std::size_t size() const { return static_cast<std::size_t>(features_.rows()); }
  std::size_t dimension() const { return static_cast<std::size_t>(features_.cols()); }
  const FeatureMatrix& features() const { return features_; }
  const Vector& labels() const { return labels_; }

  auto row(std::size_t i) const {
    return features_.row(static_cast<Eigen::Index>(i));
  }
  double label(std::size_t i) const { return labels_[static_cast<Eigen::Index>(i)]; }

 private:
  FeatureMatrix features_;
  Vector labels_;
};

namespace detail {

inline double parse_label(const std::string& token, const std::string& where) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    throw ContractViolation(where + ": unparseable label '" + token + "'");
  }
  if (used != token.size()) {
    throw ContractViolation(where + ": unparseable label '" + token + "'");
  }
  // 0/1 files are common; 0 is read as the negative class.
  if (value == 0.0) return -1.0;
  if (value == 1.0 || value == -1.0) return value;
  throw ContractViolation(where + ": label " + token + " is not in {-1, 0, +1}");
}

inline double parse_value(const std::string& token, const std::string& where) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    throw ContractViolation(where + ": unparseable value '" + token + "'");
  }
  if (used != token.size() || !std::isfinite(value)) {
    throw ContractViolation(where + ": bad value '" + token + "'");
  }
  return value;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline Dataset assemble(const std::vector<std::vector<double>>& rows,
                        const std::vector<double>& labels, std::size_t d,
                        bool add_bias) {
  const std::size_t cols = d + (add_bias ? 1 : 0);
  FeatureMatrix x(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(cols));
  x.setZero();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    if (add_bias) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = 1.0;
  }
  Vector y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i];
  return Dataset(std::move(x), std::move(y));
}

}  // namespace detail

/// Dense CSV: label in the first column, features after it. A header row is
/// skipped when its first field does not parse as a number.
inline Dataset load_csv(const std::string& path, bool add_bias) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot open dataset " + path);
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::size_t d = 0;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(detail::trim(field));
    const std::string where = path + ":" + std::to_string(line_no);
    if (first_content) {
      first_content = false;
      char* end = nullptr;
      std::strtod(fields[0].c_str(), &end);
      if (end == fields[0].c_str()) continue;  // header
    }
    if (fields.size() < 2) throw ContractViolation(where + ": need label and features");
    if (rows.empty()) {
      d = fields.size() - 1;
    } else if (fields.size() - 1 != d) {
      throw ContractViolation(where + ": expected " + std::to_string(d) + " features");
    }
    labels.push_back(detail::parse_label(fields[0], where));
    std::vector<double> row(d);
    for (std::size_t j = 0; j < d; ++j) row[j] = detail::parse_value(fields[j + 1], where);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ContractViolation("dataset " + path + " has no rows");
  return detail::assemble(rows, labels, d, add_bias);
}

/// libsvm sparse text: "label idx:value idx:value ..." with 1-based indices.
/// The feature count is the largest index seen unless `min_features` is
/// larger (train and test files must agree on it).
inline Dataset load_libsvm(const std::string& path, bool add_bias,
                           std::size_t min_features = 0) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot open dataset " + path);
  std::vector<std::vector<std::pair<std::size_t, double>>> sparse;
  std::vector<double> labels;
  std::size_t d = min_features;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path + ":" + std::to_string(line_no);
    std::stringstream ss(line);
    std::string token;
    ss >> token;
    labels.push_back(detail::parse_label(token, where));
    std::vector<std::pair<std::size_t, double>> entries;
    while (ss >> token) {
      const auto colon = token.find(':');
      if (colon == std::string::npos) throw ContractViolation(where + ": expected idx:value");
      const std::string idx_str = token.substr(0, colon);
      std::size_t used = 0;
      long idx = 0;
      try {
        idx = std::stol(idx_str, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != idx_str.size() || idx < 1) {
        throw ContractViolation(where + ": bad feature index '" + idx_str + "'");
      }
      const double value = detail::parse_value(token.substr(colon + 1), where);
      entries.emplace_back(static_cast<std::size_t>(idx - 1), value);
      d = std::max(d, static_cast<std::size_t>(idx));
    }
    sparse.push_back(std::move(entries));
  }
  if (sparse.empty()) throw ContractViolation("dataset " + path + " has no rows");
  std::vector<std::vector<double>> rows(sparse.size(), std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < sparse.size(); ++i) {
    for (const auto& [j, v] : sparse[i]) rows[i][j] = v;
  }
  return detail::assemble(rows, labels, d, add_bias);
}

/// Shuffled-epoch batches: each epoch is a fresh seeded permutation of
/// {0..N-1} cut into consecutive batches of size n. When n does not divide
/// N the final batch of an epoch holds the N mod n leftover indices, so every
/// index still appears exactly once per epoch.
class MinibatchSchedule {
 public:
  MinibatchSchedule(std::size_t dataset_size, std::size_t batch_size,
                    std::uint64_t seed)
      : n_total_(dataset_size), batch_(batch_size), seed_(seed) {
    require(batch_ > 0, "MinibatchSchedule: batch size must be positive");
    require(n_total_ == 0 || batch_ <= n_total_,
            "MinibatchSchedule: batch size exceeds dataset size");
  }

  std::size_t dataset_size() const { return n_total_; }
  std::size_t batch_size() const { return batch_; }
  std::uint64_t epoch() const { return epoch_; }

  /// Indices of the next batch; empty for a dataset of size 0.
  std::vector<std::size_t> next() {
    if (n_total_ == 0) return {};
    if (cursor_ == 0 || cursor_ >= order_.size()) start_epoch();
    const std::size_t end = std::min(order_.size(), cursor_ + batch_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return out;
  }

 private:
  void start_epoch() {
    if (!order_.empty()) ++epoch_;
    order_.resize(n_total_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng::Stream stream(seed_, rng::Purpose::kMinibatch, epoch_, 0);
    rng::shuffle(order_.begin(), order_.end(), stream);
    cursor_ = 0;
  }

  std::size_t n_total_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace posteriorflow
