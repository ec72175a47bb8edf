#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gpc/zones.hpp"

namespace gpc {

// Square count matrix; rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = kNumZones);
  ConfusionMatrix(int num_classes, std::vector<std::int64_t> row_major_counts);

  int num_classes() const { return n_; }
  std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth * n_ + pred)]; }
  void add(int truth, int pred, std::int64_t count = 1);
  void merge(const ConfusionMatrix& other);

  std::int64_t total() const;
  std::int64_t trace() const;
  std::int64_t row_sum(int truth) const;

  // Delimited n x n block, one row per line.
  std::string to_tsv() const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_;
  std::vector<std::int64_t> counts_;
};

// Throws LengthMismatch or Empty.
ConfusionMatrix confusion_matrix(std::span<const GazeZone> preds, std::span<const GazeZone> labels);
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes);

// trace / total. Throws EmptyMatrix on an all-zero matrix.
double micro_accuracy(const ConfusionMatrix& cm);
// Mean over populated rows of diag / row sum; classes with no samples are
// left out of the average. Throws EmptyMatrix on an all-zero matrix.
double macro_accuracy(const ConfusionMatrix& cm);

}  // namespace gpc
