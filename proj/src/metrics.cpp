#include "gpc/metrics.hpp"

#include <numeric>
#include <sstream>

#include "gpc/error.hpp"

namespace gpc {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw Error(ErrorKind::BadConfig, "confusion matrix needs at least one class");
}

ConfusionMatrix::ConfusionMatrix(int num_classes, std::vector<std::int64_t> row_major_counts)
    : n_(num_classes), counts_(std::move(row_major_counts)) {
  if (num_classes < 1 || counts_.size() != static_cast<std::size_t>(n_ * n_)) {
    throw Error(ErrorKind::ShapeMismatch, "confusion counts are not n x n");
  }
  for (auto c : counts_) {
    if (c < 0) throw Error(ErrorKind::BadConfig, "negative confusion count");
  }
}

void ConfusionMatrix::add(int truth, int pred, std::int64_t count) {
  if (truth < 0 || truth >= n_ || pred < 0 || pred >= n_) throw Error(ErrorKind::UnknownZoneCode, "class out of range");
  counts_[static_cast<std::size_t>(truth * n_ + pred)] += count;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw Error(ErrorKind::ShapeMismatch, "merging confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int i = 0; i < n_; ++i) t += at(i, i);
  return t;
}

std::int64_t ConfusionMatrix::row_sum(int truth) const {
  std::int64_t s = 0;
  for (int p = 0; p < n_; ++p) s += at(truth, p);
  return s;
}

std::string ConfusionMatrix::to_tsv() const {
  std::ostringstream out;
  for (int t = 0; t < n_; ++t) {
    for (int p = 0; p < n_; ++p) out << (p ? "\t" : "") << at(t, p);
    out << '\n';
  }
  return out.str();
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::LengthMismatch, "preds and labels differ in length");
  if (preds.empty()) throw Error(ErrorKind::Empty, "no predictions");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(labels[i], preds[i]);
  return cm;
}

ConfusionMatrix confusion_matrix(std::span<const GazeZone> preds, std::span<const GazeZone> labels) {
  std::vector<int> p(preds.size()), l(labels.size());
  for (std::size_t i = 0; i < preds.size(); ++i) p[i] = zone_code(preds[i]);
  for (std::size_t i = 0; i < labels.size(); ++i) l[i] = zone_code(labels[i]);
  return confusion_matrix(p, l, kNumZones);
}

double micro_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error(ErrorKind::EmptyMatrix, "micro accuracy of an empty matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

double macro_accuracy(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int populated = 0;
  for (int i = 0; i < cm.num_classes(); ++i) {
    const auto rs = cm.row_sum(i);
    if (rs == 0) continue;
    sum += static_cast<double>(cm.at(i, i)) / static_cast<double>(rs);
    ++populated;
  }
  if (populated == 0) throw Error(ErrorKind::EmptyMatrix, "macro accuracy of an empty matrix");
  return sum / populated;
}

}  // namespace gpc
